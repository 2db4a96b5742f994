"""Discretised architectures and their ``arch.json`` representation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .candidate_ops import DECODER_KINDS, ENCODER_KINDS

ARCH_VERSION = 1
FIXED_LAST_SPLIT = "cross_attn"
REQUIRED_DIMS = ("d", "e", "m", "n", "s")


class SchemaError(ValueError):
    pass


@dataclass
class Architecture:
    encoder: list[list[str]]
    decoder: list[list[str]]
    dims: dict[str, int]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for key in REQUIRED_DIMS:
            if key not in self.dims:
                raise SchemaError(f"dims.{key} is missing")
            if not isinstance(self.dims[key], int) or isinstance(self.dims[key], bool) or self.dims[key] <= 0:
                raise SchemaError(f"dims.{key} must be a positive integer, got {self.dims[key]!r}")
        s, m, n = self.dims["s"], self.dims["m"], self.dims["n"]
        _check_grid("encoder", self.encoder, s, m, ENCODER_KINDS)
        _check_grid("decoder.searched", self.decoder, s, n, DECODER_KINDS)

    def to_dict(self) -> dict:
        return {
            "version": ARCH_VERSION,
            "dims": dict(self.dims),
            "encoder": [list(row) for row in self.encoder],
            "decoder": {"searched": [list(row) for row in self.decoder], "fixed_last_split": FIXED_LAST_SPLIT},
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Architecture":
        if not isinstance(doc, dict):
            raise SchemaError("architecture document must be a JSON object")
        if "version" not in doc:
            raise SchemaError("version is missing")
        if doc["version"] != ARCH_VERSION:
            raise SchemaError(f"version {doc['version']!r} is not supported (expected {ARCH_VERSION})")
        for key in ("dims", "encoder", "decoder"):
            if key not in doc:
                raise SchemaError(f"{key} is missing")
        dec = doc["decoder"]
        if not isinstance(dec, dict) or "searched" not in dec:
            raise SchemaError("decoder.searched is missing")
        if dec.get("fixed_last_split") != FIXED_LAST_SPLIT:
            raise SchemaError(f"decoder.fixed_last_split must be {FIXED_LAST_SPLIT!r}, got {dec.get('fixed_last_split')!r}")
        if not isinstance(doc["dims"], dict):
            raise SchemaError("dims must be an object")
        return cls(encoder=doc["encoder"], decoder=dec["searched"], dims=dict(doc["dims"]),
                   provenance=dict(doc.get("provenance", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Architecture":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def degenerate_layers(self) -> list[str]:
        """Grid rows whose every searched split chose ``zero`` (the layer is then an identity)."""
        out = [f"encoder[{i}]" for i, row in enumerate(self.encoder) if all(k == "zero" for k in row)]
        out += [f"decoder[{i}]" for i, row in enumerate(self.decoder) if all(k == "zero" for k in row)]
        return out


def _check_grid(name: str, grid, rows: int, cols: int, legal) -> None:
    if not isinstance(grid, list) or len(grid) != rows:
        raise SchemaError(f"{name} must be a list of {rows} rows")
    for i, row in enumerate(grid):
        if not isinstance(row, list) or len(row) != cols:
            raise SchemaError(f"{name}[{i}] must list {cols} operation kinds")
        for j, kind in enumerate(row):
            if kind not in legal:
                raise SchemaError(f"{name}[{i}][{j}]: unknown or illegal operation tag {kind!r}")

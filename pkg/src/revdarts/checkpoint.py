"""On-disk formats: flat little-endian weight dumps, alpha/metric JSON."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import Tensor, dtype_name

THETA_BIN = "theta.bin"
THETA_SIDECAR = "theta.json"
ALPHA_JSON = "alpha.json"


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


def save_theta(directory, named_params: Iterable[tuple[str, Tensor]]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    dtype = None
    with open(directory / THETA_BIN, "wb") as fh:
        for name, p in named_params:
            arr = p.data if isinstance(p, Tensor) else np.asarray(p)
            dtype = dtype or dtype_name(arr.dtype)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(le.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    write_json(directory / THETA_SIDECAR, {"dtype": dtype or "f32", "byteorder": "little", "tensors": entries})
    return directory


def load_theta(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    meta = read_json(directory / THETA_SIDECAR)
    for key in ("dtype", "tensors"):
        if key not in meta:
            raise ValueError(f"{directory / THETA_SIDECAR}: field {key!r} is missing")
    dt = np.dtype("<f8" if meta["dtype"] == "f64" else "<f4")
    raw = (directory / THETA_BIN).read_bytes()
    out = {}
    for e in meta["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * dt.itemsize
        if end > len(raw):
            raise ValueError(f"{directory / THETA_BIN}: tensor {e['name']!r} runs past end of file")
        out[e["name"]] = np.frombuffer(raw[e["offset"]:end], dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return out


def assign_theta(named_params: Iterable[tuple[str, Tensor]], values: dict[str, np.ndarray]) -> None:
    for name, p in named_params:
        if name not in values:
            raise KeyError(f"checkpoint has no tensor named {name!r}")
        v = values[name]
        if v.shape != p.shape:
            raise ValueError(f"tensor {name!r}: checkpoint shape {v.shape} vs model {p.shape}")
        p.data[...] = v


def save_checkpoint(directory, named_params, alpha_doc: dict) -> Path:
    directory = Path(directory)
    save_theta(directory, named_params)
    write_json(directory / ALPHA_JSON, alpha_doc)
    return directory


class MetricsWriter:
    """Append-only ``metrics.jsonl``; one object per logged step."""

    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=False) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

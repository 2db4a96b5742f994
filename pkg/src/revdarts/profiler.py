"""Activation-memory sweep: reversible backbone vs stored-activation backbone."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .candidate_ops import AttentionContext, build_op_set, legal_kinds
from .ledger import MemoryCapExceeded, MemoryLedger
from .reversible import ReversibleLayer, stack_backward, stack_forward, stack_forward_standard
from .search import SearchNode
from .tensor import RngStream, Tensor, backward_from, resolve_dtype

CSV_HEADER = "d,depth,backbone,retained_bytes,peak_bytes,recompute_count"
BACKBONES = ("reversible", "standard")


@dataclass
class ProfileConfig:
    d: list = field(default_factory=lambda: [96])
    depths: list = field(default_factory=lambda: [1, 2, 4, 8])
    splits: int = 2
    batch_size: int = 8
    seq_len: int = 16
    pooling: str = "max"
    byte_cap: Optional[int] = None
    seed: int = 0
    dtype: str = "f32"


def build_search_stack(d: int, depth: int, splits: int, rng: RngStream, dtype=None, pooling: str = "max",
                       side: str = "encoder") -> list[ReversibleLayer]:
    """``depth`` layers of full mixed-operation nodes (every candidate evaluated)."""
    dt = resolve_dtype(dtype)
    width = d // splits
    n_ops = len(legal_kinds(side))
    layers = []
    for i in range(depth):
        nodes = []
        for k in range(splits):
            alpha = Tensor(rng.child(100 * i + k).normal((n_ops,), 1e-3), dtype=dt, requires_grad=True)
            ops = build_op_set(side, width, rng.child(10_000 + 100 * i + k), dt)
            nodes.append(SearchNode(alpha, ops, pooling, side))
        layers.append(ReversibleLayer(nodes, name=f"layer{i}"))
    return layers


def measure(layers, x: np.ndarray, backbone: str, ctx=None, byte_cap: Optional[int] = None) -> dict:
    """One forward/backward; retained bytes are read between the two."""
    ledger = MemoryLedger(cap=byte_cap)
    ctx = ctx or AttentionContext()
    x0 = Tensor(x, requires_grad=True)
    row = {"retained_bytes": 0, "peak_bytes": 0, "recompute_count": 0, "cap_exceeded": False}
    try:
        if backbone == "reversible":
            state = stack_forward(layers, x0, ctx, None, ledger, "reversible")
            row["retained_bytes"] = ledger.retained_bytes
            stack_backward(state, np.ones_like(x), ctx)
        elif backbone == "standard":
            ledger.retain(x0.nbytes, "standard/input")
            out, tape = stack_forward_standard(layers, x0, ctx, None, ledger, "standard")
            row["retained_bytes"] = ledger.retained_bytes
            backward_from(out, np.ones_like(x))
            tape.close()
            ledger.release(x0.nbytes, "standard/input")
        else:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {backbone!r}")
        ledger.assert_drained()
    except MemoryCapExceeded:
        row["cap_exceeded"] = True
        row["retained_bytes"] = ledger.retained_bytes
    row["peak_bytes"] = ledger.peak_bytes
    row["recompute_count"] = ledger.recompute_forward_count
    return row


def profile_memory(config: ProfileConfig, out_dir=None) -> list[dict]:
    rows = []
    rng = RngStream(config.seed)
    dt = resolve_dtype(config.dtype)
    for d in config.d:
        if d % config.splits:
            raise ValueError(f"d={d} is not divisible by {config.splits} splits")
        x = rng.child(d).normal((config.batch_size, config.seq_len, d), 1.0).astype(dt)
        for depth in config.depths:
            layers = build_search_stack(d, depth, config.splits, rng.child(7), dt, config.pooling)
            for backbone in BACKBONES:
                for p in (p for layer in layers for p in layer.parameters()):
                    p.grad = None
                r = measure(layers, x, backbone, byte_cap=config.byte_cap)
                rows.append({"d": d, "depth": depth, "backbone": backbone, **r})
    if out_dir is not None:
        write_outputs(rows, Path(out_dir))
    return rows


def summarize(rows: list[dict]) -> dict:
    points = {}
    for r in rows:
        points.setdefault((r["d"], r["depth"]), {})[r["backbone"]] = r
    out = []
    for (d, depth), pair in sorted(points.items()):
        rev, std = pair.get("reversible"), pair.get("standard")
        entry = {"d": d, "depth": depth}
        if rev:
            entry["reversible_retained_bytes"] = rev["retained_bytes"]
        if std:
            entry["standard_retained_bytes"] = std["retained_bytes"]
            entry["standard_cap_exceeded"] = std["cap_exceeded"]
        if rev and std and std["retained_bytes"] and not std["cap_exceeded"]:
            entry["ratio"] = rev["retained_bytes"] / std["retained_bytes"]
        out.append(entry)
    return {"csv_header": CSV_HEADER, "points": out,
            "cap_exceeded": [{"d": r["d"], "depth": r["depth"], "backbone": r["backbone"]}
                             for r in rows if r["cap_exceeded"]]}


def write_outputs(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "memprofile.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER.split(","))
        for r in rows:
            w.writerow([r["d"], r["depth"], r["backbone"], r["retained_bytes"], r["peak_bytes"], r["recompute_count"]])
    (out_dir / "memprofile.json").write_text(json.dumps(summarize(rows), indent=2) + "\n", encoding="utf-8")

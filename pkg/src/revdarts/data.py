"""Synthetic copy/reverse translation data with disjoint shards."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .model import BOS, EOS, PAD
from .tensor import RngStream

SHARDS = ("theta_train", "alpha_val", "retrain_train", "retrain_val", "test")
FIRST_TOKEN = 4


@dataclass
class DatasetSpec:
    task: str = "copy"
    vocab: int = 64
    min_len: int = 4
    max_len: int = 24
    seed: int = 0
    sizes: dict = field(default_factory=lambda: {
        "theta_train": 2000, "alpha_val": 2000, "retrain_train": 2000, "retrain_val": 200, "test": 200,
    })

    def validate(self) -> None:
        if self.task not in ("copy", "reverse"):
            raise ValueError(f"dataset.task must be 'copy' or 'reverse', got {self.task!r}")
        if self.vocab < 4:
            raise ValueError("dataset.vocab must be >= 4 (pad/bos/eos/unk are reserved)")
        if self.vocab == 4:
            raise ValueError("dataset.vocab leaves no content tokens")
        if self.min_len < 1 or self.min_len > self.max_len:
            raise ValueError(f"dataset length range [{self.min_len}, {self.max_len}] is empty")
        unknown = set(self.sizes) - set(SHARDS)
        if unknown:
            raise ValueError(f"dataset.sizes has unknown shards {sorted(unknown)}")


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def pad_mask(self) -> np.ndarray:
        return self.tgt_out == PAD

    @property
    def size(self) -> int:
        return self.src.shape[0]


class SyntheticDataset:
    def __init__(self, spec: DatasetSpec, shards: dict[str, list[tuple]]):
        self.spec = spec
        self.shards = shards

    def target(self, seq) -> tuple:
        return tuple(seq) if self.spec.task == "copy" else tuple(reversed(seq))

    def make_batch(self, seqs) -> Batch:
        b = len(seqs)
        ls = max(len(s) for s in seqs) + 1
        src = np.full((b, ls), PAD, dtype=np.int64)
        tgt_in = np.full((b, ls), PAD, dtype=np.int64)
        tgt_out = np.full((b, ls), PAD, dtype=np.int64)
        for i, seq in enumerate(seqs):
            t = self.target(seq)
            n = len(seq)
            src[i, :n] = seq
            src[i, n] = EOS
            tgt_in[i, 0] = BOS
            tgt_in[i, 1:n + 1] = t
            tgt_out[i, :n] = t
            tgt_out[i, n] = EOS
        return Batch(src, tgt_in, tgt_out)

    def sample_batch(self, shard: str, batch_size: int, rng: RngStream) -> Batch:
        data = self.shards[shard]
        idx = rng.integers(0, len(data), size=batch_size)
        return self.make_batch([data[i] for i in idx])

    def batches(self, shard: str, batch_size: int) -> Iterator[Batch]:
        data = self.shards[shard]
        for i in range(0, len(data), batch_size):
            yield self.make_batch(data[i:i + batch_size])


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    """Draw every shard from its own stream; no sequence appears in two shards."""
    spec.validate()
    root = RngStream(spec.seed)
    seen: set[tuple] = set()
    shards: dict[str, list[tuple]] = {}
    for i, name in enumerate(SHARDS):
        rng = root.child(i)
        want = int(spec.sizes.get(name, 0))
        out: list[tuple] = []
        attempts = 0
        while len(out) < want:
            attempts += 1
            if attempts > 100 * want + 1000:
                raise ValueError(f"cannot draw {want} distinct sequences for shard {name!r}")
            g = rng.generator()
            n = int(g.integers(spec.min_len, spec.max_len + 1))
            seq = tuple(int(t) for t in g.integers(FIRST_TOKEN, spec.vocab, size=n))
            if seq in seen:
                continue
            seen.add(seq)
            out.append(seq)
        shards[name] = out
    return SyntheticDataset(spec, shards)

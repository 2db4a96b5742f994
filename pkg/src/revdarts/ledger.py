"""Activation-memory bookkeeping shared by the reversible engine and the profiler."""

from __future__ import annotations

from collections import defaultdict


class LedgerError(RuntimeError):
    pass


class MemoryCapExceeded(LedgerError):
    pass


class MemoryLedger:
    """Counts bytes of activations held between a forward pass and its backward.

    This is not process RSS: only tensors explicitly retained (stored layer
    outputs, tape node outputs) are counted.
    """

    def __init__(self, cap: int | None = None):
        self.cap = cap
        self.reset()

    def reset(self) -> None:
        self.retained_bytes = 0
        self.peak_bytes = 0
        self.recompute_forward_count = 0
        self.by_label: dict[str, int] = defaultdict(int)

    def retain(self, nbytes: int, label: str = "activation") -> None:
        self.retained_bytes += int(nbytes)
        self.by_label[label] += int(nbytes)
        if self.retained_bytes > self.peak_bytes:
            self.peak_bytes = self.retained_bytes
        if self.cap is not None and self.retained_bytes > self.cap:
            raise MemoryCapExceeded(f"retained {self.retained_bytes} bytes exceeds cap {self.cap}")

    def release(self, nbytes: int, label: str = "activation") -> None:
        nbytes = int(nbytes)
        if nbytes > self.by_label[label] or nbytes > self.retained_bytes:
            raise LedgerError(f"release of {nbytes} bytes under {label!r} exceeds what is retained")
        self.retained_bytes -= nbytes
        self.by_label[label] -= nbytes
        if not self.by_label[label]:
            del self.by_label[label]

    def count_recompute(self, n: int = 1) -> None:
        self.recompute_forward_count += n

    def breakdown(self) -> dict[str, int]:
        return {k: v for k, v in sorted(self.by_label.items()) if v}

    def assert_drained(self) -> None:
        if self.retained_bytes:
            raise LedgerError(f"{self.retained_bytes} activation bytes still retained: {self.breakdown()}")

    def snapshot(self) -> dict:
        return {
            "retained_bytes": self.retained_bytes,
            "peak_bytes": self.peak_bytes,
            "recompute_count": self.recompute_forward_count,
        }

"""Candidate operations for one search node.

Every operation except ``zero`` and ``identity`` is wrapped as
``LayerNorm(H + dropout(o(H)))`` so that residual connections and
normalisation live inside the reversible split functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .tensor import RngStream, Tensor, resolve_dtype

OPERATION_KINDS = (
    "std_conv_3", "std_conv_5", "std_conv_7", "std_conv_11",
    "dyn_conv_3", "dyn_conv_7", "dyn_conv_11", "dyn_conv_15",
    "self_attn", "cross_attn", "glu", "ffn", "zero", "identity",
)
ENCODER_KINDS = tuple(k for k in OPERATION_KINDS if k != "cross_attn")
DECODER_KINDS = OPERATION_KINDS
HEADS = 8
DYN_CONV_GROUPS = 8
FFN_MULT = 4
MASK_VALUE = -1e9


class OperationError(ValueError):
    pass


def legal_kinds(side: str) -> tuple[str, ...]:
    if side == "encoder":
        return ENCODER_KINDS
    if side == "decoder":
        return DECODER_KINDS
    raise ValueError(f"side must be 'encoder' or 'decoder', got {side!r}")


def kernel_width(kind: str) -> int:
    return int(kind.rsplit("_", 1)[1])


@dataclass
class AttentionContext:
    """Per-batch side information every operation may consult.

    ``key_mask``/``memory_mask`` are boolean [B, l] arrays, True at padding.
    """

    memory: Optional[Tensor] = None
    causal: bool = False
    key_mask: Optional[np.ndarray] = None
    memory_mask: Optional[np.ndarray] = None
    dropout: float = 0.0


def _xavier(rng: RngStream, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return ((rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * a).astype(dtype)


class Operation:
    """One candidate operation with its weights."""

    def __init__(self, kind: str, width: int, dtype=None):
        if kind not in OPERATION_KINDS:
            raise OperationError(f"unknown operation kind {kind!r}")
        self.kind = kind
        self.width = width
        self.dtype = resolve_dtype(dtype)
        self.params: dict[str, Tensor] = {}

    @property
    def wrapped(self) -> bool:
        return self.kind not in ("zero", "identity")

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _add_norm(self):
        self._param("ln_gain", np.ones(self.width))
        self._param("ln_bias", np.zeros(self.width))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}{name}", t) for name, t in self.params.items()]

    def transform(self, h: Tensor, ctx: AttentionContext, rng: Optional[RngStream]) -> Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.kind!r}, width={self.width})"


class Zero(Operation):
    def transform(self, h, ctx, rng):
        return Tensor(np.zeros(h.shape, dtype=h.dtype))


class Identity(Operation):
    def transform(self, h, ctx, rng):
        return h


class StdConv(Operation):
    """Depthwise-separable convolution: depthwise taps then a pointwise projection."""

    def __init__(self, kind, width, rng, dtype=None):
        super().__init__(kind, width, dtype)
        k = kernel_width(kind)
        self._param("depthwise", (rng.uniform((k, width)) * 2 - 1) / math.sqrt(k))
        self._param("depthwise_bias", np.zeros(width))
        self._param("pointwise", _xavier(rng, width, width, self.dtype))
        self._param("pointwise_bias", np.zeros(width))
        self._add_norm()

    def transform(self, h, ctx, rng):
        p = self.params
        y = F.add(F.depthwise_conv1d(h, p["depthwise"], causal=ctx.causal), p["depthwise_bias"])
        return F.linear(y, p["pointwise"], p["pointwise_bias"])


class DynConv(Operation):
    """Per-position softmax-normalised kernels predicted from the input itself."""

    def __init__(self, kind, width, rng, dtype=None, groups: int = DYN_CONV_GROUPS):
        super().__init__(kind, width, dtype)
        self.kernel = kernel_width(kind)
        self.groups = groups
        self._param("kernel_proj", _xavier(rng, width, groups * self.kernel, self.dtype))
        self._param("kernel_bias", np.zeros(groups * self.kernel))
        self._add_norm()

    def transform(self, h, ctx, rng):
        p = self.params
        b, l, _ = h.shape
        logits = F.linear(h, p["kernel_proj"], p["kernel_bias"])
        kernels = F.softmax(F.reshape(logits, (b, l, self.groups, self.kernel)), axis=-1)
        return F.dynamic_conv1d(h, kernels, causal=ctx.causal)


class Attention(Operation):
    """Multi-head scaled dot-product attention (self or over encoder memory)."""

    def __init__(self, kind, width, rng, dtype=None, memory_width: Optional[int] = None, heads: int = HEADS):
        super().__init__(kind, width, dtype)
        if width % heads:
            raise OperationError(f"{kind}: width {width} not divisible by {heads} heads")
        self.heads = heads
        self.cross = kind == "cross_attn"
        kv_in = (memory_width or width) if self.cross else width
        self.memory_width = kv_in
        self._param("q_proj", _xavier(rng, width, width, self.dtype))
        self._param("q_bias", np.zeros(width))
        self._param("k_proj", _xavier(rng, kv_in, width, self.dtype))
        self._param("k_bias", np.zeros(width))
        self._param("v_proj", _xavier(rng, kv_in, width, self.dtype))
        self._param("v_bias", np.zeros(width))
        self._param("o_proj", _xavier(rng, width, width, self.dtype))
        self._param("o_bias", np.zeros(width))
        self._add_norm()

    def _heads(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return F.transpose(F.reshape(x, (b, l, self.heads, self.width // self.heads)), (0, 2, 1, 3))

    def transform(self, h, ctx, rng):
        p = self.params
        if self.cross:
            if ctx.memory is None:
                raise OperationError("cross_attn requires encoder memory in the context")
            src, key_mask, causal = ctx.memory, ctx.memory_mask, False
        else:
            src, key_mask, causal = h, ctx.key_mask, ctx.causal
        b, lq, _ = h.shape
        lk = src.shape[1]
        q = self._heads(F.linear(h, p["q_proj"], p["q_bias"]))
        k = self._heads(F.linear(src, p["k_proj"], p["k_bias"]))
        v = self._heads(F.linear(src, p["v_proj"], p["v_bias"]))
        scores = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.width // self.heads))
        bias = np.zeros((b, 1, lq, lk), dtype=h.dtype)
        if key_mask is not None:
            bias += np.where(np.asarray(key_mask, bool), MASK_VALUE, 0.0)[:, None, None, :]
        if causal:
            bias += np.triu(np.full((lq, lk), MASK_VALUE), k=1)[None, None]
        if key_mask is not None or causal:
            scores = F.add(scores, Tensor(bias))
        attn = F.softmax(scores, axis=-1)
        ctxv = F.transpose(F.matmul(attn, v), (0, 2, 1, 3))
        return F.linear(F.reshape(ctxv, (b, lq, self.width)), p["o_proj"], p["o_bias"])


class GLU(Operation):
    def __init__(self, kind, width, rng, dtype=None):
        super().__init__(kind, width, dtype)
        self._param("proj", _xavier(rng, width, 2 * width, self.dtype))
        self._param("bias", np.zeros(2 * width))
        self._add_norm()

    def transform(self, h, ctx, rng):
        y = F.linear(h, self.params["proj"], self.params["bias"])
        a, gate = F.split(y, 2, axis=-1)
        return F.mul(a, F.sigmoid(gate))


class FFN(Operation):
    def __init__(self, kind, width, rng, dtype=None):
        super().__init__(kind, width, dtype)
        self._param("w1", _xavier(rng, width, FFN_MULT * width, self.dtype))
        self._param("b1", np.zeros(FFN_MULT * width))
        self._param("w2", _xavier(rng, FFN_MULT * width, width, self.dtype))
        self._param("b2", np.zeros(width))
        self._add_norm()

    def transform(self, h, ctx, rng):
        p = self.params
        return F.linear(F.relu(F.linear(h, p["w1"], p["b1"])), p["w2"], p["b2"])


def make_operation(kind: str, width: int, rng: RngStream, dtype=None, memory_width: Optional[int] = None) -> Operation:
    if kind.startswith("std_conv"):
        return StdConv(kind, width, rng, dtype)
    if kind.startswith("dyn_conv"):
        return DynConv(kind, width, rng, dtype)
    if kind in ("self_attn", "cross_attn"):
        return Attention(kind, width, rng, dtype, memory_width=memory_width)
    if kind == "glu":
        return GLU(kind, width, rng, dtype)
    if kind == "ffn":
        return FFN(kind, width, rng, dtype)
    if kind == "zero":
        return Zero(kind, width, dtype)
    if kind == "identity":
        return Identity(kind, width, dtype)
    raise OperationError(f"unknown operation kind {kind!r}")


def build_op_set(side: str, width: int, rng: RngStream, dtype=None, memory_width: Optional[int] = None) -> list[Operation]:
    """Fresh instances of every operation legal on ``side``, in canonical tag order."""
    kinds = legal_kinds(side)
    if width < HEADS or width % HEADS:
        raise OperationError(f"width {width} must be a positive multiple of {HEADS}")
    return [make_operation(k, width, rng.child(i), dtype, memory_width) for i, k in enumerate(kinds)]


def apply_op(op: Operation, h: Tensor, ctx: AttentionContext, rng: Optional[RngStream] = None) -> Tensor:
    if op.kind == "zero":
        return op.transform(h, ctx, rng)
    if op.kind == "identity":
        return h
    y = op.transform(h, ctx, rng)
    if ctx.dropout > 0.0 and rng is not None:
        y = F.dropout(y, ctx.dropout, rng)
    out = F.layer_norm(F.add(h, y), op.params["ln_gain"], op.params["ln_bias"])
    if not np.isfinite(out.data).all():
        raise FloatingPointError(f"{op.kind}: non-finite values in output")
    return out

"""Multi-split reversible layers and backpropagation with input reconstruction.

A layer splits its input ``X`` into ``n`` channel groups and computes, in order,

    Y_k = X_k + G_k(X_{i>k}, Y_{i<k})

so each ``X_k`` can be recovered from the output as ``Y_k - G_k(...)`` in the
order ``k = n .. 1``.  During backward only the top layer's output is kept;
every lower layer's input is rebuilt on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .ledger import MemoryLedger
from .tensor import (
    RngStream,
    ShapeError,
    Tape,
    Tensor,
    backward_from,
    detach,
    enable_grad,
    no_grad,
)

DRIFT_GUARD = 1e-3


class ReconstructionError(RuntimeError):
    pass


@dataclass
class GradientBundle:
    dx: np.ndarray
    x: np.ndarray  # reconstructed layer (or stack) input

    @property
    def shape(self):
        return self.dx.shape


class ReversibleLayer:
    """An ``n``-split layer; ``g_functions[k]`` maps (later X, earlier Y, ctx, rng) to a split-width tensor."""

    def __init__(self, g_functions: Sequence[Callable], name: str = "layer"):
        if len(g_functions) < 2:
            raise ValueError(f"a reversible layer needs at least 2 splits, got {len(g_functions)}")
        self.g = list(g_functions)
        self.n = len(self.g)
        self.name = name
        self.rng_log: Optional[list] = None
        self.g_evals = [0] * self.n
        self.debug = False
        self._shadow: Optional[np.ndarray] = None

    def parameters(self) -> list[Tensor]:
        seen, out = set(), []
        for g in self.g:
            for p in g.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def reset_counters(self) -> None:
        self.g_evals = [0] * self.n

    def eval_g(self, k: int, later_x: list, earlier_y: list, ctx, ref_shape: tuple) -> Tensor:
        seed = self.rng_log[k]
        rng = RngStream(seed) if seed is not None else None
        out = self.g[k](list(later_x), list(earlier_y), ctx, rng)
        self.g_evals[k] += 1
        if tuple(out.shape) != tuple(ref_shape):
            raise ShapeError(f"{self.name}: G_{k + 1} returned {tuple(out.shape)}, expected {tuple(ref_shape)}")
        return out


def _check_width(layer: ReversibleLayer, x) -> None:
    d = x.shape[-1]
    if d % layer.n:
        raise ShapeError(f"{layer.name}: width {d} is not divisible by {layer.n} splits")


def forward_layer(layer: ReversibleLayer, x: Tensor, ctx, rng: Optional[RngStream] = None) -> Tensor:
    """Compute ``Concat(Y_1..Y_n)`` strictly in split order; records per-split seeds."""
    _check_width(layer, x)
    layer.rng_log = [rng.next_seed() if rng is not None else None for _ in range(layer.n)]
    if layer.debug:
        layer._shadow = x.data.copy()
    xs = F.split(x, layer.n)
    ys: list[Tensor] = []
    for k in range(layer.n):
        g = layer.eval_g(k, xs[k + 1:], ys, ctx, xs[k].shape)
        ys.append(F.add(xs[k], g))
    return F.concat(ys)


def inverse_layer(layer: ReversibleLayer, y: Tensor, ctx) -> Tensor:
    """Recover the layer input from its output, replaying the recorded seeds."""
    if layer.rng_log is None:
        raise ReconstructionError(f"{layer.name}: no rng log; run forward_layer first")
    _check_width(layer, y)
    with no_grad():
        ys = F.split(detach(y), layer.n)
        xs: list[Optional[Tensor]] = [None] * layer.n
        for k in reversed(range(layer.n)):
            g = layer.eval_g(k, xs[k + 1:], ys[:k], ctx, ys[k].shape)
            xs[k] = Tensor(ys[k].data - g.data)
        return F.concat(xs)


def backward_with_reconstruction(
    layer: ReversibleLayer,
    y,
    dy,
    ctx,
    ledger: Optional[MemoryLedger] = None,
    label: str = "recompute",
) -> GradientBundle:
    """Backpropagate through one layer while rebuilding its input.

    Parameter gradients accumulate into the G functions' leaves; gradients
    for context tensors that require grad (encoder memory) accumulate too.
    """
    if layer.rng_log is None:
        raise ReconstructionError(f"{layer.name}: no rng log; run forward_layer first")
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    dy = dy.data if isinstance(dy, Tensor) else np.asarray(dy)
    if y.shape != dy.shape:
        raise ShapeError(f"{layer.name}: output {y.shape} and gradient {dy.shape} differ")
    _check_width(layer, y)
    n = layer.n
    w = y.shape[-1] // n
    y_leaf = [Tensor(y[..., k * w:(k + 1) * w], requires_grad=True) for k in range(n)]
    dys = [dy[..., k * w:(k + 1) * w] for k in range(n)]
    x_leaf: list[Optional[Tensor]] = [None] * n
    grads: list[Optional[np.ndarray]] = [None] * n

    for k in reversed(range(n)):
        c = y_leaf[k]
        grad_k = dys[k] if k == n - 1 or c.grad is None else dys[k] + c.grad
        if not np.isfinite(grad_k).all():
            raise FloatingPointError(f"{layer.name}: non-finite gradient at split {k + 1}")
        grads[k] = grad_k
        tape = Tape(ledger, label)
        with enable_grad(), tape:
            g_k = layer.eval_g(k, x_leaf[k + 1:], y_leaf[:k], ctx, c.shape)
        if ledger is not None:
            ledger.count_recompute()
        if g_k.requires_grad:
            backward_from(g_k, grad_k)
        x_leaf[k] = Tensor(c.data - g_k.data, requires_grad=True)
        tape.close()

    x = np.concatenate([t.data for t in x_leaf], axis=-1)
    if layer.debug and layer._shadow is not None:
        drift = float(np.max(np.abs(x - layer._shadow))) if x.size else 0.0
        if drift > DRIFT_GUARD:
            raise ReconstructionError(f"{layer.name}: reconstruction drifted by {drift:.3g}")
    dxs = [grads[0]]
    for k in range(1, n):
        xg = x_leaf[k].grad
        dxs.append(grads[k] if xg is None else xg + grads[k])
    return GradientBundle(dx=np.concatenate(dxs, axis=-1), x=x)


@dataclass
class StackState:
    layers: list
    stored_output: Optional[np.ndarray] = None
    stored_input: Optional[Tensor] = None
    ledger: Optional[MemoryLedger] = None
    label: str = "stack"
    _held: list = field(default_factory=list)


def stack_forward(
    layers: Sequence[ReversibleLayer],
    x0: Tensor,
    ctx,
    rng: Optional[RngStream] = None,
    ledger: Optional[MemoryLedger] = None,
    label: str = "stack",
    debug: bool = False,
) -> StackState:
    """Run the stack without a tape, keeping only its input and final output."""
    h = detach(x0)
    with no_grad():
        for layer in layers:
            layer.debug = debug
            h = forward_layer(layer, h, ctx, rng)
    state = StackState(list(layers), stored_output=h.data, stored_input=x0, ledger=ledger, label=label)
    if ledger is not None:
        ledger.retain(h.data.nbytes, f"{label}/output")
        ledger.retain(x0.data.nbytes, f"{label}/input")
        state._held = [(h.data.nbytes, f"{label}/output"), (x0.data.nbytes, f"{label}/input")]
    return state


def stack_backward(state: StackState, d_out, ctx) -> GradientBundle:
    """Apply layer-wise reconstruction top-down, returning the stack-input gradient."""
    if state.stored_output is None:
        raise ReconstructionError(f"{state.label}: no stored output; run stack_forward first")
    y = state.stored_output
    d = d_out.data if isinstance(d_out, Tensor) else np.asarray(d_out)
    for layer in reversed(state.layers):
        bundle = backward_with_reconstruction(layer, y, d, ctx, state.ledger, f"{state.label}/recompute")
        y, d = bundle.x, bundle.dx
    if state.ledger is not None:
        for nbytes, lab in state._held:
            state.ledger.release(nbytes, lab)
    state._held = []
    state.stored_output = None
    return GradientBundle(dx=d, x=y)


def stack_forward_standard(
    layers: Sequence[ReversibleLayer],
    x0: Tensor,
    ctx,
    rng: Optional[RngStream] = None,
    ledger: Optional[MemoryLedger] = None,
    label: str = "standard",
) -> tuple[Tensor, Tape]:
    """Stored-activation forward: every intermediate stays on the returned tape."""
    tape = Tape(ledger, label)
    with enable_grad(), tape:
        h = x0
        for layer in layers:
            h = forward_layer(layer, h, ctx, rng)
    return h, tape

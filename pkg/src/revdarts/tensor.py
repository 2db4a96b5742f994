"""Dense numpy-backed tensors with a reverse-mode tape.

Only what the reversible search needs: explicit upstream gradients,
accumulation into leaves across several backward calls, and detachment.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


def _st():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.tapes = []
        _state.default_dtype = np.float32
    return _state


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(_st().default_dtype)
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def dtype_name(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def get_default_dtype() -> np.dtype:
    return np.dtype(_st().default_dtype)


def set_default_dtype(dtype) -> None:
    _st().default_dtype = resolve_dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _st().default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _st().default_dtype = prev


def is_grad_enabled() -> bool:
    return _st().grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _st()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextlib.contextmanager
def enable_grad() -> Iterator[None]:
    st = _st()
    prev = st.grad_enabled
    st.grad_enabled = True
    try:
        yield
    finally:
        st.grad_enabled = prev


class Node:
    """One primitive application recorded for the backward sweep."""

    __slots__ = ("kind", "inputs", "backward", "out_nbytes", "released")

    def __init__(self, kind: str, inputs: Sequence["Tensor"], backward: Callable, out_nbytes: int):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward = backward
        self.out_nbytes = out_nbytes
        self.released = False

    def release(self) -> None:
        self.inputs = ()
        self.backward = None
        self.released = True


class Tape:
    """Scope that collects nodes recorded while it is active.

    Node outputs recorded inside the scope count as retained activations on
    the attached ledger until the tape is closed.
    """

    def __init__(self, ledger=None, label: str = "tape"):
        self.nodes: list[Node] = []
        self.ledger = ledger
        self.label = label
        self.bytes = 0
        self.closed = False

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self.bytes += node.out_nbytes
        if self.ledger is not None:
            self.ledger.retain(node.out_nbytes, self.label)

    def __enter__(self) -> "Tape":
        _st().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _st()
        if st.tapes and st.tapes[-1] is self:
            st.tapes.pop()
        else:
            st.tapes.remove(self)

    def close(self) -> None:
        """Drop every node's saved state and return its bytes to the ledger."""
        if self.closed:
            return
        for node in self.nodes:
            node.release()
        if self.ledger is not None and self.bytes:
            self.ledger.release(self.bytes, self.label)
        self.nodes = []
        self.closed = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dt = data.dtype
        else:
            dt = resolve_dtype(dtype)
        self.data = np.ascontiguousarray(data, dtype=dt)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return detach(self, requires_grad)

    def backward(self, upstream=None) -> None:
        if upstream is None:
            upstream = np.ones(self.shape, dtype=self.dtype)
        backward_from(self, upstream)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar (routes through the primitive registry) ------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        from . import functional as F
        if np.isscalar(other):
            return F.scale(self, float(other))
        return F.mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=resolve_dtype(dtype)), requires_grad=requires_grad)


def detach(t: Tensor, requires_grad: bool = False) -> Tensor:
    """Share ``t``'s values in a fresh leaf with no tape history."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.requires_grad = bool(requires_grad)
    out._node = None
    out.name = t.name
    return out


def make_result(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a primitive's output, recording a node when a gradient can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    st = _st()
    needs = st.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        node = Node(kind, inputs, backward, data.nbytes)
        out._node = node
        if st.tapes:
            st.tapes[-1].record(node)
    return out


def backward_from(root: Tensor, upstream) -> None:
    """Accumulate ``d root / d leaf . upstream`` into every reachable leaf.

    Leaves keep their gradients across calls; nothing is overwritten.
    """
    up = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream)
    if tuple(up.shape) != tuple(root.shape):
        if up.size == root.data.size and root.data.size == 1:
            up = up.reshape(root.shape)
        else:
            raise ShapeError(f"upstream shape {tuple(up.shape)} does not match root shape {tuple(root.shape)}")
    up = up.astype(root.dtype, copy=False)
    if root._node is None:
        if not root.requires_grad:
            raise GraphError("root is not on a tape: it has no history and does not require grad")
        root.accumulate(up)
        return
    if root._node.released:
        raise GraphError("root's tape has already been closed")

    # iterative post-order DFS for a topological order
    order: list[Node] = []
    seen = set()
    stack = [(root._node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            n = inp._node
            if n is not None and id(n) not in seen:
                if n.released:
                    raise GraphError(f"graph through {n.kind!r} was released before backward")
                stack.append((n, False))

    grads = {id(root._node): up}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.accumulate(ig)
            else:
                key = id(inp._node)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig


class RngStream:
    """Counter-based random stream: draw ``i`` depends only on (seed, i)."""

    __slots__ = ("seed", "position")

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = int(position)

    def generator(self) -> np.random.Generator:
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.position])))
        self.position += 1
        return g

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator().random(shape).astype(dtype, copy=False)

    def normal(self, shape, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.generator().standard_normal(shape) * scale).astype(dtype, copy=False)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator().integers(low, high, size=size)

    def next_seed(self) -> int:
        return int(self.generator().integers(0, 2**63 - 1))

    def child(self, key: int) -> "RngStream":
        """Independent stream keyed by ``key``; does not advance this one."""
        state = np.random.SeedSequence([self.seed, 0x5EED, int(key)]).generate_state(2, np.uint32)
        return RngStream((int(state[0]) << 32) | int(state[1]))

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.position)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, position={self.position})"


def finite_diff_gradient(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")

    def value() -> float:
        with no_grad():
            out = f(x)
        v = float(np.sum(out.data if isinstance(out, Tensor) else out))
        if not np.isfinite(v):
            raise FloatingPointError("finite_diff_gradient: f returned a non-finite value")
        return v

    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape).astype(x.dtype))

"""
Reverse-mode differentiation on a tape
======================================

Every primitive records a node on the active tape; ``backward_from`` walks the
nodes in reverse and accumulates gradients into the leaves.
"""

import numpy as np

from revdarts import functional as F
from revdarts.tensor import Tape, Tensor, backward_from, default_dtype, finite_diff_gradient

with default_dtype("f64"):
    x = Tensor(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
    w = Tensor(np.array([[1.0], [2.0], [-0.5]]), requires_grad=True)

    # a tiny graph: sigmoid(x @ w), summed
    with Tape() as tape:
        out = F.reduce_sum(F.sigmoid(F.matmul(x, w)))
    print("recorded nodes:", len(tape.nodes))
    backward_from(out, np.ones(()))
    print("dL/dw =", w.grad.ravel())

    # central differences agree to ~1e-10
    fd = finite_diff_gradient(lambda t: F.reduce_sum(F.sigmoid(F.matmul(x, t))), w)
    print("finite differences =", fd.data.ravel())
    print("max abs gap:", np.max(np.abs(fd.data - w.grad)))

# float arrays keep their own precision; ask for f32 explicitly
with default_dtype("f32"):
    x32 = Tensor(x.data, requires_grad=True, dtype="f32")
    out = F.reduce_sum(F.sigmoid(F.matmul(x32, Tensor(w.data, dtype="f32"))))
    backward_from(out, np.ones(()))
    print("f32 dL/dx =", x32.grad.ravel(), x32.grad.dtype)

"""
Multi-split reversible layers
=============================

The input is cut into n channel groups. Split k adds a function of the splits
after it (still inputs) and the splits before it (already outputs):

    Y_k = X_k + G_k(X_{i>k}, Y_{i<k})

Running k = n..1 and subtracting recovers X exactly. Backpropagation therefore
keeps only the last layer's output and rebuilds everything else on the way down.
"""

import numpy as np

from revdarts.candidate_ops import AttentionContext
from revdarts.gradcheck import compare_stack, linear_example, random_layer
from revdarts.ledger import MemoryLedger
from revdarts.reversible import forward_layer, inverse_layer, stack_backward, stack_forward
from revdarts.tensor import RngStream, Tensor, default_dtype

# the two-split scalar example worked by hand: G_1 = 2 x_2, G_2 = -y_1, X = (1, 3)
y, dx = linear_example()
print("Y =", y.ravel(), " dX =", dx.ravel())   # (7, -4) and (0, 1)

with default_dtype("f64"):
    rng = RngStream(4)
    ctx = AttentionContext()
    layer = random_layer(3, 8, rng, kinds=["ffn", "dyn_conv_7", "self_attn"])
    x = Tensor(rng.child(1).normal((2, 5, 24), 1.0))
    out = forward_layer(layer, x, ctx)
    back = inverse_layer(layer, out, ctx)
    print("roundtrip error:", np.max(np.abs(back.data - x.data)))

    # a deeper stack: gradients match the store-everything backward
    layers = [random_layer(3, 8, rng.child(10 + i), name=f"l{i}") for i in range(4)]
    res = compare_stack(layers, rng.child(2).normal((2, 5, 24), 1.0), ctx, seed=None)
    print(f"dX rel err {res['dx_err']:.1e}, dtheta rel err {res['dtheta_err']:.1e}")
    print("G evaluations: stored", res["evals_oracle"], "vs reconstruction", res["evals_reversible"])

    # the ledger only ever holds the stored input and the final output
    for depth in (1, 4, 16):
        ledger = MemoryLedger()
        stack = [random_layer(2, 8, rng.child(100 + i)) for i in range(depth)]
        xin = Tensor(rng.child(3).normal((2, 5, 16), 1.0))
        state = stack_forward(stack, xin, ctx, ledger=ledger)
        held = ledger.retained_bytes
        stack_backward(state, np.ones(xin.shape), ctx)
        print(f"depth {depth:2d}: retained {held} bytes, recomputed {ledger.recompute_forward_count} G evals")

"""
The candidate operations
========================

Thirteen encoder operations (fourteen in the decoder, which adds cross
attention). Apart from Zero and Identity, each one is wrapped as
LN(h + dropout(op(h))). A search node mixes all of them with softmax(alpha).
"""

import numpy as np

from revdarts.candidate_ops import DECODER_KINDS, ENCODER_KINDS, AttentionContext, apply_op, make_operation
from revdarts.search import SearchNode, mixed_forward
from revdarts.tensor import RngStream, Tensor

print("encoder:", ", ".join(ENCODER_KINDS))
print("decoder adds:", sorted(set(DECODER_KINDS) - set(ENCODER_KINDS)))

rng = RngStream(0)
h = Tensor(rng.normal((2, 6, 16), 1.0), dtype="f32")  # batch 2, length 6, width 16
memory = Tensor(rng.child(1).normal((2, 4, 16), 1.0), dtype="f32")
ctx = AttentionContext(memory=memory, causal=True)

for i, kind in enumerate(DECODER_KINDS):
    op = make_operation(kind, 16, rng.child(10 + i), memory_width=16)
    y = apply_op(op, h, ctx)
    n_params = sum(p.data.size for p in op.parameters())
    print(f"{kind:12s} params={n_params:5d}  out mean={y.data.mean():+.3f} std={y.data.std():.3f}")

# causal ops never look ahead: changing the last position leaves earlier outputs alone
conv = make_operation("dyn_conv_7", 16, RngStream(3))
h2 = Tensor(h.data.copy())
h2.data[:, -1] += 10.0
a, b = apply_op(conv, h, ctx).data, apply_op(conv, h2, ctx).data
print("causal dyn_conv_7, earlier positions unchanged:", np.allclose(a[:, :-1], b[:, :-1]))

# a mixed node with alpha = (0, ..., 0) averages every candidate
ops = [make_operation(k, 16, rng.child(50 + i)) for i, k in enumerate(ENCODER_KINDS)]
node = SearchNode(Tensor(np.zeros(len(ops)), dtype="f32"), ops, "max", "encoder")
avg = np.mean([apply_op(op, h, AttentionContext()).data for op in ops], axis=0)
print("uniform mixture == plain average:", np.allclose(mixed_forward(node, h, AttentionContext()).data, avg, atol=1e-5))

"""
Differentiable search over the reversible supernet
==================================================

Every G_k in the supernet is a mixed node. Theta steps on the training
loss alternate with alpha steps on the validation loss. At the end each node
keeps its highest-alpha operation.
"""

import tempfile
from pathlib import Path

from revdarts.data import DatasetSpec
from revdarts.model import Dims
from revdarts.search import SearchConfig, discretize, entropy, run_search, search_space_size

dims = Dims(vocab=16, e=8, d=32, m=2, n=3, max_len=16)
data = DatasetSpec(vocab=16, min_len=3, max_len=8,
                   sizes=dict(theta_train=256, alpha_val=256, retrain_train=64, retrain_val=32, test=32))

print("architectures in this space:", search_space_size(13, 14, dims.m, dims.n, dims.s))

out = Path(tempfile.mkdtemp()) / "search"
cfg = SearchConfig(dims=dims, dataset=data, steps=60, checkpoint_interval=30, log_interval=20, batch_size=8)
net, checkpoints = run_search(cfg, out)

print("metrics:")
print((out / "metrics.jsonl").read_text().strip())
print("checkpoints at steps", [c.step for c in checkpoints])
for side, i, k, node in net.search_nodes():
    print(f"  {side}[{i}] split {k}: entropy {entropy(node.alpha):.5f}")

arch = discretize(net)
print("encoder:", arch.encoder, " decoder:", arch.decoder)

# the baseline without alpha: one uniformly sampled operation per node per batch
cfg.strategy = "uniform_sampling"
run_search(cfg, out.parent / "uniform")
print("uniform-sampling run wrote", sorted(p.name for p in (out.parent / "uniform").iterdir()))

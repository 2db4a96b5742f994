"""
Retraining a discrete architecture on the copy task
===================================================

A derived network has one fixed operation per split, so it trains with an
ordinary stored-activation backward. Label-smoothed cross-entropy, Adam with
warmup then inverse-square-root decay.
"""

from revdarts.architecture import Architecture
from revdarts.data import DatasetSpec, generate_dataset
from revdarts.model import Dims
from revdarts.seq2seq import TrainConfig, evaluate, greedy_decode, train_derived

data = generate_dataset(DatasetSpec(vocab=12, min_len=2, max_len=5,
                                    sizes=dict(theta_train=8, alpha_val=8, retrain_train=2000,
                                               retrain_val=64, test=64)))
arch = Architecture(encoder=[["self_attn", "ffn"]], decoder=[["self_attn", "ffn", "glu"]],
                    dims=dict(d=32, e=8, m=2, n=3, s=1))
dims = Dims(vocab=12, e=8, d=32, m=2, n=3, max_len=16)

model, metrics = train_derived(arch, data, TrainConfig(steps=2000, batch_size=32, lr=3e-3, log_interval=500, dropout=0.0),
                               dims=dims)
for rec in metrics:
    print(rec)

print("test:", evaluate(model, data, "test"))
batch = data.make_batch(data.shards["test"][:3])
for src, hyp in zip(batch.src, greedy_decode(model, batch.src)):
    print("source", [int(t) for t in src if t > 3], "->", hyp)

"""Retraining and evaluation of discretised architectures on synthetic tasks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .architecture import Architecture
from .candidate_ops import make_operation
from .data import SyntheticDataset
from .model import BOS, EOS, PAD, Dims, FixedOp, Seq2SeqNet
from .optim import Adam, inverse_sqrt_schedule
from .reversible import ReversibleLayer
from .tensor import RngStream, resolve_dtype

log = logging.getLogger(__name__)


class DerivedNetwork(Seq2SeqNet):
    """The searched stack with every mixed node replaced by its chosen operation."""

    def __init__(self, arch: Architecture, dims: Dims, pooling: str = "max", seed: int = 0, dtype=None):
        dt = resolve_dtype(dtype)
        rng = RngStream(seed)
        self.arch = arch
        self.pooling = pooling
        s = dims.s
        encoder, decoder = [], []
        for idx in range(dims.encoder_layers):
            row = arch.encoder[idx % s]
            gs = [FixedOp(make_operation(kind, dims.d_enc, rng.child(1000 + 16 * idx + k), dt), pooling)
                  for k, kind in enumerate(row)]
            encoder.append(ReversibleLayer(gs, name=f"encoder.{idx}"))
            row = arch.decoder[idx % s]
            gs = [FixedOp(make_operation(kind, dims.d_dec, rng.child(2000 + 16 * idx + k), dt, memory_width=dims.d), pooling)
                  for k, kind in enumerate(row)]
            gs.append(FixedOp(make_operation("cross_attn", dims.d_dec, rng.child(3000 + idx), dt, memory_width=dims.d), pooling))
            decoder.append(ReversibleLayer(gs, name=f"decoder.{idx}"))
        super().__init__(dims, encoder, decoder, rng.child(99), dt)


def dims_for(arch: Architecture, base: Optional[Dims] = None) -> Dims:
    base = base or Dims()
    fields = base.to_dict()
    fields.update({k: v for k, v in arch.dims.items() if k in fields})
    return Dims(**fields)


def build_derived(arch: Architecture, dims: Optional[Dims] = None, pooling: Optional[str] = None,
                  seed: int = 0, dtype=None) -> DerivedNetwork:
    dims = dims or dims_for(arch)
    pooling = pooling or arch.provenance.get("pooling") or "max"
    return DerivedNetwork(arch, dims, pooling, seed, dtype)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.04
    dropout: float = 0.1
    log_interval: int = 100
    seed: int = 0
    dtype: str = "f32"
    shard: str = "retrain_train"


def teacher_forced_accuracy(model: Seq2SeqNet, batch) -> float:
    memory = model.encode(batch.src)
    pred = model.decode_logits(memory, batch.src, batch.tgt_in).data.argmax(axis=-1)
    mask = batch.tgt_out != PAD
    return float(((pred == batch.tgt_out) & mask).sum() / mask.sum())


def train_derived(arch: Architecture, dataset: SyntheticDataset, config: TrainConfig,
                  dims: Optional[Dims] = None, pooling: Optional[str] = None,
                  model: Optional[Seq2SeqNet] = None, metrics_writer=None) -> tuple[Seq2SeqNet, list[dict]]:
    """Train with ordinary stored-activation backward and label-smoothed cross-entropy."""
    if model is None:
        dims = dims or dims_for(arch, Dims(vocab=dataset.spec.vocab))
        model = build_derived(arch, dims, pooling, config.seed, config.dtype)
    params = model.parameters()
    opt = Adam(params, betas=(0.9, 0.98),
               schedule=inverse_sqrt_schedule(config.lr, max(1, round(config.warmup_frac * max(config.steps, 1)))))
    root = RngStream(config.seed)
    batch_rng, drop_rng = root.child(5), root.child(6)
    metrics: list[dict] = []
    good = [p.data.copy() for p in params]
    for step in range(1, config.steps + 1):
        batch = dataset.sample_batch(config.shard, config.batch_size, batch_rng)
        model.zero_grad()
        try:
            loss = model.loss_and_grad(batch, drop_rng, config.dropout, reversible=False)
        except FloatingPointError:
            loss = float("nan")
        if not math.isfinite(loss):
            for p, g in zip(params, good):
                p.data[...] = g
            rec = {"step": step, "train_loss": loss, "aborted": True}
            metrics.append(rec)
            if metrics_writer is not None:
                metrics_writer.write(rec)
            log.warning("non-finite loss at step %d; restored last good weights", step)
            break
        opt.step()
        if step % config.log_interval == 0 or step == config.steps:
            rec = {"step": step, "train_loss": loss, "token_accuracy": teacher_forced_accuracy(model, batch)}
            metrics.append(rec)
            if metrics_writer is not None:
                metrics_writer.write(rec)
            good = [p.data.copy() for p in params]
    model.zero_grad()
    return model, metrics


def max_output_length(src_len: int) -> int:
    return int(math.floor(1.2 * src_len + 10))


def greedy_decode(model: Seq2SeqNet, src: np.ndarray, max_len: Optional[int] = None) -> list[list[int]]:
    """Greedy decoding; each output runs up to and including its first end marker."""
    lengths = (src != PAD).sum(axis=1)
    limit = max_len or max_output_length(int(lengths.max()))
    limit = min(limit, model.dims.max_len)
    memory = model.encode(src)
    b = src.shape[0]
    ys = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(limit):
        logits = model.decode_logits(memory, src, ys).data[:, -1]
        nxt = logits.argmax(axis=-1)
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    outs = []
    for i in range(b):
        row = ys[i, 1:].tolist()
        if EOS in row:
            row = row[:row.index(EOS) + 1]
        outs.append(row[:max_output_length(int(lengths[i]))])
    return outs


def evaluate(model: Seq2SeqNet, dataset: SyntheticDataset, shard: str = "test", batch_size: int = 64) -> dict:
    """Free-running token/sequence accuracy plus teacher-forced mean loss."""
    data = dataset.shards[shard]
    if not data:
        raise ValueError(f"shard {shard!r} is empty")
    correct = total = exact = 0
    loss_sum = 0.0
    n_batches = 0
    for batch in dataset.batches(shard, batch_size):
        outs = greedy_decode(model, batch.src)
        for out, ref_row in zip(outs, batch.tgt_out):
            ref = [int(t) for t in ref_row if t != PAD]
            correct += sum(1 for i, t in enumerate(ref) if i < len(out) and out[i] == t)
            total += len(ref)
            exact += int(out == ref)
        loss_sum += model.loss_value(batch) * batch.size
        n_batches += batch.size
    return {
        "token_accuracy": correct / total,
        "sequence_accuracy": exact / len(data),
        "mean_loss": loss_sum / n_batches,
    }


def select_checkpoint(checkpoints, dataset: SyntheticDataset, config: TrainConfig, dims: Dims,
                      pooling: str = "max") -> tuple[object, Architecture, float]:
    """Short fine-tune of each checkpoint's discretised architecture; lowest validation loss wins."""
    from .search import discretize_alphas

    best = None
    for ckpt in checkpoints:
        arch = discretize_alphas(ckpt.alpha, {"step": ckpt.step})
        model, _ = train_derived(arch, dataset, config, dims=dims, pooling=pooling)
        val = sum(model.loss_value(b) * b.size for b in dataset.batches("retrain_val", 64)) / len(dataset.shards["retrain_val"])
        if best is None or val < best[2]:
            best = (ckpt, arch, val)
    return best

"""Encoder-decoder network over reversible stacks, trainable two ways.

``loss_and_grad(..., reversible=True)`` backpropagates by reconstruction,
storing only each stack's input and final output; ``reversible=False``
keeps every activation on one tape (ordinary backward, and the oracle the
reversible path is checked against).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .candidate_ops import AttentionContext, Operation, apply_op
from .ledger import MemoryLedger
from .reversible import ReversibleLayer, forward_layer, stack_backward, stack_forward
from .tensor import RngStream, Tape, Tensor, backward_from, enable_grad, no_grad, resolve_dtype

PAD, BOS, EOS, UNK = 0, 1, 2, 3
LABEL_SMOOTHING = 0.1


@dataclass
class Dims:
    vocab: int = 64
    e: int = 32
    d: int = 96
    m: int = 2
    n: int = 3
    s: int = 1
    blocks: int = 1
    max_len: int = 64

    def __post_init__(self):
        if self.d % self.m:
            raise ValueError(f"dims.d={self.d} is not divisible by encoder splits m={self.m}")
        if self.d % (self.n + 1):
            raise ValueError(f"dims.d={self.d} is not divisible by decoder splits n+1={self.n + 1}")
        if self.m < 2 or self.n < 1:
            raise ValueError("need m >= 2 encoder splits and n >= 1 searched decoder splits")
        if self.vocab < 4:
            raise ValueError("dims.vocab must reserve pad/bos/eos/unk (>= 4)")

    @property
    def d_enc(self) -> int:
        return self.d // self.m

    @property
    def d_dec(self) -> int:
        return self.d // (self.n + 1)

    @property
    def encoder_layers(self) -> int:
        return self.s * self.blocks

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoid_table(length: int, d: int) -> np.ndarray:
    """Initial values for the learned position tables."""
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


def pool_inputs(pooling: str, parts: list) -> Tensor:
    """Elementwise max or mean across the other splits' tensors."""
    if not parts:
        raise ValueError("pooling needs at least one input")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.shape != ref:
            raise ValueError(f"pooling part {i} has shape {p.shape}, expected {ref}")
    if len(parts) == 1:
        return parts[0]
    stacked = F.stack(parts)
    if pooling == "max":
        return F.reduce_max(stacked, axis=0)
    if pooling == "avg":
        return F.reduce_mean(stacked, axis=0)
    raise ValueError(f"pooling must be 'max' or 'avg', got {pooling!r}")


class FixedOp:
    """G_k with a single operation after pooling."""

    def __init__(self, op: Operation, pooling: str):
        self.op = op
        self.pooling = pooling

    @property
    def kind(self) -> str:
        return self.op.kind

    def __call__(self, later_x, earlier_y, ctx, rng):
        return apply_op(self.op, pool_inputs(self.pooling, later_x + earlier_y), ctx, rng)

    def parameters(self) -> list[Tensor]:
        return self.op.parameters()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.op.named_parameters(f"{prefix}{self.op.kind}.")


class FactorizedEmbedding:
    """Vocabulary table as (|V| x e)(e x d), tied to the output projection."""

    def __init__(self, vocab: int, e: int, d: int, rng: RngStream, dtype=None, tied_output: bool = True):
        if e >= d:
            raise ValueError(f"factorised embedding needs e < d, got e={e}, d={d}")
        dt = resolve_dtype(dtype)
        self.vocab_to_e = Tensor(rng.normal((vocab, e), 1.0 / math.sqrt(e)), dtype=dt, requires_grad=True, name="vocab_to_e")
        self.e_to_d = Tensor(rng.normal((e, d), 1.0 / math.sqrt(e)), dtype=dt, requires_grad=True, name="e_to_d")
        self.tied_output = tied_output
        self.out_bias = Tensor(np.zeros(vocab), dtype=dt, requires_grad=True, name="out_bias")

    def param_count(self) -> int:
        return self.vocab_to_e.data.size + self.e_to_d.data.size

    def embed(self, ids: np.ndarray) -> Tensor:
        return F.matmul(F.embedding(self.vocab_to_e, ids), self.e_to_d)

    def logits(self, h: Tensor) -> Tensor:
        z = F.matmul(h, F.transpose(self.e_to_d, (1, 0)))
        return F.add(F.matmul(z, F.transpose(self.vocab_to_e, (1, 0))), self.out_bias)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("embed.vocab_to_e", self.vocab_to_e), ("embed.e_to_d", self.e_to_d), ("embed.out_bias", self.out_bias)]


class Seq2SeqNet:
    def __init__(self, dims: Dims, encoder: list[ReversibleLayer], decoder: list[ReversibleLayer],
                 rng: RngStream, dtype=None):
        self.dims = dims
        self.dtype = resolve_dtype(dtype)
        self.encoder = encoder
        self.decoder = decoder
        self.embedding = FactorizedEmbedding(dims.vocab, dims.e, dims.d, rng.child(0), self.dtype)
        self.pos_enc = Tensor(sinusoid_table(dims.max_len, dims.d), dtype=self.dtype, requires_grad=True)
        self.pos_dec = Tensor(sinusoid_table(dims.max_len, dims.d), dtype=self.dtype, requires_grad=True)
        self.ledger = MemoryLedger()
        self.last_forward_snapshot: dict = {}

    # -- parameters ---------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.embedding.named_parameters())
        out += [("pos_enc", self.pos_enc), ("pos_dec", self.pos_dec)]
        for side, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                for k, g in enumerate(layer.g):
                    out += g.named_parameters(f"{side}.{i}.split{k + 1}.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.all_parameters():
            p.grad = None

    def all_parameters(self) -> list[Tensor]:
        return self.parameters()

    def reset_counters(self) -> None:
        for layer in self.encoder + self.decoder:
            layer.reset_counters()

    def g_evals(self) -> int:
        return sum(sum(layer.g_evals) for layer in self.encoder + self.decoder)

    # -- building blocks -------------------------------------------------------------
    def _embed(self, ids: np.ndarray, pos: Tensor) -> Tensor:
        l = ids.shape[1]
        if l > self.dims.max_len:
            raise ValueError(f"sequence length {l} exceeds dims.max_len={self.dims.max_len}")
        return F.add(self.embedding.embed(ids), F.slice_axis(pos, 0, l, axis=0))

    def _contexts(self, src, tgt_in, dropout: float, memory: Optional[Tensor] = None):
        src_mask = src == PAD
        tgt_mask = tgt_in == PAD
        enc_ctx = AttentionContext(causal=False, key_mask=src_mask, dropout=dropout)
        dec_ctx = AttentionContext(memory=memory, causal=True, key_mask=tgt_mask, memory_mask=src_mask, dropout=dropout)
        return enc_ctx, dec_ctx

    def _loss(self, h: Tensor, tgt_out: np.ndarray) -> Tensor:
        return F.cross_entropy_ls(self.embedding.logits(h), tgt_out, tgt_out != PAD, LABEL_SMOOTHING)

    # -- training passes ----------------------------------------------------------------
    def loss_and_grad(self, batch, rng: Optional[RngStream] = None, dropout: float = 0.0,
                      reversible: bool = True) -> float:
        """One forward/backward on ``batch``; gradients accumulate into parameters."""
        if reversible:
            return self._loss_reversible(batch, rng, dropout)
        return self._loss_standard(batch, rng, dropout)

    def _loss_reversible(self, batch, rng, dropout) -> float:
        ledger = self.ledger
        emb_tape = Tape(ledger, "embedding")
        with enable_grad(), emb_tape:
            x_enc = self._embed(batch.src, self.pos_enc)
            x_dec = self._embed(batch.tgt_in, self.pos_dec)
        enc_ctx, _ = self._contexts(batch.src, batch.tgt_in, dropout)
        enc_state = stack_forward(self.encoder, x_enc, enc_ctx, rng, ledger, "encoder")
        memory = Tensor(enc_state.stored_output, requires_grad=True, name="memory")
        _, dec_ctx = self._contexts(batch.src, batch.tgt_in, dropout, memory)
        dec_state = stack_forward(self.decoder, x_dec, dec_ctx, rng, ledger, "decoder")
        head_in = Tensor(dec_state.stored_output, requires_grad=True)
        head_tape = Tape(ledger, "head")
        with enable_grad(), head_tape:
            loss = self._loss(head_in, batch.tgt_out)
        self.last_forward_snapshot = ledger.snapshot()
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            head_tape.close()
            emb_tape.close()
            ledger.reset()
            return loss_value
        backward_from(loss, np.ones((), dtype=loss.dtype))
        head_tape.close()
        dec_grad = stack_backward(dec_state, head_in.grad, dec_ctx)
        backward_from(x_dec, dec_grad.dx)
        d_mem = memory.grad if memory.grad is not None else np.zeros_like(memory.data)
        enc_grad = stack_backward(enc_state, d_mem, enc_ctx)
        backward_from(x_enc, enc_grad.dx)
        emb_tape.close()
        return loss_value

    def _loss_standard(self, batch, rng, dropout) -> float:
        ledger = self.ledger
        tape = Tape(ledger, "standard")
        with enable_grad(), tape:
            enc_ctx, _ = self._contexts(batch.src, batch.tgt_in, dropout)
            h = self._embed(batch.src, self.pos_enc)
            for layer in self.encoder:
                h = forward_layer(layer, h, enc_ctx, rng)
            _, dec_ctx = self._contexts(batch.src, batch.tgt_in, dropout, h)
            z = self._embed(batch.tgt_in, self.pos_dec)
            for layer in self.decoder:
                z = forward_layer(layer, z, dec_ctx, rng)
            loss = self._loss(z, batch.tgt_out)
        self.last_forward_snapshot = ledger.snapshot()
        loss_value = float(loss.data)
        if math.isfinite(loss_value):
            backward_from(loss, np.ones((), dtype=loss.dtype))
        tape.close()
        return loss_value

    # -- inference -------------------------------------------------------------------------
    def encode(self, src: np.ndarray) -> Tensor:
        with no_grad():
            enc_ctx, _ = self._contexts(src, src, 0.0)
            h = self._embed(src, self.pos_enc)
            for layer in self.encoder:
                h = forward_layer(layer, h, enc_ctx, None)
        return h

    def decode_logits(self, memory: Tensor, src: np.ndarray, tgt_in: np.ndarray) -> Tensor:
        with no_grad():
            _, dec_ctx = self._contexts(src, tgt_in, 0.0, memory)
            z = self._embed(tgt_in, self.pos_dec)
            for layer in self.decoder:
                z = forward_layer(layer, z, dec_ctx, None)
            return self.embedding.logits(z)

    def loss_value(self, batch) -> float:
        with no_grad():
            memory = self.encode(batch.src)
            logits = self.decode_logits(memory, batch.src, batch.tgt_in)
            return float(F.cross_entropy_ls(logits, batch.tgt_out, batch.tgt_out != PAD, LABEL_SMOOTHING).data)

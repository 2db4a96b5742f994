"""Differentiable search over reversible encoder/decoder stacks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .architecture import Architecture
from .candidate_ops import Operation, apply_op, build_op_set, legal_kinds, make_operation
from .checkpoint import MetricsWriter, save_checkpoint, write_json
from .data import DatasetSpec, generate_dataset
from .model import Dims, FixedOp, Seq2SeqNet, pool_inputs
from .optim import Adam, inverse_sqrt_schedule
from .reversible import ReversibleLayer
from .tensor import RngStream, Tensor, resolve_dtype

log = logging.getLogger(__name__)

ALPHA_INIT_STD = 1e-3


class SearchNode:
    """Mixed-operation node: softmax(alpha)-weighted sum over candidate ops of pooled inputs."""

    def __init__(self, alpha: Tensor, ops: Sequence[Operation], pooling: str = "max", side: Optional[str] = None):
        if alpha.shape != (len(ops),):
            raise ValueError(f"alpha has shape {alpha.shape} for {len(ops)} operations")
        if side is not None and tuple(o.kind for o in ops) != legal_kinds(side):
            raise ValueError(f"operations do not match the {side} candidate set")
        self.alpha = alpha
        self.ops = list(ops)
        self.pooling = pooling
        self.side = side
        self.active: Optional[int] = None

    @property
    def kinds(self) -> list[str]:
        return [o.kind for o in self.ops]

    def __call__(self, later_x, earlier_y, ctx, rng):
        return g_k_forward(self, later_x, earlier_y, ctx, rng)

    def parameters(self) -> list[Tensor]:
        return [p for o in self.ops for p in o.parameters()] + [self.alpha]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [item for o in self.ops for item in o.named_parameters(f"{prefix}{o.kind}.")]


def mixed_forward(node: SearchNode, h: Tensor, ctx, rng: Optional[RngStream] = None) -> Tensor:
    if node.active is not None:
        return apply_op(node.ops[node.active], h, ctx, rng)
    weights = F.softmax(node.alpha)
    return F.weighted_sum(weights, [apply_op(op, h, ctx, rng) for op in node.ops])


def g_k_forward(node: SearchNode, later_x: list, earlier_y: list, ctx, rng: Optional[RngStream] = None) -> Tensor:
    return mixed_forward(node, pool_inputs(node.pooling, list(later_x) + list(earlier_y)), ctx, rng)


class SuperNetwork(Seq2SeqNet):
    """Encoder of m-split layers and decoder of (n+1)-split layers whose last split is cross-attention.

    Layers at the same position inside repeated ``s``-layer blocks share alpha;
    each layer keeps its own operation weights.
    """

    def __init__(self, dims: Dims, pooling: str = "max", seed: int = 0, dtype=None,
                 alpha_init_std: float = ALPHA_INIT_STD):
        if pooling not in ("max", "avg"):
            raise ValueError(f"pooling must be 'max' or 'avg', got {pooling!r}")
        dt = resolve_dtype(dtype)
        rng = RngStream(seed)
        self.pooling = pooling
        arng = rng.child(10)
        enc_n, dec_n = len(legal_kinds("encoder")), len(legal_kinds("decoder"))
        self.enc_alpha = [[Tensor(arng.normal((enc_n,), alpha_init_std), dtype=dt, requires_grad=True,
                                  name=f"alpha.encoder.{j}.{k}") for k in range(dims.m)] for j in range(dims.s)]
        self.dec_alpha = [[Tensor(arng.normal((dec_n,), alpha_init_std), dtype=dt, requires_grad=True,
                                  name=f"alpha.decoder.{j}.{k}") for k in range(dims.n)] for j in range(dims.s)]
        encoder, decoder = [], []
        for b in range(dims.blocks):
            for j in range(dims.s):
                idx = b * dims.s + j
                nodes = [SearchNode(self.enc_alpha[j][k],
                                    build_op_set("encoder", dims.d_enc, rng.child(1000 + 16 * idx + k), dt),
                                    pooling, "encoder") for k in range(dims.m)]
                encoder.append(ReversibleLayer(nodes, name=f"encoder.{idx}"))
                nodes = [SearchNode(self.dec_alpha[j][k],
                                    build_op_set("decoder", dims.d_dec, rng.child(2000 + 16 * idx + k), dt,
                                                 memory_width=dims.d),
                                    pooling, "decoder") for k in range(dims.n)]
                cross = make_operation("cross_attn", dims.d_dec, rng.child(3000 + idx), dt, memory_width=dims.d)
                decoder.append(ReversibleLayer(nodes + [FixedOp(cross, pooling)], name=f"decoder.{idx}"))
        super().__init__(dims, encoder, decoder, rng.child(99), dt)

    def alpha_parameters(self) -> list[Tensor]:
        return [a for grid in (self.enc_alpha, self.dec_alpha) for row in grid for a in row]

    def theta_parameters(self) -> list[Tensor]:
        return self.parameters()

    def all_parameters(self) -> list[Tensor]:
        return self.theta_parameters() + self.alpha_parameters()

    def search_nodes(self) -> list[tuple[str, int, int, SearchNode]]:
        out = []
        for side, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                for k, g in enumerate(layer.g):
                    if isinstance(g, SearchNode):
                        out.append((side, i, k, g))
        return out

    def alpha_document(self) -> dict:
        return {
            "version": 1,
            "pooling": self.pooling,
            "dims": self.dims.to_dict(),
            "encoder": [[[float(v) for v in a.data] for a in row] for row in self.enc_alpha],
            "decoder": [[[float(v) for v in a.data] for a in row] for row in self.dec_alpha],
        }

    def load_alpha_document(self, doc: dict) -> None:
        for grid, rows in ((self.enc_alpha, doc["encoder"]), (self.dec_alpha, doc["decoder"])):
            for row, vals in zip(grid, rows):
                for a, v in zip(row, vals):
                    a.data[...] = np.asarray(v, dtype=a.dtype)

    def set_path(self, path: Optional[dict]) -> None:
        """Pin every search node to one operation (``None`` restores the mixture)."""
        for side, i, k, node in self.search_nodes():
            node.active = None if path is None else node.kinds.index(path[(side, i, k)])


def discretize_alphas(doc: dict, provenance: Optional[dict] = None) -> Architecture:
    """Per node, keep the operation with the largest alpha (lowest tag index on ties)."""
    def pick(vec, side):
        return legal_kinds(side)[int(np.argmax(np.asarray(vec)))]

    dims = doc["dims"]
    prov = {"pooling": doc.get("pooling")}
    prov.update(provenance or {})
    return Architecture(
        encoder=[[pick(v, "encoder") for v in row] for row in doc["encoder"]],
        decoder=[[pick(v, "decoder") for v in row] for row in doc["decoder"]],
        dims={k: int(dims[k]) for k in dims},
        provenance=prov,
    )


def discretize(net: SuperNetwork, provenance: Optional[dict] = None) -> Architecture:
    return discretize_alphas(net.alpha_document(), provenance)


def search_space_size(op_count_enc: int, op_count_dec: int, m: int, n: int, s: int) -> int:
    """Exact count of discrete architectures: enc^(s*m) * dec^(s*n)."""
    for name, v in (("op_count_enc", op_count_enc), ("op_count_dec", op_count_dec), ("m", m), ("n", n), ("s", s)):
        if int(v) <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return int(op_count_enc) ** (s * m) * int(op_count_dec) ** (s * n)


def uniform_search_space_size(op_count: int, m: int, n: int, s: int) -> int:
    """|O|^(s(m+n)) with a single candidate-set size for both sides."""
    return search_space_size(op_count, op_count, m, n, s)


def sample_uniform_path(net: SuperNetwork, rng: RngStream) -> dict:
    """Independently draw one legal operation per search node; the fixed cross-attention split is never drawn."""
    g = rng.generator()
    return {(side, i, k): node.kinds[int(g.integers(0, len(node.ops)))]
            for side, i, k, node in net.search_nodes()}


def path_from_architecture(net: SuperNetwork, arch: Architecture) -> dict:
    s = net.dims.s
    path = {}
    for side, i, k, _ in net.search_nodes():
        grid = arch.encoder if side == "encoder" else arch.decoder
        path[(side, i, k)] = grid[i % s][k]
    return path


def entropy(alpha: Tensor) -> float:
    z = alpha.data.astype(np.float64)
    p = np.exp(z - z.max())
    p /= p.sum()
    return float(-(p * np.log(p)).sum())


class BilevelOptimizer:
    """Two Adams: theta on the training loss with warmup/inverse-sqrt decay, alpha on the validation loss."""

    def __init__(self, theta: Sequence[Tensor], alpha: Sequence[Tensor], budget: int,
                 theta_peak_lr: float = 5e-4, warmup_frac: float = 0.04,
                 alpha_lr: float = 3e-4, alpha_weight_decay: float = 1e-3, betas=(0.9, 0.98)):
        ids_t = {id(p) for p in theta}
        ids_a = {id(p) for p in alpha}
        if ids_t & ids_a:
            raise ValueError("theta and alpha parameter sets overlap")
        warmup = max(1, round(warmup_frac * max(budget, 1)))
        self.theta_opt = Adam(theta, betas=betas, schedule=inverse_sqrt_schedule(theta_peak_lr, warmup))
        self.alpha_opt = Adam(alpha, lr=alpha_lr, betas=betas, weight_decay=alpha_weight_decay)
        self.rejected_steps = 0


def bilevel_step(net: SuperNetwork, train_batch, val_batch, opt: BilevelOptimizer,
                 rng: Optional[RngStream] = None, dropout: float = 0.1, update_alpha: bool = True) -> dict:
    """Theta update on the training batch, then alpha update on the validation batch (first order).

    Both backward passes reconstruct layer inputs instead of storing them. A
    non-finite loss rejects the whole step and restores theta.
    """
    net.ledger.reset()
    net.zero_grad()
    theta_params = opt.theta_opt.params
    backup = [p.data.copy() for p in theta_params]
    opt_state = opt.theta_opt.state()

    def reject(train_loss, val_loss):
        for p, b in zip(theta_params, backup):
            p.data[...] = b
        opt.theta_opt.load_state(opt_state)
        net.zero_grad()
        net.ledger.reset()
        opt.rejected_steps += 1
        return {"train_loss": train_loss, "val_loss": val_loss, "retained_bytes": 0,
                "recompute_count": 0, "rejected": True}

    try:
        train_loss = net.loss_and_grad(train_batch, rng, dropout, reversible=True)
    except FloatingPointError:
        return reject(float("nan"), float("nan"))
    if not math.isfinite(train_loss):
        return reject(train_loss, float("nan"))
    retained = net.last_forward_snapshot["retained_bytes"]
    opt.theta_opt.step()
    net.zero_grad()

    try:
        val_loss = net.loss_and_grad(val_batch, rng, dropout, reversible=True)
    except FloatingPointError:
        return reject(train_loss, float("nan"))
    if not math.isfinite(val_loss):
        return reject(train_loss, val_loss)
    if update_alpha:
        opt.alpha_opt.step()
    net.zero_grad()
    recompute = net.ledger.recompute_forward_count
    net.ledger.assert_drained()
    return {"train_loss": train_loss, "val_loss": val_loss, "retained_bytes": retained,
            "recompute_count": recompute, "rejected": False}


@dataclass
class SearchConfig:
    dims: Dims = field(default_factory=Dims)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    pooling: str = "max"
    seed: int = 0
    steps: int = 2000
    checkpoint_interval: int = 500
    log_interval: int = 10
    batch_size: int = 16
    dropout: float = 0.1
    dtype: str = "f32"
    strategy: str = "darts"
    theta_lr: float = 5e-4
    warmup_frac: float = 0.04
    alpha_lr: float = 3e-4
    alpha_weight_decay: float = 1e-3
    alpha_init_std: float = ALPHA_INIT_STD

    def validate(self) -> None:
        if self.strategy not in ("darts", "uniform_sampling"):
            raise ValueError(f"search_strategy must be 'darts' or 'uniform_sampling', got {self.strategy!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.checkpoint_interval <= 0 or self.log_interval <= 0:
            raise ValueError("checkpoint_interval and log_interval must be positive")
        if self.dims.vocab != self.dataset.vocab:
            raise ValueError(f"dims.vocab={self.dims.vocab} differs from dataset.vocab={self.dataset.vocab}")
        if self.dataset.max_len + 1 > self.dims.max_len:
            raise ValueError("dims.max_len must exceed dataset.max_len (room for the end marker)")
        self.dataset.validate()


@dataclass
class Checkpoint:
    step: int
    metrics: dict
    alpha: dict
    theta: dict
    path: Optional[Path] = None


def _snapshot(net: SuperNetwork, step: int, metrics: dict, out_dir: Optional[Path], provenance: dict) -> Checkpoint:
    alpha = net.alpha_document()
    alpha["step"] = step
    alpha["provenance"] = provenance
    theta = {name: p.data.copy() for name, p in net.named_parameters()}
    path = None
    if out_dir is not None:
        path = save_checkpoint(out_dir / "checkpoints" / f"step_{step:06d}", net.named_parameters(), alpha)
    return Checkpoint(step, dict(metrics), alpha, theta, path)


def run_search(config: SearchConfig, out_dir=None, dataset=None) -> tuple[SuperNetwork, list[Checkpoint]]:
    """Alternate theta/alpha updates for ``config.steps`` steps, checkpointing every interval."""
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dataset = dataset or generate_dataset(config.dataset)
    net = SuperNetwork(config.dims, config.pooling, config.seed, config.dtype, config.alpha_init_std)
    opt = BilevelOptimizer(net.theta_parameters(), net.alpha_parameters(), config.steps,
                           theta_peak_lr=config.theta_lr, warmup_frac=config.warmup_frac,
                           alpha_lr=config.alpha_lr, alpha_weight_decay=config.alpha_weight_decay)
    root = RngStream(config.seed)
    batch_rng, drop_rng, path_rng = root.child(3), root.child(2), root.child(4)
    provenance = {"seed": config.seed, "pooling": config.pooling, "strategy": config.strategy}
    writer = MetricsWriter(out / "metrics.jsonl") if out is not None else None
    uniform = config.strategy == "uniform_sampling"

    metrics = {"step": 0, "train_loss": None, "val_loss": None, "retained_bytes": 0, "recompute_count": 0}
    checkpoints = [_snapshot(net, 0, metrics, out, {**provenance, "steps": 0})]
    try:
        for step in range(1, config.steps + 1):
            train_batch = dataset.sample_batch("theta_train", config.batch_size, batch_rng)
            val_batch = dataset.sample_batch("alpha_val", config.batch_size, batch_rng)
            if uniform:
                net.set_path(sample_uniform_path(net, path_rng))
            res = bilevel_step(net, train_batch, val_batch, opt, drop_rng, config.dropout, update_alpha=not uniform)
            metrics = {"step": step, "train_loss": res["train_loss"], "val_loss": res["val_loss"],
                       "retained_bytes": res["retained_bytes"], "recompute_count": res["recompute_count"]}
            if res["rejected"]:
                metrics["rejected"] = True
            if writer is not None and (step % config.log_interval == 0 or res["rejected"]):
                writer.write(metrics)
            if step % config.checkpoint_interval == 0:
                checkpoints.append(_snapshot(net, step, metrics, out, {**provenance, "steps": step}))
                log.info("step %d train %.4f val %.4f", step, res["train_loss"], res["val_loss"])
    finally:
        if uniform:
            net.set_path(None)
        if writer is not None:
            writer.close()
    if out is not None:
        doc = net.alpha_document()
        doc["step"] = config.steps
        doc["provenance"] = {**provenance, "steps": config.steps}
        write_json(out / "alpha.json", doc)
    return net, checkpoints

"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The lines are also collected and repeated in the terminal summary (see conftest).
Criterion 6 runs a full-size search and retrain and takes several minutes.
"""

import time
from decimal import Decimal, getcontext

import numpy as np
import pytest
from scipy.stats import chisquare

from revdarts import functional as F
from revdarts.architecture import Architecture
from revdarts.candidate_ops import DECODER_KINDS, ENCODER_KINDS, AttentionContext, apply_op, build_op_set
from revdarts.data import DatasetSpec, generate_dataset
from revdarts.gradcheck import compare_stack, fd_agreement, linear_example, random_layer
from revdarts.model import Dims
from revdarts.profiler import ProfileConfig, profile_memory
from revdarts.reversible import forward_layer, inverse_layer
from revdarts.search import (
    SearchConfig,
    SearchNode,
    SuperNetwork,
    discretize_alphas,
    entropy,
    mixed_forward,
    run_search,
    sample_uniform_path,
    search_space_size,
)
from revdarts.seq2seq import TrainConfig, evaluate, train_derived
from revdarts.tensor import RngStream, Tensor, default_dtype

RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 ----------------------------------------------------------------------------------------

def test_criterion_1_roundtrip():
    start = time.perf_counter()
    worst = {"f64": 0.0, "f32": 0.0}
    for dtype in ("f64", "f32"):
        with default_dtype(dtype):
            for n in (2, 3, 4, 5):
                for i in range(20):
                    r = RngStream(1000 * n + i)
                    layer = random_layer(n, 8, r, kinds=DECODER_KINDS, dtype=dtype, memory_width=16)
                    ctx = AttentionContext(memory=Tensor(r.child(90).normal((2, 3, 16), 1.0), dtype=dtype))
                    x = Tensor(r.child(91).normal((2, 5, 8 * n), 1.0), dtype=dtype)
                    back = inverse_layer(layer, forward_layer(layer, x, ctx, r.child(92)), ctx)
                    err = float(np.max(np.abs(back.data.astype(np.float64) - x.data.astype(np.float64))))
                    worst[dtype] = max(worst[dtype], err)
    elapsed = time.perf_counter() - start
    ok = worst["f64"] <= 1e-10 and worst["f32"] <= 1e-4 and elapsed < 60
    report(1, "reversibility roundtrip", ok,
           f"max err f64={worst['f64']:.1e} (<=1e-10) f32={worst['f32']:.1e} (<=1e-4), {elapsed:.1f}s (<60s)")


# -- 2 ----------------------------------------------------------------------------------------

def test_criterion_2_gradient_equivalence():
    y, dx = linear_example()
    linear_ok = np.array_equal(dx, [[0.0, 1.0]]) and np.array_equal(y, [[7.0, -4.0]])
    worst_oracle, worst_fd = 0.0, 0.0
    with default_dtype("f64"):
        for n in (2, 3):
            for depth in (1, 2, 4):
                r = RngStream(50 * n + depth)
                layers = [random_layer(n, 8, r.child(i), name=f"l{i}") for i in range(depth)]
                x = r.child(99).normal((2, 5, 8 * n), 1.0)
                res = compare_stack(layers, x, AttentionContext(), seed=None)
                worst_oracle = max(worst_oracle, res["dx_err"], res["dtheta_err"])
                worst_fd = max(worst_fd, fd_agreement(layers, x, AttentionContext(), coords=12, seed=n + depth))
    ok = linear_ok and worst_oracle <= 1e-8 and worst_fd <= 1e-5
    report(2, "gradient equivalence", ok,
           f"oracle rel err {worst_oracle:.1e} (<=1e-8), finite diff {worst_fd:.1e} (<=1e-5), "
           f"linear dX={dx.tolist()[0]}")


# -- 3 ----------------------------------------------------------------------------------------

def test_criterion_3_recompute_accounting():
    mismatches = []
    with default_dtype("f64"):
        for n in (2, 3, 4):
            for depth in (1, 2, 4):
                r = RngStream(7 * n + depth)
                layers = [random_layer(n, 8, r.child(i)) for i in range(depth)]
                res = compare_stack(layers, r.child(50).normal((1, 4, 8 * n), 1.0), AttentionContext(), seed=None)
                per_split = [layer.g_evals for layer in layers]
                if res["evals_oracle"] != n * depth or res["evals_reversible"] != 2 * n * depth \
                        or any(c != [2] * n for c in per_split):
                    mismatches.append((n, depth, res["evals_oracle"], res["evals_reversible"]))
    report(3, "recompute accounting", not mismatches,
           "exactly one extra evaluation per G_k" if not mismatches else f"mismatches {mismatches}")


# -- 4 ----------------------------------------------------------------------------------------

def test_criterion_4_memory():
    rows = profile_memory(ProfileConfig(d=[96], depths=[1, 2, 4, 8], splits=2, batch_size=4, seq_len=16))
    rev = {r["depth"]: r["retained_bytes"] for r in rows if r["backbone"] == "reversible"}
    std = {r["depth"]: r["retained_bytes"] for r in rows if r["backbone"] == "standard"}
    constant = rev[1] == rev[2] == rev[4] == rev[8]
    increasing = std[1] < std[2] < std[4] < std[8]
    ratio = rev[4] / std[4]
    ok = constant and increasing and ratio <= 0.55
    report(4, "activation memory", ok,
           f"reversible {[rev[d] for d in (1, 2, 4, 8)]}, standard {[std[d] for d in (1, 2, 4, 8)]}, "
           f"depth-4 ratio {ratio:.3f} (<=0.55)")


# -- 5 ----------------------------------------------------------------------------------------

def test_criterion_5_mixed_op_and_discretize():
    worst = 0.0
    with default_dtype("f64"):
        for side in ("encoder", "decoder"):
            ops = build_op_set(side, 8, RngStream(3), "f64", memory_width=8)
            h = Tensor(RngStream(4).normal((2, 5, 8), 1.0), dtype="f64")
            ctx = AttentionContext(memory=Tensor(RngStream(5).normal((2, 3, 8), 1.0), dtype="f64"))
            for j in range(len(ops)):
                alpha = np.zeros(len(ops))
                alpha[j] = 1000.0
                node = SearchNode(Tensor(alpha, dtype="f64"), ops, "max", side)
                mixed = mixed_forward(node, h, ctx).data
                single = apply_op(ops[j], h, ctx).data
                scale = max(np.max(np.abs(single)), 1e-300)
                worst = max(worst, float(np.max(np.abs(mixed - single)) / scale) if np.any(single) else
                            float(np.max(np.abs(mixed))))

    net = SuperNetwork(Dims(vocab=16, e=8, d=32, m=2, n=3, max_len=16), "max", 0, "f64")
    gen = np.random.default_rng(0)
    doc = net.alpha_document()
    doc["encoder"] = [[list(gen.normal(size=13)) for _ in row] for row in doc["encoder"]]
    doc["decoder"] = [[list(gen.normal(size=14)) for _ in row] for row in doc["decoder"]]
    base = discretize_alphas(doc)
    invariant = True
    for scale, shift in ((3.5, 0.0), (1.0, -7.25), (0.01, 100.0)):
        moved = {**doc,
                 "encoder": [[[scale * v + shift for v in a] for a in row] for row in doc["encoder"]],
                 "decoder": [[[scale * v + shift for v in a] for a in row] for row in doc["decoder"]]}
        arch = discretize_alphas(moved)
        invariant &= (arch.encoder, arch.decoder) == (base.encoder, base.decoder)
    tied = {**doc, "encoder": [[[0.5] * 13 for _ in row] for row in doc["encoder"]],
            "decoder": [[[0.0] * 12 + [0.5, 0.5] for _ in row] for row in doc["decoder"]]}
    arch = discretize_alphas(tied)
    tie_ok = all(k == ENCODER_KINDS[0] for row in arch.encoder for k in row) and \
        all(k == DECODER_KINDS[12] for row in arch.decoder for k in row)
    ok = worst <= 1e-12 and invariant and tie_ok
    report(5, "one-hot mixing and discretization", ok,
           f"one-hot rel err {worst:.1e} (<=1e-12), scale/shift invariant={invariant}, "
           f"tie-break to lowest tag={tie_ok}")


# -- 6 ----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_search_dynamics(tmp_path):
    dims = Dims(vocab=64, e=32, d=96, m=2, n=3, s=1, max_len=64)
    dataset = DatasetSpec()
    cfg = SearchConfig(dims=dims, dataset=dataset, steps=2000, checkpoint_interval=2000, log_interval=100,
                       batch_size=16, seed=0)
    init = SuperNetwork(dims, cfg.pooling, cfg.seed, cfg.dtype, cfg.alpha_init_std)
    h0 = [entropy(node.alpha) for *_, node in init.search_nodes()]

    start = time.perf_counter()
    net, _ = run_search(cfg, tmp_path / "search")
    search_s = time.perf_counter() - start
    h1 = [entropy(node.alpha) for *_, node in net.search_nodes()]
    arch = discretize_alphas(net.alpha_document())
    arch.save(tmp_path / "arch.json")

    ds = generate_dataset(dataset)
    start = time.perf_counter()
    model, _ = train_derived(Architecture.load(tmp_path / "arch.json"), ds, TrainConfig(steps=5000, lr=1e-3),
                             dims=dims)
    train_s = time.perf_counter() - start
    acc = evaluate(model, ds, "test")["token_accuracy"]

    lower = all(b < a for a, b in zip(h0, h1))
    ok = search_s < 1800 and acc >= 0.99 and lower
    report(6, "search dynamics", ok,
           f"2k steps in {search_s / 60:.1f} min (<30), arch enc={arch.encoder} dec={arch.decoder}, "
           f"retrain token acc {acc:.4f} (>=0.99) after 5k steps ({train_s / 60:.1f} min), "
           f"entropy lower on every node={lower} "
           f"(max change {max(b - a for a, b in zip(h0, h1)):.2e})")


# -- 7 ----------------------------------------------------------------------------------------

def test_criterion_7_search_space_arithmetic():
    getcontext().prec = 50
    small = search_space_size(13, 13, 2, 3, 1)
    mixed = search_space_size(13, 14, 2, 3, 2)
    small_ref = Decimal(13) ** 5
    mixed_ref = Decimal(13) ** 4 * Decimal(14) ** 6
    stated = 214_919_225_344
    ok = small == 371_293 == int(small_ref) and mixed == int(mixed_ref) == 13 ** 4 * 14 ** 6
    report(7, "search-space arithmetic", ok,
           f"371293 -> {small}; 13^4*14^6 -> {mixed} (decimal {mixed_ref}); "
           f"the quoted literal {stated} differs from the exact product by {mixed - stated}")


# -- 8 ----------------------------------------------------------------------------------------

def test_criterion_8_uniform_sampling(tmp_path):
    dims = Dims(vocab=16, e=8, d=32, m=2, n=3, max_len=16)
    net = SuperNetwork(dims, "max", 0, "f32")
    rng = RngStream(11)
    counts: dict = {}
    for _ in range(10_000):
        for key, kind in sample_uniform_path(net, rng).items():
            counts.setdefault(key, {}).setdefault(kind, 0)
            counts[key][kind] += 1
    pvalues = []
    for (side, _, _), c in counts.items():
        kinds = ENCODER_KINDS if side == "encoder" else DECODER_KINDS
        pvalues.append(chisquare([c.get(k, 0) for k in kinds]).pvalue)

    data = DatasetSpec(vocab=16, min_len=3, max_len=8,
                       sizes=dict(theta_train=64, alpha_val=64, retrain_train=16, retrain_val=8, test=8))
    cfg = SearchConfig(dims=dims, dataset=data, steps=20, checkpoint_interval=10, log_interval=5, batch_size=8,
                       strategy="uniform_sampling")
    init = SuperNetwork(dims, cfg.pooling, cfg.seed, cfg.dtype, cfg.alpha_init_std).alpha_document()
    trained, ckpts = run_search(cfg, tmp_path)
    frozen = trained.alpha_document()["encoder"] == init["encoder"] and \
        trained.alpha_document()["decoder"] == init["decoder"]
    finished = [c.step for c in ckpts] == [0, 10, 20] and (tmp_path / "alpha.json").exists()
    ok = min(pvalues) > 0.01 and frozen and finished
    report(8, "uniform-sampling baseline", ok,
           f"min chi-square p={min(pvalues):.3f} over {len(pvalues)} nodes (>0.01), "
           f"alpha untouched={frozen}, run completed={finished}")


# -- 9 ----------------------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    dims = Dims(vocab=16, e=8, d=32, m=2, n=3, max_len=16)
    data = DatasetSpec(vocab=16, min_len=3, max_len=8,
                       sizes=dict(theta_train=64, alpha_val=64, retrain_train=16, retrain_val=8, test=8))
    cfg = SearchConfig(dims=dims, dataset=data, steps=12, checkpoint_interval=6, log_interval=2, batch_size=8,
                       seed=3)
    run_search(cfg, tmp_path / "a")
    run_search(cfg, tmp_path / "b")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("metrics.jsonl", "alpha.json"))
    report(9, "determinism", same, "metrics.jsonl and alpha.json byte-identical across two runs")

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from revdarts import functional as F
from revdarts.candidate_ops import DECODER_KINDS, OPERATION_KINDS, AttentionContext, make_operation
from revdarts.gradcheck import ScaleSplit, compare_stack, fd_agreement, linear_example, random_layer
from revdarts.ledger import LedgerError, MemoryLedger
from revdarts.model import FixedOp
from revdarts.reversible import (
    ReconstructionError,
    ReversibleLayer,
    backward_with_reconstruction,
    forward_layer,
    inverse_layer,
    stack_backward,
    stack_forward,
    stack_forward_standard,
)
from revdarts.tensor import RngStream, ShapeError, Tensor, backward_from, default_dtype

from conftest import rel_err


def zero_layer(n, width=8):
    return ReversibleLayer([FixedOp(make_operation("zero", width, RngStream(0), "f64"), "max") for _ in range(n)])


def x_in(shape, seed=0):
    return np.random.default_rng(seed).uniform(-2, 2, shape)


# -- forward / inverse --------------------------------------------------------------------------

def test_zero_g_is_identity():
    layer = zero_layer(3)
    x = Tensor(x_in((2, 4, 24)))
    y = forward_layer(layer, x, AttentionContext())
    assert np.array_equal(y.data, x.data)
    assert np.array_equal(inverse_layer(layer, y, AttentionContext()).data, y.data)


def test_linear_example_forward_and_inverse():
    layer = ReversibleLayer([ScaleSplit(2.0), ScaleSplit(-1.0)])
    with default_dtype("f64"):
        y = forward_layer(layer, Tensor(np.array([[1.0, 3.0]])), None)
        assert y.data.tolist() == [[7.0, -4.0]]
        assert inverse_layer(layer, y, None).data.tolist() == [[1.0, 3.0]]


def test_linear_example_gradient():
    y, dx = linear_example()
    assert y.tolist() == [[7.0, -4.0]]
    assert dx.tolist() == [[0.0, 1.0]]


def test_forward_replay_bit_identical():
    layer = random_layer(3, 8, RngStream(2), kinds=["ffn", "glu", "self_attn"])
    ctx = AttentionContext(dropout=0.1)
    x = Tensor(x_in((2, 5, 24)))
    a = forward_layer(layer, x, ctx, RngStream(9))
    b = forward_layer(layer, x, ctx, RngStream(9))
    assert np.array_equal(a.data, b.data)
    c = forward_layer(layer, x, ctx, RngStream(10))
    assert not np.array_equal(a.data, c.data)


def test_width_not_divisible():
    with pytest.raises(ShapeError):
        forward_layer(zero_layer(3), Tensor(x_in((1, 2, 16))), AttentionContext())


def test_bad_g_shape():
    bad = lambda later, earlier, ctx, rng: F.concat([(later + earlier)[0]] * 2)
    layer = ReversibleLayer([bad, bad])
    with pytest.raises(ShapeError, match="G_1"):
        forward_layer(layer, Tensor(x_in((1, 3, 8))), AttentionContext())


def test_needs_two_splits():
    with pytest.raises(ValueError):
        ReversibleLayer([ScaleSplit(1.0)])


def test_missing_rng_log():
    layer = zero_layer(2)
    y = Tensor(x_in((1, 2, 16)))
    with pytest.raises(ReconstructionError):
        inverse_layer(layer, y, AttentionContext())
    with pytest.raises(ReconstructionError):
        backward_with_reconstruction(layer, y, np.ones(y.shape), AttentionContext())


@given(st.integers(2, 5), st.integers(0, 10_000), st.booleans())
def test_roundtrip_f64(n, seed, causal):
    layer = random_layer(n, 8, RngStream(seed), kinds=DECODER_KINDS, memory_width=16)
    ctx = AttentionContext(memory=Tensor(x_in((2, 3, 16), seed + 1)), causal=causal)
    x = Tensor(x_in((2, 5, 8 * n), seed))
    y = forward_layer(layer, x, ctx)
    assert np.max(np.abs(inverse_layer(layer, y, ctx).data - x.data)) <= 1e-10


def test_roundtrip_with_dropout_replay():
    layer = random_layer(3, 8, RngStream(5), kinds=["ffn", "dyn_conv_3", "self_attn"])
    ctx = AttentionContext(dropout=0.3)
    x = Tensor(x_in((2, 6, 24)))
    y = forward_layer(layer, x, ctx, RngStream(1))
    assert np.max(np.abs(inverse_layer(layer, y, ctx).data - x.data)) <= 1e-10


def test_split_order_matters():
    layer = random_layer(3, 8, RngStream(8), kinds=["ffn", "glu", "std_conv_3"])
    x = Tensor(x_in((1, 4, 24)))
    y = forward_layer(layer, x, AttentionContext())
    permuted = ReversibleLayer([layer.g[2], layer.g[0], layer.g[1]])
    xp = Tensor(np.concatenate([x.data[..., 16:], x.data[..., :16]], axis=-1))
    yp = forward_layer(permuted, xp, AttentionContext()).data
    yp = np.concatenate([yp[..., 8:], yp[..., :8]], axis=-1)
    assert not np.allclose(yp, y.data)


# -- backward with reconstruction -------------------------------------------------------------------

def test_zero_g_backward_passes_gradient_through():
    layer = zero_layer(2)
    x = Tensor(x_in((1, 3, 16)))
    y = forward_layer(layer, x, AttentionContext())
    dy = x_in((1, 3, 16), 1)
    bundle = backward_with_reconstruction(layer, y, dy, AttentionContext())
    assert np.array_equal(bundle.dx, dy)
    assert layer.parameters() == []


@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 10_000), st.sampled_from(["max", "avg"]))
def test_matches_stored_oracle(depth, n, seed, pooling):
    r = RngStream(seed)
    layers = [random_layer(n, 8, r.child(i), pooling=pooling, name=f"l{i}") for i in range(depth)]
    res = compare_stack(layers, x_in((2, 4, 8 * n), seed), AttentionContext(), seed=None)
    assert res["dx_err"] <= 1e-8 and res["dtheta_err"] <= 1e-8


def test_matches_oracle_under_dropout():
    r = RngStream(4)
    layers = [random_layer(3, 8, r.child(i), kinds=["ffn", "glu", "dyn_conv_7"]) for i in range(3)]
    res = compare_stack(layers, x_in((2, 5, 24)), AttentionContext(dropout=0.2), seed=77)
    assert res["dx_err"] <= 1e-8 and res["dtheta_err"] <= 1e-8


@pytest.mark.parametrize("depth,n", [(1, 2), (2, 3), (3, 4), (2, 5)])
def test_matches_finite_differences(depth, n):
    r = RngStream(100 + depth)
    layers = [random_layer(n, 8, r.child(i)) for i in range(depth)]
    assert fd_agreement(layers, x_in((1, 4, 8 * n), depth), AttentionContext(), coords=6) <= 1e-5


def test_decoder_memory_gradient_matches_oracle():
    r = RngStream(6)
    mem_np = x_in((2, 3, 16), 2)
    layers = [random_layer(3, 8, r.child(i), kinds=["cross_attn", "self_attn", "ffn"], memory_width=16)
              for i in range(2)]
    x = x_in((2, 4, 24), 3)
    w = x_in((2, 4, 24), 4)
    mem_a = Tensor(mem_np, requires_grad=True)
    ctx = AttentionContext(memory=mem_a, causal=True)
    out, tape = stack_forward_standard(layers, Tensor(x, requires_grad=True), ctx)
    backward_from(out, w)
    tape.close()
    mem_b = Tensor(mem_np, requires_grad=True)
    ctx_b = AttentionContext(memory=mem_b, causal=True)
    state = stack_forward(layers, Tensor(x, requires_grad=True), ctx_b)
    stack_backward(state, w, ctx_b)
    assert rel_err(mem_a.grad, mem_b.grad) <= 1e-8


def test_stack_one_layer_equals_direct():
    layer = random_layer(2, 8, RngStream(3))
    x = x_in((1, 4, 16))
    dy = x_in((1, 4, 16), 9)
    state = stack_forward([layer], Tensor(x), AttentionContext())
    y = state.stored_output.copy()
    a = stack_backward(state, dy, AttentionContext())
    for p in layer.parameters():
        p.grad = None
    b = backward_with_reconstruction(layer, y, dy, AttentionContext())
    assert np.array_equal(a.dx, b.dx) and np.array_equal(a.x, b.x)


def test_three_layer_f32_reconstruction():
    r = RngStream(12)
    layers = [random_layer(3, 8, r.child(i), dtype="f32") for i in range(3)]
    x = x_in((2, 6, 24)).astype(np.float32)
    state = stack_forward(layers, Tensor(x), AttentionContext())
    bundle = stack_backward(state, np.ones_like(x), AttentionContext())
    assert np.max(np.abs(bundle.x - x)) <= 1e-4


def test_non_finite_gradient_names_split():
    layer = random_layer(3, 8, RngStream(1))
    y = forward_layer(layer, Tensor(x_in((1, 2, 24))), AttentionContext())
    dy = np.ones((1, 2, 24))
    dy[..., 8:16] = np.nan
    with pytest.raises(FloatingPointError, match="split 2"):
        backward_with_reconstruction(layer, y, dy, AttentionContext())


def test_drift_guard_catches_unreplayed_randomness():
    noise = np.random.default_rng(0)
    g = lambda later, earlier, ctx, rng: Tensor((later + earlier)[0].data + noise.standard_normal((later + earlier)[0].shape))
    layer = ReversibleLayer([g, g])
    state = stack_forward([layer], Tensor(x_in((1, 2, 16))), None, debug=True)
    with pytest.raises(ReconstructionError, match="drift"):
        stack_backward(state, np.ones((1, 2, 16)), None)


def test_recompute_is_one_extra_evaluation_per_split():
    r = RngStream(21)
    layers = [random_layer(3, 8, r.child(i)) for i in range(4)]
    res = compare_stack(layers, x_in((1, 3, 24)), AttentionContext(), seed=None)
    assert res["evals_oracle"] == 4 * 3
    assert res["evals_reversible"] == 2 * 4 * 3
    assert res["evals_reversible"] - res["evals_oracle"] == 4 * 3


def test_ledger_keeps_only_input_and_output():
    ledger = MemoryLedger()
    r = RngStream(2)
    layers = [random_layer(2, 8, r.child(i)) for i in range(5)]
    x = Tensor(x_in((2, 4, 16)))
    state = stack_forward(layers, x, AttentionContext(), ledger=ledger)
    assert ledger.retained_bytes == 2 * x.nbytes
    stack_backward(state, np.ones(x.shape), AttentionContext())
    assert ledger.retained_bytes == 0
    assert ledger.recompute_forward_count == 5 * 2
    ledger.assert_drained()


def test_ledger_guards():
    ledger = MemoryLedger()
    ledger.retain(10, "a")
    with pytest.raises(LedgerError):
        ledger.release(11, "a")
    with pytest.raises(LedgerError):
        ledger.assert_drained()
    ledger.release(10, "a")
    assert ledger.peak_bytes == 10 and ledger.retained_bytes == 0

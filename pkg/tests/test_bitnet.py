import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mhmoe import tensor as T
from mhmoe.bitnet import EPS, linear, quantize_activations, quantize_weights, quantized_forward
from mhmoe.layers import MoEConfig, init_params, mhmoe_forward
from mhmoe.tensor import OpCounter, Rng, Tensor

from .conftest import randt


def test_uniform_magnitudes():
    q = quantize_weights(Tensor(np.array([[0.5, -0.5], [0.5, -0.5]])))
    assert q.gamma == 0.5
    np.testing.assert_array_equal(q.W_quant, [[1, -1], [1, -1]])


def test_zero_matrix():
    q = quantize_weights(Tensor(np.zeros((3, 2))))
    assert q.gamma == 0.0 and not np.any(q.W_quant)


def test_matches_elementwise_oracle(rng):
    W = rng.normal(size=(6, 5))
    q = quantize_weights(Tensor(W))
    gamma = sum(abs(v) for v in W.flat) / W.size
    assert q.gamma == pytest.approx(gamma, rel=1e-14)
    for (i, j), v in np.ndenumerate(W):
        r = v / (gamma + EPS)
        want = 0.0 if abs(r) <= 0.5 else float(np.sign(r))  # round half to even sends 0.5 to 0
        assert q.W_quant[i, j] == want
    assert np.abs(W - q.effective).max() <= np.abs(W).max()


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False)))
def test_at_most_three_levels(W):
    q = quantize_weights(Tensor(W))
    assert set(np.unique(q.W_quant)) <= {-1.0, 0.0, 1.0}
    assert set(np.unique(q.effective)) <= {-q.gamma, 0.0, q.gamma}


def test_binary_mode_signs(rng):
    W = rng.normal(size=(4, 4))
    q = quantize_weights(Tensor(W), "binary")
    np.testing.assert_array_equal(q.W_quant, np.where(W >= 0, 1.0, -1.0))
    with pytest.raises(ValueError):
        quantize_weights(Tensor(W), "int4")


def test_activation_quantizer_grid(rng):
    x = rng.normal(size=(3, 7))
    xq = quantize_activations(x)
    s = 127 / np.abs(x).max(1, keepdims=True)
    np.testing.assert_allclose(xq * s, np.round(xq * s), atol=1e-9)
    assert np.abs(x - xq).max() <= (0.5 / s).max() + 1e-15
    assert not np.any(quantize_activations(np.zeros((2, 3))))


def test_identity_pattern_forward_is_quantized_input(rng):
    x = rng.normal(size=(4, 5))
    # mean |5 I| = 1, so gamma = 1 and the ternary pattern is I
    out = quantized_forward(Tensor(x), Tensor(5 * np.eye(5)))
    np.testing.assert_array_equal(out.data, quantize_activations(x))


def test_zero_input_forward():
    assert not np.any(quantized_forward(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4)))).data)


def test_forward_composes_primitives(rng):
    x, W = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    q = quantize_weights(Tensor(W))
    want = quantize_activations(x) @ (q.gamma * q.W_quant)
    np.testing.assert_allclose(quantized_forward(Tensor(x), Tensor(W)).data, want, rtol=0, atol=1e-12)


def test_forward_counted_like_matmul_and_shape_checked(rng):
    c = OpCounter()
    quantized_forward(randt(rng, 4, 6), randt(rng, 6, 3), c)
    assert c.paper_count == 4 * 3 * 6 + 4 * 3 * 5
    with pytest.raises(T.DimensionError):
        quantized_forward(randt(rng, 4, 6), randt(rng, 5, 3))


def _on_grid(rng, shape):
    """Rows whose absmax is 127 and entries integral: fixed points of the 8-bit quantizer."""
    x = rng.integers(-127, 128, size=shape).astype(float)
    x[:, 0] = 127.0
    return x


def test_ste_inside_clip_equals_plain_gradient(rng):
    x = _on_grid(rng, (5, 4))
    # |W / gamma| <= 1 everywhere forces equal magnitudes
    W = 0.3 * rng.choice([-1.0, 1.0], size=(4, 3))
    g = rng.normal(size=(5, 3))
    Wq, xq = Tensor(W, requires_grad=True), Tensor(x, requires_grad=True)
    T.backward(T.sum_all(T.hadamard(quantized_forward(xq, Wq), Tensor(g))))
    np.testing.assert_allclose(Wq.grad, x.T @ g, rtol=1e-14)
    np.testing.assert_allclose(xq.grad, g @ quantize_weights(Tensor(W)).effective.T, rtol=1e-14)


def test_ste_outside_clip_is_zero(rng):
    x = _on_grid(rng, (5, 3))
    W = np.array([[0.1, -0.1], [0.1, 5.0], [-0.1, 0.1]])
    Wt = Tensor(W, requires_grad=True)
    T.backward(T.sum_all(quantized_forward(Tensor(x), Wt)))
    assert Wt.grad[1, 1] == 0.0
    mask = np.ones_like(W, bool)
    mask[1, 1] = False
    np.testing.assert_allclose(Wt.grad[mask], (x.T @ np.ones((5, 2)))[mask])


def test_linear_without_quant_is_plain_matmul(rng):
    x, W = randt(rng, 3, 4), randt(rng, 4, 2)
    np.testing.assert_array_equal(linear(x, W).data, T.matmul(x, W).data)


def test_quant_off_reproduces_layer_bit_exactly(rng):
    cfg = MoEConfig(d=8, h=2, d_expert=6, E=4, k=2, activation="swiglu3mat",
                    use_head_layer=True, use_merge_layer=True, shared_expert_dim=5)
    p = init_params(cfg, Rng(3), std=0.5)
    x = randt(rng, 4, 8)
    plain = mhmoe_forward(x, p, cfg).data
    np.testing.assert_array_equal(mhmoe_forward(x, p, cfg, quant=None).data, plain)
    quant = mhmoe_forward(x, p, cfg, quant="ternary").data
    assert not np.array_equal(quant, plain)
    c1, c2 = OpCounter(), OpCounter()
    mhmoe_forward(x, p, cfg, c1)
    mhmoe_forward(x, p, cfg, c2, quant="ternary")
    assert c1.paper_count == c2.paper_count

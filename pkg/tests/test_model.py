import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mamba_ghost.errors import DimensionError, NumericError, ParameterError
from mamba_ghost.model import (ModelConfig, block_forward, block_signals, causal_depthwise_conv_silu,
                               discretize, init_model, input_projection, model_forward, rmsnorm,
                               silu, ssm_scan, state_memory_bytes)
from mamba_ghost.pipeline import apply_mask

from conftest import naive_scan


# --- config ---------------------------------------------------------------

def test_config_derived_quantities():
    cfg = ModelConfig()
    assert cfg.heads_per_group == 4
    assert cfg.expanded_dim == 128
    assert cfg.in_proj_dim == 2 * 128 + 2 * 2 * 16 + 8
    assert [cfg.group_of(h) for h in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]
    sl = cfg.in_proj_slices()
    assert [sl[k].stop - sl[k].start for k in ("z", "x", "B", "C", "delta")] == [128, 128, 32, 32, 8]


@pytest.mark.parametrize("kwargs", [
    dict(heads=8, groups=3),
    dict(model_dim=64, expand=2, heads=8, head_dim=8),
    dict(state_dim=0),
    dict(eps=0.0),
])
def test_config_rejects_inconsistent_dimensions(kwargs):
    with pytest.raises(ParameterError):
        ModelConfig(**kwargs)


def test_config_roundtrip_and_fingerprint():
    cfg = ModelConfig(n_layers=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.fingerprint() != ModelConfig(n_layers=3).fingerprint()
    with pytest.raises(ParameterError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# --- rmsnorm ----------------------------------------------------------------

def test_rmsnorm_examples():
    np.testing.assert_array_equal(rmsnorm(np.full(4, 3.0), np.ones(4), 0.0), np.ones(4))
    np.testing.assert_array_equal(rmsnorm(np.zeros(4), np.ones(4), 1e-6), np.zeros(4))
    np.testing.assert_array_equal(rmsnorm(np.array([1.0, -1.0]), np.array([2.0, 2.0]), 0.0),
                                  np.array([2.0, -2.0]))


def test_rmsnorm_length_mismatch():
    with pytest.raises(DimensionError):
        rmsnorm(np.ones(3), np.ones(4), 1e-5)


# --- input projection -------------------------------------------------------

def test_input_projection_identity_square(tiny_config):
    cfg = ModelConfig(model_dim=2, expand=1, heads=1, head_dim=2, groups=1, state_dim=1, n_layers=1)
    layer = init_model(cfg, 0).layers[0]
    # W_in has 2R+2GN+H = 7 rows; make its top block the identity so u=e_1 lands in z
    layer.W_in[:] = 0.0
    layer.W_in[0, 0] = layer.W_in[1, 1] = 1.0
    layer.b_in[:] = 0.0
    z, x, B, C, d = input_projection(np.array([1.0, 0.0]), layer, cfg)
    np.testing.assert_array_equal(z, [1.0, 0.0])
    assert not x.any() and not B.any() and not C.any() and not d.any()


def test_input_projection_zero_input_gives_bias(tiny_model, tiny_config):
    layer = tiny_model.layers[0]
    layer.b_in[:] = np.arange(tiny_config.in_proj_dim, dtype=float)
    parts = input_projection(np.zeros(tiny_config.model_dim), layer, tiny_config)
    np.testing.assert_array_equal(np.concatenate([p.ravel() for p in parts]), layer.b_in)


def test_input_projection_slices_partition_output(tiny_model, tiny_config):
    layer = tiny_model.layers[1]
    u = np.random.default_rng(0).standard_normal(tiny_config.model_dim)
    parts = input_projection(u, layer, tiny_config)
    np.testing.assert_array_equal(np.concatenate([p.ravel() for p in parts]), u @ layer.W_in.T + layer.b_in)


# --- conv -------------------------------------------------------------------

def naive_conv(seq, filters, bias):
    T, C = seq.shape
    W = filters.shape[1]
    out = np.zeros((T, C))
    for t in range(T):
        for c in range(C):
            acc = bias[c]
            for w in range(W):
                s = t - W + 1 + w
                acc += filters[c, w] * (seq[s, c] if s >= 0 else 0.0)
            out[t, c] = acc / (1.0 + math.exp(-acc))
    return out


def test_conv_matches_loop_reference():
    rng = np.random.default_rng(1)
    seq, filt, bias = rng.standard_normal((9, 5)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    np.testing.assert_allclose(causal_depthwise_conv_silu(seq, filt, bias), naive_conv(seq, filt, bias),
                               rtol=1e-13, atol=1e-14)


def test_conv_identity_filter_is_pointwise_silu():
    seq = np.random.default_rng(2).standard_normal((6, 3))
    filt = np.zeros((3, 4))
    filt[:, -1] = 1.0
    np.testing.assert_array_equal(causal_depthwise_conv_silu(seq, filt, np.zeros(3)), silu(seq))


def test_conv_zero_cases():
    rng = np.random.default_rng(3)
    filt = rng.standard_normal((3, 4))
    assert not causal_depthwise_conv_silu(np.zeros((5, 3)), filt, np.zeros(3)).any()
    filt[1] = 0.0
    bias = rng.standard_normal(3)
    bias[1] = 0.0
    out = causal_depthwise_conv_silu(rng.standard_normal((5, 3)), filt, bias)
    assert np.all(out[:, 1] == 0.0)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        causal_depthwise_conv_silu(np.zeros((4, 3)), np.zeros((2, 4)), np.zeros(2))


# --- discretize -------------------------------------------------------------

def test_discretize_examples():
    a, b = discretize(np.array(math.log(2)), np.array(0.0), np.array([1.0]))
    assert a == pytest.approx(0.5, rel=1e-15)
    a, b = discretize(np.array(1.0), np.array(0.3), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(b, [1.0, -2.0])
    a, b = discretize(np.array(1e-12), np.array(1.0), np.array([5.0]))
    assert a == pytest.approx(1.0) and abs(b[0]) < 1e-10


def test_discretize_rejects_nonpositive_step():
    with pytest.raises(ParameterError):
        discretize(np.array([0.1, 0.0]), np.zeros(2), np.ones((2, 3)))


# products delta*exp(A_log) stay within (1e-9, 700) so exp() neither rounds to 1 nor underflows
@given(st.floats(-10, 3), st.floats(1e-4, 30))
def test_discretized_decay_is_stable(a_log, delta):
    a, _ = discretize(np.array(delta), np.array(a_log), np.ones(1))
    assert 0.0 < a < 1.0


# --- scan -------------------------------------------------------------------

def test_scan_scalar_hand_computation():
    y, h, _ = ssm_scan(np.full((1, 1, 1), 2.0), np.full((1, 1, 1), 3.0), np.zeros((1, 1)),
                       np.full((1, 1, 1), 4.0), np.ones(1))
    assert h[0, 0, 0] == 6.0
    assert y[0, 0, 0] == 26.0


def test_scan_matches_loop_reference():
    rng = np.random.default_rng(4)
    L, H, P, G, N = 5, 4, 3, 2, 3
    x, b = rng.standard_normal((L, H, P)), rng.standard_normal((L, H, N))
    a, c, D = rng.uniform(0, 1, (L, H)), rng.standard_normal((L, G, N)), rng.standard_normal(H)
    y, h, _ = ssm_scan(x, b, a, c, D)
    y_ref, h_ref = naive_scan(x, b, a, c, D)
    np.testing.assert_allclose(y, y_ref, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(h, h_ref, rtol=1e-12, atol=1e-13)


def test_scan_memoryless_and_feedthrough():
    rng = np.random.default_rng(5)
    L, H, P, G, N = 4, 2, 2, 1, 3
    x, b, c, D = (rng.standard_normal((L, H, P)), rng.standard_normal((L, H, N)),
                  rng.standard_normal((L, G, N)), rng.standard_normal(H))
    y, _, _ = ssm_scan(x, b, np.zeros((L, H)), c, D)
    expected = x * np.einsum("lhn,lhn->lh", b, np.repeat(c, H, axis=1))[..., None] + D[:, None] * x
    np.testing.assert_allclose(y, expected, rtol=1e-13)
    y, h, _ = ssm_scan(x, np.zeros((L, H, N)), rng.uniform(0, 1, (L, H)), c, D)
    assert not h.any()
    np.testing.assert_array_equal(y, D[:, None] * x)


def test_scan_zero_input_is_linear_in_initial_state():
    rng = np.random.default_rng(6)
    L, H, P, G, N = 6, 2, 2, 2, 3
    a, c = rng.uniform(0, 1, (L, H)), rng.standard_normal((L, G, N))
    x, b = np.zeros((L, H, P)), rng.standard_normal((L, H, N))
    h1, h2 = rng.standard_normal((H, P, N)), rng.standard_normal((H, P, N))
    run = lambda h0: ssm_scan(x, b, a, c, np.zeros(H), h_init=h0)
    y1, f1, _ = run(h1)
    y2, f2, _ = run(h2)
    y12, f12, _ = run(h1 + h2)
    np.testing.assert_allclose(f12, f1 + f2, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(y12, y1 + y2, rtol=1e-12, atol=1e-14)


def test_scan_channel_independence():
    rng = np.random.default_rng(8)
    L, H, P, G, N = 5, 4, 2, 2, 4
    x, b, a, c = (rng.standard_normal((L, H, P)), rng.standard_normal((L, H, N)),
                  rng.uniform(0, 1, (L, H)), rng.standard_normal((L, G, N)))
    _, _, dense = ssm_scan(x, b, a, c, np.ones(H), capture=True)
    b2, c2 = b.copy(), c.copy()
    b2[:, 0:2, 1] = 0.0
    c2[:, 0, 1] = 0.0
    _, _, pruned = ssm_scan(x, b2, a, c2, np.ones(H), capture=True)
    assert not pruned.hidden[:, 0:2, :, 1].any()
    other = np.ones((H, N), dtype=bool)
    other[0:2, 1] = False
    np.testing.assert_array_equal(pruned.hidden[:, other[:, None, :].repeat(P, 1)],
                                  dense.hidden[:, other[:, None, :].repeat(P, 1)])


def test_scan_reports_nan_location():
    x = np.ones((3, 2, 1))
    x[1, 1, 0] = np.nan
    with pytest.raises(NumericError, match=r"t=1, h=1"):
        ssm_scan(x, np.ones((3, 2, 1)), np.full((3, 2), 0.5), np.ones((3, 1, 1)), np.ones(2))


def test_scan_shape_errors():
    with pytest.raises(DimensionError):
        ssm_scan(np.ones((3, 2, 1)), np.ones((3, 2, 2)), np.ones((3, 2)), np.ones((3, 1, 3)), np.ones(2))


def test_scan_observer_sees_every_step():
    seen = []
    ssm_scan(np.ones((4, 1, 1)), np.ones((4, 1, 1)), np.full((4, 1), 0.5), np.ones((4, 1, 1)), np.ones(1),
             observer=lambda t, h, c: seen.append((t, float(h[0, 0, 0]))))
    assert seen == [(0, 1.0), (1, 1.5), (2, 1.75), (3, 1.875)]


# --- block / model ----------------------------------------------------------

def test_block_residual_passthrough(tiny_model, tiny_config):
    layer = tiny_model.layers[0]
    layer.W_out[:] = 0.0
    layer.b_out[:] = 0.0
    u = np.random.default_rng(0).standard_normal((2, 5, tiny_config.model_dim))
    out, _ = block_forward(u, layer, tiny_config)
    np.testing.assert_array_equal(out, u)


def test_block_shape_and_determinism(tiny_model, tiny_config):
    u = np.random.default_rng(1).standard_normal((2, 7, tiny_config.model_dim))
    out1, _ = block_forward(u, tiny_model.layers[0], tiny_config)
    out2, _ = block_forward(u, init_model(tiny_config, 7).layers[0], tiny_config)
    assert out1.shape == u.shape
    np.testing.assert_array_equal(out1, out2)


def test_block_matches_composition_by_hand(tiny_model, tiny_config):
    """Recompute one block for a single sequence with explicit loops over time."""
    cfg, layer = tiny_config, tiny_model.layers[1]
    u = np.random.default_rng(2).standard_normal((6, cfg.model_dim))
    out, _ = block_forward(u, layer, cfg)
    un = np.array([rmsnorm(v, layer.norm_gamma, cfg.eps) for v in u])
    proj = un @ layer.W_in.T + layer.b_in
    sl = cfg.in_proj_slices()
    xbc = np.concatenate([proj[:, sl["x"]], proj[:, sl["B"]], proj[:, sl["C"]]], axis=1)
    xbc = naive_conv(xbc, layer.conv_filters, layer.conv_bias)
    R, GN = cfg.expanded_dim, cfg.groups * cfg.state_dim
    xp = xbc[:, :R].reshape(-1, cfg.heads, cfg.head_dim)
    Bp = xbc[:, R:R + GN].reshape(-1, cfg.groups, cfg.state_dim)
    Cp = xbc[:, R + GN:].reshape(-1, cfg.groups, cfg.state_dim)
    delta = np.log1p(np.exp(proj[:, sl["delta"]]))
    a_bar = np.exp(-delta * np.exp(layer.A_log))
    b_bar = delta[:, :, None] * np.repeat(Bp, cfg.heads_per_group, axis=1)
    y, _ = naive_scan(xp, b_bar, a_bar, Cp, layer.D)
    z = proj[:, sl["z"]]
    gated = y.reshape(len(u), -1) * z / (1 + np.exp(-z))
    expected = u + np.array([rmsnorm(v, layer.out_norm_gamma, cfg.eps) for v in gated]) @ layer.W_out.T \
        + layer.b_out
    np.testing.assert_allclose(out, expected, rtol=1e-11, atol=1e-12)


def test_masked_channel_state_is_exactly_zero(tiny_model, tiny_config, tiny_tokens):
    keep = np.ones((tiny_config.groups, tiny_config.state_dim), dtype=bool)
    keep[1, 2] = False
    layer = apply_mask(tiny_model.layers[0], keep, tiny_config)
    tiny_model.layers[0] = layer
    _, cap = model_forward(tiny_tokens, tiny_model, capture_layer=0)
    heads = list(tiny_config.heads_in_group(1))
    assert np.all(cap.hidden[..., heads, :, 2] == 0.0)
    assert np.all(cap.c_prime[..., 1, 2] == 0.0)


def test_model_forward_zero_layers():
    cfg = ModelConfig(n_layers=0)
    w = init_model(cfg, 3)
    tokens = np.array([[1, 2, 3]])
    logits, cap = model_forward(tokens, w)
    normed = rmsnorm(w.embedding[tokens], w.final_norm_gamma, cfg.eps)
    np.testing.assert_array_equal(logits, normed @ w.embedding.T)
    assert cap is None


def test_model_forward_capture_shape_and_determinism(tiny_model, tiny_config, tiny_tokens):
    logits, cap = model_forward(tiny_tokens, tiny_model, capture_layer=1)
    B, L = tiny_tokens.shape
    assert logits.shape == (B, L, tiny_config.vocab)
    assert cap.hidden.shape == (B, L, tiny_config.heads, tiny_config.head_dim, tiny_config.state_dim)
    assert cap.c_prime.shape == (B, L, tiny_config.groups, tiny_config.state_dim)
    again, _ = model_forward(tiny_tokens, init_model(tiny_config, 7))
    np.testing.assert_array_equal(logits, again)


def test_model_forward_input_errors(tiny_model):
    with pytest.raises(ParameterError):
        model_forward(np.array([[0, 256]]), tiny_model)
    with pytest.raises(DimensionError):
        model_forward([[1, 2, 3], [1, 2]], tiny_model)
    with pytest.raises(ParameterError):
        model_forward(np.array([[1]]), tiny_model, capture_layer=5)


def test_fast_precision_stays_float32(tiny_model, tiny_tokens):
    logits, _ = model_forward(tiny_tokens, tiny_model.astype(np.float32))
    ref, _ = model_forward(tiny_tokens, tiny_model)
    assert logits.dtype == np.float32
    np.testing.assert_allclose(logits, ref, rtol=1e-3, atol=1e-4)


def test_block_signals_state_keep_zeroes_b_and_c(tiny_model, tiny_config):
    u = np.random.default_rng(9).standard_normal((1, 4, tiny_config.model_dim))
    keep = np.ones((2, 4), dtype=bool)
    keep[0, 3] = False
    sig = block_signals(u, tiny_model.layers[0], tiny_config, keep)
    assert not sig.b_prime[..., 0, 3].any() and not sig.c_prime[..., 0, 3].any()
    assert sig.c_prime[..., 1, 3].any()


# --- memory arithmetic --------------------------------------------------------

def test_state_memory_bytes_large_config():
    cfg = ModelConfig(model_dim=2048, expand=2, heads=64, head_dim=64, groups=1, state_dim=128, n_layers=48)
    per_layer, total = state_memory_bytes(cfg, 4)
    assert per_layer == 2_097_152
    assert total == 100_663_296
    half = ModelConfig(**{**cfg.to_dict(), "state_dim": 64})
    assert state_memory_bytes(half, 4)[0] * 2 == per_layer


def test_state_memory_bytes_rejects_odd_width():
    with pytest.raises(ParameterError):
        state_memory_bytes(ModelConfig(), 3)

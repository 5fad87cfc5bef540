import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeflow import nn
from shapeflow.gradcheck import finite_diff_check


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def check_op(loss_from_params, params, tol=1e-6):
    err = finite_diff_check(loss_from_params, params, max_coords=40)
    assert err < tol, f"max rel err {err:.3e}"


def test_linear_identity():
    x = rand((5, 4))
    y, _ = nn.linear_fwd(x, np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(y, x)


def test_linear_shape_mismatch_message():
    with pytest.raises(ValueError, match="shape"):
        nn.linear_fwd(rand((3, 5)), np.eye(4), np.zeros(4))


def test_linear_gradcheck():
    x = rand((3, 4), 1)
    probe = rand((3, 6), 2)

    def loss(p):
        y, cache = nn.linear_fwd(x, p["w"], p["b"])
        l = float((y * probe).sum())
        _, dw, db = nn.linear_bwd(probe, cache)
        return l, {"w": dw, "b": db}

    check_op(loss, {"w": rand((4, 6), 3), "b": rand(6, 4)})


def test_layernorm_constant_vector_is_zero():
    x = np.full((2, 8), 3.7)
    y, _ = nn.layernorm_fwd(x, np.ones(8), np.zeros(8))
    np.testing.assert_allclose(y, 0.0, atol=1e-12)


def test_layernorm_gradcheck():
    x = rand((4, 6), 5)
    probe = rand((4, 6), 6)

    def loss(p):
        y, cache = nn.layernorm_fwd(x + p["x0"], p["g"], p["b"])
        dy = probe
        dx, dg, db = nn.layernorm_bwd(dy, cache)
        return float((y * probe).sum()), {"x0": dx, "g": dg, "b": db}

    check_op(loss, {"x0": rand((4, 6), 7), "g": 1 + 0.1 * rand(6, 8), "b": rand(6, 9)})


def test_gelu_gradcheck():
    probe = rand((50,), 1)

    def loss(p):
        y, cache = nn.gelu_fwd(p["x"])
        return float((y * probe).sum()), {"x": nn.gelu_bwd(probe, cache)}

    check_op(loss, {"x": rand((50,), 2) * 2})


def test_softmax_rows_sum_to_one():
    y = nn.softmax(rand((7, 9), 3) * 30)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    assert (y >= 0).all()


def test_conv3x3_center_one_hot_is_identity():
    x = rand((2, 6, 6, 3), 4)
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[1, 1, c, c] = 1.0
    y, _ = nn.conv3x3_fwd(x, w, np.zeros(3))
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_conv3x3_stride2_shape():
    y, _ = nn.conv3x3_fwd(rand((1, 16, 16, 3), 5), rand((3, 3, 3, 8), 6), np.zeros(8),
                          stride=2)
    assert y.shape == (1, 8, 8, 8)


def test_conv3x3_gradcheck():
    x = rand((2, 5, 5, 2), 7)
    probe = rand((2, 5, 5, 4), 8)

    def loss(p):
        y, cache = nn.conv3x3_fwd(x + p["x0"], p["w"], p["b"])
        dx, dw, db = nn.conv3x3_bwd(probe, cache)
        return float((y * probe).sum()), {"x0": dx, "w": dw, "b": db}

    check_op(loss, {"x0": rand((2, 5, 5, 2), 9), "w": rand((3, 3, 2, 4), 10),
                    "b": rand(4, 11)})


def test_dwconv3x3_gradcheck():
    x = rand((2, 4, 4, 3), 12)
    probe = rand((2, 4, 4, 3), 13)

    def loss(p):
        y, cache = nn.dwconv3x3_fwd(x + p["x0"], p["w"], p["b"])
        dx, dw, db = nn.dwconv3x3_bwd(probe, cache)
        return float((y * probe).sum()), {"x0": dx, "w": dw, "b": db}

    check_op(loss, {"x0": rand((2, 4, 4, 3), 14), "w": rand((3, 3, 3), 15),
                    "b": rand(3, 16)})


def test_patchify_channel_order_contract():
    x = np.arange(4, dtype=np.float64).reshape(1, 2, 2, 1)
    y = nn.patchify2x2(x)
    # (r0c0, r0c1, r1c0, r1c1)
    np.testing.assert_array_equal(y.reshape(-1), [0, 1, 2, 3])


def test_patchify_pixel_shuffle_inverse_pair():
    x = rand((3, 16, 16, 3), 17)
    np.testing.assert_array_equal(nn.pixel_shuffle2(nn.patchify2x2(x)), x)
    p = rand((3, 8, 8, 12), 18)
    np.testing.assert_array_equal(nn.patchify2x2(nn.pixel_shuffle2(p)), p)


def test_patchify_odd_dims_rejected():
    with pytest.raises(ValueError, match="even"):
        nn.patchify2x2(rand((1, 5, 6, 1), 19))


def test_pixel_shuffle_constant_stays_constant():
    x = np.full((1, 4, 4, 8), 2.5)
    y = nn.pixel_shuffle2(x)
    assert y.shape == (1, 8, 8, 2)
    assert (y == 2.5).all()


@given(st.integers(2, 5).map(lambda k: 2 * k))
@settings(max_examples=8, deadline=None)
def test_patchify_roundtrip_any_even_size(side):
    x = rand((1, side, side, 2), side)
    np.testing.assert_array_equal(nn.pixel_shuffle2(nn.patchify2x2(x)), x)


def test_convnext_zero_final_layer_is_identity():
    rng = np.random.default_rng(20)
    p = {f"b.{k}": v for k, v in nn.convnext_init(rng, 4, dtype=np.float64).items()}
    x = rand((2, 4, 4, 4), 21)
    y, _ = nn.convnext_fwd(x, p, "b.")
    np.testing.assert_array_equal(y, x)  # pw2 zero-init -> residual only


def test_convnext_shape_preserved():
    rng = np.random.default_rng(22)
    p = {f"b.{k}": v for k, v in nn.convnext_init(rng, 6, dtype=np.float64).items()}
    for h, w in ((4, 4), (8, 8), (2, 6)):
        x = rand((1, h, w, 6), h * 10 + w)
        y, _ = nn.convnext_fwd(x, p, "b.")
        assert y.shape == x.shape


def test_convnext_gradcheck():
    rng = np.random.default_rng(23)
    base = {f"b.{k}": v.astype(np.float64) for k, v in nn.convnext_init(rng, 4).items()}
    # give the zero-initialized layer a value so its input gradients flow
    base["b.pw2.w"] = 0.3 * rand((16, 4), 24)
    x = rand((1, 4, 4, 4), 25)
    probe = rand((1, 4, 4, 4), 26)

    def loss(p):
        y, cache = nn.convnext_fwd(x, p, "b.")
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        nn.convnext_bwd(probe, cache, grads, "b.")
        return float((y * probe).sum()), grads

    check_op(loss, base, tol=1e-4)


def test_attention_causality_by_perturbation():
    rng = np.random.default_rng(27)
    d, l = 8, 6
    ws = [rand((d, d), s) * 0.3 for s in (1, 2, 3, 4)]
    mask = np.tril(np.ones((1, l, l), dtype=bool))
    x = rand((1, l, d), 28)
    y0, _ = nn.causal_attention_fwd(x, *ws, mask, 2)
    for j in range(1, l):
        xp = x.copy()
        xp[0, j] += rng.standard_normal(d)
        y1, _ = nn.causal_attention_fwd(xp, *ws, mask, 2)
        np.testing.assert_array_equal(y0[0, :j], y1[0, :j])


def test_attention_single_position_formula():
    d = 6
    ws = [rand((d, d), s) for s in (31, 32, 33, 34)]
    x = rand((1, 1, d), 35)
    mask = np.ones((1, 1, 1), dtype=bool)
    y, _ = nn.causal_attention_fwd(x, *ws, mask, 2)
    # softmax over one key has weight 1: y = (x Wv) Wo
    np.testing.assert_allclose(y, (x @ ws[2]) @ ws[3], rtol=1e-12)


def test_attention_rejects_non_causal_mask():
    d, l = 4, 3
    ws = [rand((d, d), s) for s in (41, 42, 43, 44)]
    mask = np.ones((1, l, l), dtype=bool)  # full attention includes future
    with pytest.raises(ValueError, match="future"):
        nn.causal_attention_fwd(rand((1, l, d), 45), *ws, mask, 2)


def test_attention_gradcheck():
    d, l = 8, 5
    x = rand((1, l, d), 46)
    probe = rand((1, l, d), 47)
    mask = np.tril(np.ones((1, l, l), dtype=bool))
    mask[0, 3, 1] = False  # block structure inside the triangle

    def loss(p):
        y, cache = nn.causal_attention_fwd(x + p["x0"], p["wq"], p["wk"], p["wv"],
                                           p["wo"], mask, 2)
        dx, dwq, dwk, dwv, dwo = nn.causal_attention_bwd(probe, cache)
        return float((y * probe).sum()), {
            "x0": dx, "wq": dwq, "wk": dwk, "wv": dwv, "wo": dwo}

    params = {"x0": rand((1, l, d), 48), "wq": rand((d, d), 49), "wk": rand((d, d), 50),
              "wv": rand((d, d), 51), "wo": rand((d, d), 52)}
    check_op(loss, params, tol=1e-4)


def test_finite_diff_check_quadratic_exact():
    def loss(p):
        return float(0.5 * (p["p"] ** 2).sum()), {"p": p["p"].copy()}

    err = finite_diff_check(loss, {"p": rand(20, 53)}, max_coords=20)
    assert err < 1e-8


def test_finite_diff_check_rejects_nonfinite_loss():
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda p: (float("nan"), {"p": p["p"]}), {"p": rand(3, 54)})


def test_trunc_normal_bounds_and_determinism():
    a = nn.trunc_normal(np.random.default_rng(9), (1000,), std=0.02)
    b = nn.trunc_normal(np.random.default_rng(9), (1000,), std=0.02)
    assert (np.abs(a) <= 0.04 + 1e-9).all()
    np.testing.assert_array_equal(a, b)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeflow import backbone, encoders, generate
from shapeflow.backbone import ModelConfig, init_model_params
from shapeflow.data import make_corpus
from shapeflow.gradcheck import finite_diff_check

CFG = ModelConfig(d_emb=16, n_blocks=2, n_heads=2, d_enc=8, l_max=96, repa_block=1)


@pytest.fixture(scope="module")
def params():
    return init_model_params(CFG, 2).tensors


@pytest.fixture(scope="module")
def gen_samples():
    return make_corpus(33, 0, 3, 0).gen


def test_gen_encoder_row_count_and_determinism(params, gen_samples):
    lats = np.stack([s.image for s in gen_samples])
    rows, skip, _ = encoders.gen_encode_fwd(lats, params, CFG)
    rows2, _, _ = encoders.gen_encode_fwd(lats, params, CFG)
    assert rows.shape == (3, 64, CFG.d_emb)
    assert skip.shape == (3, 8, 8, CFG.c_skip)
    np.testing.assert_array_equal(rows, rows2)


def test_gen_decoder_output_shape(params):
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((2, 64, CFG.d_emb)).astype(np.float32)
    skip = rng.standard_normal((2, 8, 8, CFG.c_skip)).astype(np.float32)
    vel, _ = encoders.gen_decode_fwd(rows, skip, params, CFG)
    assert vel.shape == (2, 16, 16, 3)


def test_gen_decoder_skip_actually_wired(params):
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((1, 64, CFG.d_emb)).astype(np.float32)
    skip = rng.standard_normal((1, 8, 8, CFG.c_skip)).astype(np.float32)
    v1, _ = encoders.gen_decode_fwd(rows, skip, params, CFG)
    v2, _ = encoders.gen_decode_fwd(rows, np.zeros_like(skip), params, CFG)
    assert np.abs(v1 - v2).max() > 0.0


def test_interpolant_endpoints(gen_samples):
    x = gen_samples[0].image.astype(np.float64)
    z0 = np.random.default_rng(2).standard_normal(x.shape)
    np.testing.assert_array_equal(generate.interpolate(x, z0, 0.0), z0)
    np.testing.assert_array_equal(generate.interpolate(x, z0, 1.0), x)


def test_sample_time_in_open_interval_and_reproducible():
    t1 = generate.sample_time(np.random.default_rng(3), 1000)
    t2 = generate.sample_time(np.random.default_rng(3), 1000)
    np.testing.assert_array_equal(t1, t2)
    assert (t1 > 0).all() and (t1 < 1).all()


def test_sample_time_logit_normal_moments():
    n = 100_000
    t = generate.sample_time(np.random.default_rng(4), n)
    logit = np.log(t / (1 - t))
    assert abs(logit.mean()) < 3 / np.sqrt(n)
    assert 0.985 < logit.std() < 1.015


def test_velocity_shape_and_determinism(params, gen_samples):
    z = np.random.default_rng(5).standard_normal((16, 16, 3)).astype(np.float32)
    v1 = generate.velocity(z, 0.3, gen_samples[0].caption_tokens, params, CFG)
    v2 = generate.velocity(z, 0.3, gen_samples[0].caption_tokens, params, CFG)
    assert v1.shape == (16, 16, 3)
    np.testing.assert_array_equal(v1, v2)


def test_velocity_depends_on_time(params, gen_samples):
    z = np.random.default_rng(6).standard_normal((16, 16, 3)).astype(np.float32)
    ids = gen_samples[0].caption_tokens
    v1 = generate.velocity(z, 0.1, ids, params, CFG)
    v2 = generate.velocity(z, 0.9, ids, params, CFG)
    assert np.abs(v1 - v2).max() > 0.0


def test_velocity_depends_on_condition(params, gen_samples):
    z = np.random.default_rng(7).standard_normal((16, 16, 3)).astype(np.float32)
    v1 = generate.velocity(z, 0.5, gen_samples[0].caption_tokens, params, CFG)
    v2 = generate.velocity(z, 0.5, (), params, CFG)
    assert np.abs(v1 - v2).max() > 0.0


def test_rf_loss_zero_when_velocity_is_exact(params, gen_samples, monkeypatch):
    draws = generate.draw_flow_vars(np.random.default_rng(8), len(gen_samples), CFG, 0.0)
    x = np.stack([s.image for s in gen_samples]).astype(np.float32)
    target = x - draws.z0.astype(np.float32)

    def fake_decode(rows, skip, p, cfg):
        return target.copy(), None

    monkeypatch.setattr(encoders, "gen_decode_fwd", fake_decode)
    rf, _, _ = generate.flow_losses(gen_samples, params, CFG, draws)
    assert rf == pytest.approx(0.0, abs=1e-12)


def test_rf_loss_nonnegative_and_deterministic_given_draws(params, gen_samples):
    draws = generate.draw_flow_vars(np.random.default_rng(9), len(gen_samples), CFG)
    a = generate.flow_losses(gen_samples, params, CFG, draws)[0]
    b = generate.flow_losses(gen_samples, params, CFG, draws)[0]
    assert a == b >= 0.0


def test_full_drop_makes_loss_caption_invariant(params, gen_samples):
    import dataclasses
    draws = generate.draw_flow_vars(np.random.default_rng(10), len(gen_samples),
                                    CFG, drop_rate=1.0)
    assert draws.drop.all()
    scrambled = [dataclasses.replace(s, caption_tokens=(9, 9, 9)) for s in gen_samples]
    a = generate.flow_losses(gen_samples, params, CFG, draws)
    b = generate.flow_losses(scrambled, params, CFG, draws)
    assert a[0] == b[0] and a[1] == b[1]


def test_prompt_drop_rate_three_sigma():
    draws = generate.draw_flow_vars(np.random.default_rng(11), 100_000, CFG)
    rate = draws.drop.mean()
    assert abs(rate - 0.1) < 3 * np.sqrt(0.1 * 0.9 / 100_000)


def test_flow_gradcheck_rf_and_repa(params, gen_samples):
    jit = np.random.default_rng(12)
    base = {k: v.astype(np.float64) + jit.normal(0, 0.1, v.shape)
            for k, v in params.items()}
    draws = generate.draw_flow_vars(np.random.default_rng(13), len(gen_samples),
                                    CFG, drop_rate=0.0)
    imgs = np.stack([s.image for s in gen_samples]).astype(np.float64)
    targets, _ = encoders.und_encode_fwd(imgs, base, CFG)

    def combined(p, want):
        rf, repa, grads = generate.flow_losses(gen_samples, p, CFG, draws,
                                               want_grads=want, align_targets=targets)
        return rf + repa, grads

    err = finite_diff_check(lambda p: combined(p, True), base, max_coords=5, seed=3,
                            loss_only_fn=lambda p: combined(p, False)[0])
    assert err < 1e-4


@given(st.floats(0.01, 0.99), st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_interpolant_affine_identity(t, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 4, 3))
    z0 = rng.standard_normal((4, 4, 3))
    zt = generate.interpolate(x, z0, t)
    np.testing.assert_allclose(zt, t * x + (1 - t) * z0, rtol=1e-12)

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvae import tensor as T
from hvae.distributions import DiagGaussian, guided_extrapolate
from hvae.guidance import GuidanceWeights, guided_layer_step, guided_sample, sweep
from hvae.model import HVAE
from hvae.tensor import NonFiniteError

from conftest import tiny_config


@pytest.fixture(scope="module")
def model():
    return HVAE(tiny_config(num_classes=3, label_drop_prob=0.1), seed=5)


def test_weights_validated():
    for bad in ((-0.1, 0), (0, float("nan")), (float("inf"), 1)):
        with pytest.raises(ValueError):
            GuidanceWeights(*bad)
    assert GuidanceWeights().is_zero and not GuidanceWeights(0.5, 0).is_zero


@pytest.mark.parametrize("output_temp", [0.0, 1.0])
def test_zero_weights_bit_identical_to_conditional_prior_sample(model, output_temp):
    label = np.array([0, 1, 2, 1])
    a = guided_sample(model, 4, label, (0, 0), temps=[1.0, 0.7], output_temp=output_temp,
                      rng=np.random.default_rng(11))
    b = model.prior_sample(4, label, temps=[1.0, 0.7], output_temp=output_temp, rng=np.random.default_rng(11))
    assert a.tobytes() == b.tobytes()


def test_fixed_seed_is_deterministic(model):
    run = lambda: guided_sample(model, 3, 2, (1.5, 2.0), rng=np.random.default_rng(3))  # noqa: E731
    assert run().tobytes() == run().tobytes()


def test_shared_sample_enters_both_paths(model):
    """The stochastic increment to h_c equals the one to h_u at every layer."""
    seen = {"enter": [], "resid": [], "trail": []}
    m = HVAE(model.config, seed=5)
    orig_enter, orig_prior, orig_trail = m.enter_layer, m.prior_step, m.trailing

    def enter(i, h):
        out = orig_enter(i, h)
        seen["enter"].append(out.data.copy())
        return out

    def prior(i, h, label):
        p, resid = orig_prior(i, h, label)
        seen["resid"].append(resid.data.copy())
        return p, resid

    def trail(i, h, label):
        seen["trail"].append(h.data.copy())
        return orig_trail(i, h, label)

    m.enter_layer, m.prior_step, m.trailing = enter, prior, trail
    _, state = guided_sample(m, 2, [0, 2], (2.0, 1.0), rng=np.random.default_rng(0), return_state=True)
    assert len(state.injections) == m.config.num_layers
    for i in range(m.config.num_layers):
        inc_c = seen["trail"][2 * i] - seen["enter"][2 * i] - seen["resid"][2 * i]
        inc_u = seen["trail"][2 * i + 1] - seen["enter"][2 * i + 1] - seen["resid"][2 * i + 1]
        assert np.allclose(inc_c, inc_u, rtol=0, atol=1e-12)
        assert np.allclose(inc_c, state.injections[i], rtol=0, atol=1e-12)


def test_constant_mean_offset_extrapolates_linearly():
    r = np.random.default_rng(0)
    mu_u = r.standard_normal((2, 3, 4, 4))
    lv = r.standard_normal((2, 3, 4, 4)) * 0.3
    cond, uncond = DiagGaussian(mu_u + 0.25, lv), DiagGaussian(mu_u, lv)
    g = guided_extrapolate(cond, uncond, 2.0, 0.0)
    assert np.allclose(g.mean.data, mu_u + 0.25 + 2 * 0.25, rtol=0, atol=1e-14)
    assert np.array_equal(g.logvar.data, lv)


def test_null_label_rejected(model):
    with pytest.raises(ValueError, match="null"):
        guided_sample(model, 2, [0, 3], (1, 1), rng=np.random.default_rng(0))


def test_unconditional_model_rejected():
    with pytest.raises(ValueError, match="class-conditional"):
        guided_sample(HVAE(tiny_config()), 1, 0, (1, 1))


def test_warns_without_label_dropout():
    m = HVAE(tiny_config(num_classes=2, label_drop_prob=0.0))
    with pytest.warns(RuntimeWarning, match="label dropout"):
        guided_sample(m, 1, 0, (0, 0), rng=np.random.default_rng(0))


def test_single_path_state_rejected(model):
    with pytest.raises(ValueError, match="dual-path"):
        guided_layer_step(model, model.start_state(1), np.array([0]), GuidanceWeights(), np.random.default_rng(0))


def test_unknown_mode_rejected(model):
    with pytest.raises(ValueError, match="mode"):
        guided_sample(model, 1, 0, (1, 1), rng=np.random.default_rng(0), mode="ratio")


def test_product_mode_counts_fallbacks(model):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        img, state = guided_sample(model, 4, [0, 1, 2, 0], (3.0, 0.0), rng=np.random.default_rng(1),
                                   mode="product", return_state=True)
    assert np.all(np.isfinite(img))
    assert 0 <= state.fallbacks <= sum(2 * 4 * s * s for s in (4, 8))


def test_non_finite_guided_parameters_abort_with_layer(model):
    m = HVAE(model.config, seed=5)
    m.params["gen.l0.prior.conv2.b"].data[0] = np.nan
    with pytest.raises(NonFiniteError, match="layer 0"):
        guided_sample(m, 1, 0, (1, 1), rng=np.random.default_rng(0))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.integers(0, 2**32 - 1))
def test_extrapolated_distribution_always_valid(w_mu, w_sigma, seed):
    r = np.random.default_rng(seed)
    cond = DiagGaussian(r.standard_normal(50) * 3, r.standard_normal(50) * 4)
    uncond = DiagGaussian(r.standard_normal(50) * 3, r.standard_normal(50) * 4)
    g = guided_extrapolate(cond, uncond, w_mu, w_sigma)
    var = np.exp(g.logvar.data)
    assert np.all(np.isfinite(g.mean.data)) and np.all(np.isfinite(var)) and np.all(var > 0)


def test_sweep_grid_shape_matches_table(model):
    w_mus, w_sigmas = [0, 0.5, 1, 1.5, 2], [0, 0.5, 1, 2, 3, 4, 5]
    rows = sweep(model, w_mus, w_sigmas, n_per_class=1, seed=0)
    assert len(rows) == 35
    assert [(r["w_mu"], r["w_sigma"]) for r in rows] == [(a, b) for a in w_mus for b in w_sigmas]
    for r in rows:
        assert 0 <= r["class_agreement"] <= 1 and r["diversity"] >= 0 and r["saturation"] >= 0
    assert rows[0]["saturation"] == 0


def test_guided_state_tracks_layer(model):
    state = model.start_state(2, guided=True)
    state = guided_layer_step(model, state, np.array([0, 1]), GuidanceWeights(1, 1), np.random.default_rng(0))
    assert state.layer == 1 and state.guided and len(state.injections) == 1
    assert isinstance(state.h_u, T.Tensor)

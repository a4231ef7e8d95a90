import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paleosmc.models import ConfigurationError, ModelState, ObsParams, get_model, obs_logpdf
from paleosmc.orbital import ForcingWeights, forcing
from paleosmc.simulate import PRESETS


def sm91_unforced_theta(model, **changes):
    values = dict(PRESETS["sm91-u"]["theta"], **changes)
    return model.theta_from_dict(values)


def test_sm91_fixed_point():
    model = get_model("sm91", forced=False)
    params, _ = model.unpack(sm91_unforced_theta(model))
    np.testing.assert_array_equal(model.drift(np.zeros(3), 0, 100.0, params), np.zeros(3))


def test_sm91_drift_example():
    model = get_model("sm91", forced=False)
    params, _ = model.unpack(sm91_unforced_theta(model))
    out = model.drift(np.array([1.0, 0.0, 0.0]), 0, 100.0, params)
    np.testing.assert_allclose(out, np.array([-1.0, 0.0, -1.6]) / 10.0, rtol=0, atol=1e-15)


def test_sm91_forced_drift_includes_forcing(sm91_forced, sm91_truth, orbital):
    params, _ = sm91_forced.unpack(sm91_truth)
    t = 123.0
    f = forcing(orbital, t, ForcingWeights(0.3, 0.1, 0.4))
    out = sm91_forced.drift(np.zeros(3), 0, t, params)
    assert out[0] == pytest.approx(-f / 10.0, abs=1e-15)


def test_diffusion_examples(sm91_forced, sm91_truth, orbital):
    params, _ = sm91_forced.unpack(sm91_truth)
    np.testing.assert_array_equal(sm91_forced.diffusion_diag(params), [0.2, 0.3, 0.3])
    t06 = get_model("t06", False)
    theta = t06.registry.sample(np.random.default_rng(0), 1)[0]
    assert t06.diffusion_diag(t06.unpack(theta)[0]).shape == (1,)
    theta[t06.param_names.index("sigma1")] = 0.0
    np.testing.assert_array_equal(t06.diffusion_diag(t06.unpack(theta)[0]), [0.0])


def _t06(orbital, **vals):
    model = get_model("t06", True, orbital)
    theta = model.registry.sample(np.random.default_rng(1), 1)[0]
    for k, v in vals.items():
        theta[model.param_names.index(k)] = v
    return model, model.unpack(theta)[0]


def test_t06_regime_switches(orbital):
    model, params = _t06(orbital, t_lower=10.0, t_upper=30.0)
    assert model.update_regime(np.array([30.1]), 0, 0.0, params) == 1
    assert model.update_regime(np.array([20.0]), 0, 0.0, params) == 0
    assert model.update_regime(np.array([20.0]), 1, 0.0, params) == 1
    assert model.update_regime(np.array([9.9]), 1, 0.0, params) == 0


@given(st.floats(-50, 80), st.integers(0, 1))
def test_t06_update_is_idempotent(x1, regime):
    model, params = _T06
    once = model.update_regime(np.array([x1]), regime, 0.0, params)
    assert model.update_regime(np.array([x1]), once, 0.0, params) == once


def _pp12(orbital, **vals):
    model = get_model("pp12", True, orbital)
    theta = model.registry.sample(np.random.default_rng(2), 1)[0]
    for k, v in vals.items():
        theta[model.param_names.index(k)] = v
    return model, model.unpack(theta)[0]


def test_pp12_switch_off_above_upper_threshold(orbital):
    model, params = _pp12(orbital)
    t = 50.0
    fk = model.forcing_value(t, params.switch_weights)
    x1 = params.v_upper - fk + 1e-6
    assert model.update_regime(np.array([x1]), 1, t, params) == 0


@given(st.floats(-50, 200), st.integers(0, 1), st.floats(0, 999))
def test_pp12_update_idempotent_when_conditions_exclusive(x1, regime, t):
    model, params = _PP12
    fk = model.forcing_value(t, params.switch_weights)
    if fk < params.v_lower and fk + x1 > params.v_upper:
        return  # both switches fire: the rule as written chatters
    once = model.update_regime(np.array([x1]), regime, t, params)
    assert model.update_regime(np.array([x1]), once, t, params) == once


def test_pp12_constant_forcing_keeps_regime_constant(orbital):
    model, params = _pp12(orbital, kappa_p=0.0, kappa_c=0.0, kappa_e=0.0, v_lower=-1.0, v_upper=100.0)
    x = np.array([10.0])
    regime = 0
    for t in np.linspace(900, 0, 40):
        regime = model.update_regime(x, regime, t, params)
        assert regime == 0


def test_pp12_swap_flag(orbital):
    model = get_model("pp12", True, orbital, swap_switches=True)
    assert model.describe()["pp12_swap_switches"] is True
    with pytest.raises(ConfigurationError):
        get_model("pp12", False, orbital)


def test_forced_model_requires_orbital():
    with pytest.raises(ConfigurationError):
        get_model("sm91", True, None)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1000), st.floats(0, 1000))
def test_unforced_drift_time_independent(a, b, c, t1, t2):
    model = _SM91U
    params, _ = model.unpack(sm91_unforced_theta(model))
    x = np.array([a, b, c])
    np.testing.assert_array_equal(model.drift(x, 0, t1, params), model.drift(x, 0, t2, params))


def test_batched_parameters_match_single(sm91_forced):
    theta = sm91_forced.registry.sample(np.random.default_rng(4), 5)
    x = np.random.default_rng(5).normal(size=(5, 7, 3))
    batched = sm91_forced.drift(x, 0, 321.0, sm91_forced.unpack(theta)[0])
    for b in range(5):
        single = sm91_forced.drift(x[b], 0, 321.0, sm91_forced.unpack(theta[b])[0])
        np.testing.assert_allclose(batched[b], single, rtol=1e-14, atol=1e-15)


def test_obs_logpdf_examples():
    obs = ObsParams(3.8, 0.8, 0.1)
    x = np.array([1.0, 0.0, 0.0])
    mode = -0.5 * math.log(2 * math.pi * 0.01)
    assert obs_logpdf(4.6, x, obs) == pytest.approx(mode, abs=1e-12)
    assert obs_logpdf(4.7, x, obs) == pytest.approx(mode - 0.5, abs=1e-12)
    with pytest.raises(ValueError):
        ObsParams(0.0, 1.0, -0.1)


def test_model_state_validation():
    with pytest.raises(ValueError):
        ModelState(np.array([np.nan]))
    with pytest.raises(ValueError):
        ModelState(np.zeros(1), regime=2)


def test_theta_from_dict_reports_missing(sm91_forced):
    with pytest.raises(KeyError, match="gamma_p"):
        sm91_forced.theta_from_dict(PRESETS["sm91-u"]["theta"])


def _orb():
    import io

    from paleosmc.orbital import load_orbital_table, synthetic_orbital_table
    return load_orbital_table(io.StringIO(synthetic_orbital_table()))


_ORB = _orb()
_T06 = _t06(_ORB, t_lower=10.0, t_upper=30.0)
_PP12 = _pp12(_ORB)
_SM91U = get_model("sm91", forced=False)

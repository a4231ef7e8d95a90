import numpy as np
import pytest
from sklearn.base import clone

from paleosmc.estimator import SMC2Estimator, check_record
from paleosmc.validation import ou_dataset


def test_check_record():
    ages, values = check_record([[6.0], [3.0], [0.0]], [1, 2, 3])
    assert ages.shape == (3,) and values.shape == (3,)
    with pytest.raises(ValueError):
        check_record([0.0, 3.0, 1.0])
    with pytest.raises(ValueError):
        check_record([0.0, 3.0], [1.0])
    with pytest.raises(ValueError):
        check_record([0.0, np.nan])


def test_params_roundtrip():
    est = SMC2Estimator(model="ou", forced=False, n_theta=10)
    assert est.get_params()["n_theta"] == 10
    assert clone(est).set_params(n_x=7).n_x == 7


def test_fit_and_predict():
    _, ds = ou_dataset(10)
    est = SMC2Estimator(model="ou", forced=False, n_theta=32, n_x=32, seed=2)
    est.fit(ds.ages, ds.values)
    assert np.isfinite(est.log_evidence_)
    assert est.theta_.shape == (32, 5)
    assert est.weights_.sum() == pytest.approx(1.0)
    assert set(est.summary()["parameters"]) == {"lam", "sigma", "D", "S", "sigma_y"}
    pred = est.predict(ds.ages[::-1][:4] + 0.5, n_draws=5)
    assert pred.shape == (4,) and np.all(np.isfinite(pred))
    assert np.corrcoef(est.predict(ds.ages, n_draws=5), ds.values)[0, 1] > 0.5
    with pytest.raises(ValueError):
        est.predict([1e4])

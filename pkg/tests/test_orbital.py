import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paleosmc.orbital import (ForcingWeights, OrbitalError, OrbitalSolution, forcing, load_orbital_table,
                              normalize_series, orbital_at, synthetic_orbital_table, transformed_precession,
                              truncate)

TABLE = """# test table
t_kyr,esinw,ecosw,obliquity
0,0.01,-0.02,0.41
1,0.02,0.00,0.40
2,-0.01,0.03,0.42
"""


def test_three_row_table_parses():
    sol = load_orbital_table(io.StringIO(TABLE))
    assert len(sol.ages) == 3
    assert sol.raw["obliquity"][1] == 0.40


def test_negative_times_become_ages():
    text = TABLE.replace("\n1,", "\n-1,").replace("\n2,", "\n-2,")
    sol = load_orbital_table(io.StringIO(text))
    np.testing.assert_array_equal(sol.ages, [0.0, 1.0, 2.0])


def test_duplicate_time_names_row():
    text = TABLE.replace("\n2,", "\n1,")
    with pytest.raises(OrbitalError, match="line 5"):
        load_orbital_table(io.StringIO(text))


def test_missing_column_reported():
    with pytest.raises(OrbitalError, match="obliquity"):
        load_orbital_table(io.StringIO("t_kyr,esinw,ecosw\n0,1,2\n1,2,3\n"))


def test_non_numeric_cell_names_row():
    with pytest.raises(OrbitalError, match="line 4.*'abc'"):
        load_orbital_table(io.StringIO(TABLE.replace("0.02,0.00", "abc,0.00")))


def test_constant_obliquity_rejected():
    text = "t_kyr,esinw,ecosw,obliquity\n0,0.01,0.02,0.4\n1,0.02,0.01,0.4\n2,0.00,0.03,0.4\n"
    with pytest.raises(OrbitalError, match="zero variance series"):
        load_orbital_table(io.StringIO(text))


def test_normalize_three_points():
    out, mean, scale = normalize_series([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert scale == pytest.approx(math.sqrt(2.0 / 3.0), abs=1e-12)
    np.testing.assert_allclose(out, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)


def test_normalize_zero_variance():
    with pytest.raises(ValueError, match="zero variance"):
        normalize_series([5.0, 5.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_normalize_roundtrip_and_idempotence(values):
    values = np.array(values)
    if np.std(values) < 1e-6 * max(1.0, np.abs(values).max()):
        return
    out, mean, scale = normalize_series(values)
    assert abs(out.mean()) < 1e-9
    assert out.std() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(out * scale + mean, values, atol=1e-9 * max(1.0, np.abs(values).max()))
    again, _, _ = normalize_series(out)
    np.testing.assert_allclose(again, out, atol=1e-12)


def test_orbital_at_grid_midpoint_and_range():
    sol = load_orbital_table(io.StringIO(TABLE))
    p, c, e = orbital_at(sol, 1.0)
    assert (p, c, e) == (sol.precession[1], sol.coprecession[1], sol.obliquity[1])
    mid = orbital_at(sol, 0.5)
    assert mid[0] == pytest.approx(0.5 * (sol.precession[0] + sol.precession[1]), abs=1e-15)
    with pytest.raises(OrbitalError, match="outside"):
        orbital_at(sol, 2.5)


def test_forcing_examples(orbital):
    t = 100.0
    p, c, e = orbital_at(orbital, t)
    assert forcing(orbital, t, ForcingWeights()) == 0.0
    assert forcing(orbital, t, ForcingWeights(1, 0, 0)) == p
    expected = 0.3 * p + 0.1 * c + 0.4 * e
    assert forcing(orbital, t, ForcingWeights(0.3, 0.1, 0.4)) == pytest.approx(expected, abs=1e-15)


@given(st.tuples(*[st.floats(-5, 5)] * 6), st.floats(0, 999))
def test_forcing_linear_in_weights(w, t):
    sol = _SOL
    w1, w2 = ForcingWeights(*w[:3]), ForcingWeights(*w[3:])
    total = forcing(sol, t, w1 + w2)
    assert total == pytest.approx(forcing(sol, t, w1) + forcing(sol, t, w2), abs=1e-12)


_SOL = load_orbital_table(io.StringIO(synthetic_orbital_table()))


def test_synthetic_table_is_normalised():
    sol = _SOL
    assert sol.age_range == (0.0, 1000.0)
    for s in (sol.precession, sol.coprecession, sol.obliquity):
        assert abs(s.mean()) < 1e-12 and s.std() == pytest.approx(1.0)


def test_from_series_validates_lengths():
    with pytest.raises(OrbitalError):
        OrbitalSolution(np.array([0.0, 1.0]), np.zeros(2), np.zeros(3), np.zeros(2))


def test_truncate_examples():
    for a in (0.1, 1.0, 7.0):
        assert truncate(0.0, a) == 0.0
        assert truncate(1.0, a) == 1.0
    assert truncate(-10.0, 1.0) == pytest.approx(-10 + math.sqrt(104) - 2, abs=1e-12)
    assert truncate(-10.0, 1.0) == pytest.approx(-1.8020, abs=5e-5)
    with pytest.raises(ValueError):
        truncate(1.0, 0.0)


def test_transformed_precession_examples():
    assert transformed_precession(0.148, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert transformed_precession(0.956, 0.5) == pytest.approx(1.0, abs=1e-12)
    expected = (-0.5 + math.sqrt(4 * 0.64 + 0.25) - 1.6 - 0.148) / 0.808
    assert transformed_precession(-0.5, 0.8) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        transformed_precession(0.1, -1.0)


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(0.01, 10))
def test_truncate_monotone(x1, x2, a):
    lo, hi = min(x1, x2), max(x1, x2)
    assert truncate(lo, a) <= truncate(hi, a) + 1e-12


@given(st.floats(1e-300, 1e6), st.floats(0.01, 10))
def test_truncate_identity_on_positives(x, a):
    assert truncate(x, a) == x

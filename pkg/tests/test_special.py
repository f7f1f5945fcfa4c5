import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mp_norm_ppf
from softmaxfit.special import norm_cdf, norm_isf, norm_ppf, norm_sf

PROBS = [1e-300, 1e-100, 1e-20, 1e-9, 1e-4, 0.02425, 0.1, 0.241970724519143,
         0.5, 0.7580292754808570, 0.9, 0.97575, 1 - 1e-9]


@pytest.mark.parametrize("p", PROBS)
def test_ppf_matches_high_precision(p):
    expected = mp_norm_ppf(p)
    got = float(norm_ppf(p))
    assert abs(got - expected) <= 1e-9 * max(1.0, abs(expected))


def test_ppf_at_half_is_zero():
    assert norm_ppf(0.5) == 0.0


def test_two_sided_95_quantile():
    assert norm_ppf(0.975) == pytest.approx(1.959963984540054, abs=1e-12)


def test_ucl_quantile_at_first_decision():
    alpha = 1.0 / np.sqrt(2 * np.pi * np.e)
    assert alpha == pytest.approx(0.241971, abs=1e-6)
    # checked against a 40-digit mpmath root
    assert norm_isf(alpha) == pytest.approx(mp_norm_ppf(1 - alpha), abs=1e-12)
    assert norm_isf(alpha) == pytest.approx(0.69997735099785, abs=1e-12)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, np.nan])
def test_ppf_rejects_outside_unit_interval(p):
    with pytest.raises(ValueError):
        norm_ppf(p)


def test_vectorised_shape():
    p = np.array([[0.1, 0.5], [0.9, 0.99]])
    assert norm_ppf(p).shape == (2, 2)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-12, max_value=1 - 1e-12))
def test_cdf_inverts_ppf(p):
    x = norm_ppf(p)
    assert float(norm_cdf(x)) == pytest.approx(p, rel=1e-12, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-300, max_value=0.5))
def test_isf_is_reflected_ppf(q):
    assert float(norm_isf(q)) == -float(norm_ppf(q))
    assert float(norm_sf(norm_isf(q))) == pytest.approx(q, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=1e-10, max_value=1 - 1e-10),
       st.floats(min_value=1e-10, max_value=1 - 1e-10))
def test_ppf_monotone(a, b):
    if a < b:
        assert norm_ppf(a) <= norm_ppf(b)

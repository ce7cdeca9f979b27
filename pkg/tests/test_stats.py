import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from liverseg.stats import (
    PairedSamples,
    betainc,
    p_value,
    paired_t_test,
    paired_t_test_arrays,
    sem,
    t_sf,
    t_statistic,
)

# reference U-Net vs SegNet Hausdorff group summaries (N = 26)
UNET_SD, SEGNET_SD, N, T_REPORTED = 1.614765, 1.567370, 26, 2.079617


@pytest.mark.parametrize("df", [1, 2, 5, 25, 100, 1000])
@pytest.mark.parametrize("t", [-40.0, -3.0, -0.5, 0.1, 1.0, 2.079617, 7.5, 60.0])
def test_t_tail_against_scipy(t, df):
    ref = scipy.stats.t.sf(t, df)
    assert abs(t_sf(t, df) - ref) <= 1e-10 * max(ref, 1e-300) + 1e-14


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (12.5, 0.5, 0.9), (3.0, 7.0, 0.01), (100.0, 2.0, 0.99)])
def test_betainc_against_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(scipy.special.betainc(a, b, x), abs=1e-13)


def test_cauchy_closed_form():
    for t in np.linspace(-50, 50, 401):
        assert abs(t_sf(t, 1) - (0.5 - math.atan(t) / math.pi)) <= 1e-10


def test_tail_at_zero_and_monotone():
    for df in (1, 3, 25):
        assert t_sf(0.0, df) == 0.5
        ts = np.linspace(-10, 10, 201)
        ps = [t_sf(t, df) for t in ts]
        assert all(x > y for x, y in zip(ps, ps[1:]))


def test_reference_sem():
    assert abs(sem(UNET_SD, N) - 0.316681) <= 5e-6
    assert abs(sem(SEGNET_SD, N) - 0.307386) <= 5e-6


def test_reference_p_and_effect_size():
    p = p_value(T_REPORTED, N - 1, "one_sided_less")
    assert abs(p - 0.0239) <= 2e-3
    assert round(T_REPORTED / math.sqrt(N), 2) == 0.41
    assert p_value(T_REPORTED, N - 1, "two_sided") == pytest.approx(2 * p, rel=1e-12)


def test_zero_difference():
    r = paired_t_test_arrays([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.t == 0.0 and r.p == 0.5 and not r.reject
    assert r.df == 2 and r.cohen_d == 0.0


def test_constant_nonzero_difference():
    r = paired_t_test_arrays([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
    assert math.isinf(r.t) and r.t > 0 and r.p == 0.0 and r.reject


def test_small_or_bad_samples():
    with pytest.raises(ValueError, match="N >= 2"):
        PairedSamples((1.0,), (2.0,))
    with pytest.raises(ValueError, match="equal lengths"):
        PairedSamples((1.0, 2.0), (2.0,))
    with pytest.raises(ValueError, match="finite"):
        PairedSamples((1.0, float("nan")), (2.0, 1.0))
    with pytest.raises(ValueError, match="tail"):
        paired_t_test_arrays([1, 2], [2, 4], tail="sideways")


def test_matches_scipy_paired():
    rng = np.random.default_rng(0)
    a = rng.normal(5.6, 1.6, 26)
    b = a - rng.normal(0.06, 0.15, 26)
    r = paired_t_test_arrays(a, b, alpha=0.05)
    ref = scipy.stats.ttest_rel(a, b, alternative="greater")
    assert r.t == pytest.approx(ref.statistic, rel=1e-12)
    assert r.p == pytest.approx(ref.pvalue, rel=1e-9)
    assert r.sem_a == pytest.approx(np.std(a, ddof=1) / math.sqrt(26), rel=1e-12)
    assert r.cohen_d == pytest.approx(r.t / math.sqrt(26), rel=1e-15)
    assert r.reject == (r.p < 0.05)
    two = paired_t_test_arrays(a, b, tail="two_sided")
    assert two.p == pytest.approx(scipy.stats.ttest_rel(a, b).pvalue, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=2, max_size=40))
def test_t_recomputation(pairs):
    a, b = zip(*pairs)
    r = paired_t_test(PairedSamples(a, b))
    again = t_statistic(r.mean_diff, r.sd_diff, r.n)
    if math.isinf(r.t):
        assert again == r.t
    else:
        assert abs(again - r.t) <= 1e-12 * max(1.0, abs(r.t))
    assert 0.0 <= r.p <= 1.0
    assert r.df == r.n - 1
    assert abs(r.sem_a - r.sd_a / math.sqrt(r.n)) <= 1e-12

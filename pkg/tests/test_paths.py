import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowmatch.paths import (OTPath, PathDomainError, PathSchedule, SingularPathError, VEPath,
                             VPPath, schedule_from_config)

SCHEDULES = [OTPath(), VPPath(), VEPath(), OTPath(sigma_min=0.1)]
ids = ["ot", "vp", "ve", "ot0.1"]

coord = st.floats(-3, 3, allow_nan=False)
point = st.tuples(coord, coord).map(np.array)


# mean_std examples

def test_ot_midpoint_schedule():
    mu, sigma, dmu, dsigma = OTPath(sigma_min=0.0).mean_std(0.5, np.array([2.0, 0.0]))
    np.testing.assert_array_equal(mu, [1.0, 0.0])
    assert sigma == 0.5 and dsigma == -1.0
    np.testing.assert_array_equal(dmu, [2.0, 0.0])


@given(st.floats(0, 1))
def test_ot_zero_sigma_min_linear_std(t):
    _, sigma, _, dsigma = OTPath(sigma_min=0.0).mean_std(t, np.zeros(2))
    assert sigma == pytest.approx(1 - t, abs=1e-15) and dsigma == -1.0


def test_vp_noise_end_values():
    vp = VPPath()
    assert vp.T(0.0) == 0.0
    assert vp.T(1.0) == pytest.approx(10.05, rel=1e-15)
    mu, sigma, _, _ = vp.mean_std(0.0, np.array([1.0, 0.0]))
    alpha1 = np.exp(-10.05 / 2)
    assert mu[0] == pytest.approx(alpha1, rel=1e-14)
    assert alpha1 == pytest.approx(6.55e-3, rel=5e-3)
    assert sigma == pytest.approx(np.sqrt(1 - alpha1**2), rel=1e-15)
    assert sigma == pytest.approx(0.99998, abs=1e-5)


def test_vp_rejects_untruncated_data_end():
    with pytest.raises(PathDomainError, match="eps"):
        VPPath().mean_std(1.0, np.zeros(2))
    with pytest.raises(PathDomainError):
        VEPath().conditional_flow(-0.1, np.zeros(2), np.zeros(2))


def test_ve_noise_end_is_not_unit():
    _, sigma, _, _ = VEPath().mean_std(0.0, np.zeros(2))
    assert sigma == pytest.approx(50.0, rel=1e-14)


# conditional flow

def test_ot_flow_boundaries():
    x0, x1 = np.array([0.3, -1.2]), np.array([2.0, 0.5])
    ot = OTPath(sigma_min=0.0)
    np.testing.assert_array_equal(ot.conditional_flow(0.0, x0, x1), x0)
    np.testing.assert_array_equal(ot.conditional_flow(1.0, x0, x1), x1)


def test_ot_flow_value():
    out = OTPath(sigma_min=0.1).conditional_flow(0.5, np.array([1.0, 1.0]), np.zeros(2))
    np.testing.assert_allclose(out, [0.55, 0.55], rtol=0, atol=1e-15)


def test_flow_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        OTPath().conditional_flow(0.3, np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError, match="dimension"):
        VPPath().conditional_flow(0.3, np.zeros(2), np.zeros(3))


@pytest.mark.parametrize("sch", SCHEDULES, ids=ids)
@given(st.floats(0, 0.99), point, point)
def test_flow_is_sigma_x0_plus_mu_exactly(sch, t, x0, x1):
    mu, sigma, _, _ = sch.mean_std(t, x1)
    np.testing.assert_array_equal(sch.conditional_flow(t, x0, x1), sigma * x0 + mu)


# conditional vector field

def test_ot_vf_examples():
    ot = OTPath(sigma_min=0.0)
    np.testing.assert_array_equal(ot.conditional_vf(0.0, np.zeros(2), np.array([1.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(ot.conditional_vf(0.5, np.array([0.5]), np.array([1.0])), [1.0])
    np.testing.assert_allclose(PathSchedule.conditional_vf(ot, 0.5, np.array([0.5]), np.array([1.0])), [1.0])


def test_singular_std_raises():
    with pytest.raises(SingularPathError):
        OTPath(sigma_min=0.0).conditional_vf(1.0, np.zeros(2), np.ones(2))
    with pytest.raises(SingularPathError):
        PathSchedule.conditional_vf(OTPath(sigma_min=0.0), 1.0, np.zeros(2), np.ones(2))
    with pytest.raises(SingularPathError):
        OTPath(sigma_min=0.0).conditional_score(1.0, np.zeros(2), np.ones(2))


@pytest.mark.parametrize("sch", SCHEDULES, ids=ids)
@given(st.floats(1e-5, 0.98), point, point)
def test_flow_vf_consistency(sch, t, x0, x1):
    h = 1e-5
    fd = (sch.conditional_flow(t + h, x0, x1) - sch.conditional_flow(t - h, x0, x1)) / (2 * h)
    u = sch.conditional_vf(t, sch.conditional_flow(t, x0, x1), x1)
    assert np.max(np.abs(fd - u)) <= 1e-6 * max(np.max(np.abs(u)), 1e-3)


def test_vp_flow_vf_near_data_end():
    # the h = 1e-5 stencil is too coarse within ~1e-2 of the truncated end; scale it to 1 - t
    vp = VPPath()
    rng = np.random.default_rng(0)
    for t in 1.0 - np.geomspace(1e-2, 2e-5, 20):
        x0, x1 = rng.standard_normal(2), rng.standard_normal(2)
        h = 1e-3 * (1.0 - t)
        fd = (vp.conditional_flow(t + h, x0, x1) - vp.conditional_flow(t - h, x0, x1)) / (2 * h)
        u = vp.conditional_vf(t, vp.conditional_flow(t, x0, x1), x1)
        assert np.max(np.abs(fd - u)) <= 1e-6 * np.max(np.abs(u))


@pytest.mark.parametrize("sch", SCHEDULES[:3], ids=ids[:3])
@given(st.floats(0, 0.99999), point.map(lambda p: 3 * p), point)
def test_dual_formula_agreement(sch, t, x, x1):
    a = sch.closed_form_vf(t, x, x1)
    b = PathSchedule.conditional_vf(sch, t, x, x1)
    assert np.max(np.abs(a - b)) <= 1e-12 * max(np.max(np.abs(b)), 1e-300)


@given(point, point)
def test_ot_straight_line(x0, x1):
    ot = OTPath()
    vs = [ot.conditional_vf(t, ot.conditional_flow(t, x0, x1), x1) for t in np.linspace(0, 0.99, 9)]
    scale = max(1.0, np.max(np.abs(vs[0])))
    for v in vs:
        np.testing.assert_allclose(v, vs[0], rtol=0, atol=1e-12 * scale)
    # at t = 1 rounding in x - mu is amplified by 1 / sigma_min
    v1 = ot.conditional_vf(1.0, ot.conditional_flow(1.0, x0, x1), x1)
    np.testing.assert_allclose(v1, vs[0], rtol=0, atol=1e-15 * scale * (1 + np.max(np.abs(x1))) / ot.sigma_min)
    np.testing.assert_allclose(vs[0], ot.target(x0, x1), rtol=0, atol=1e-13)


@given(point, point)
def test_ot_separable(x, x1):
    ot = OTPath(sigma_min=0.01)
    c = 1 - ot.sigma_min
    hs = [ot.conditional_vf(t, x, x1) * (1 - c * t) for t in np.linspace(0, 1, 9)]
    for h in hs:
        np.testing.assert_allclose(h, hs[0], rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(hs[0]))))


@pytest.mark.parametrize("sch", SCHEDULES[:3], ids=ids[:3])
def test_pushforward_moments(sch):
    n = 100_000
    rng = np.random.default_rng(3)
    x1 = np.array([0.4, -0.9])
    for t in (0.2, 0.6, 0.95):
        xt = sch.conditional_flow(t, rng.standard_normal((n, 2)), x1)
        mu, sigma, _, _ = sch.mean_std(t, x1)
        assert np.all(np.abs(xt.mean(0) - mu) <= 3 * sigma / np.sqrt(n))
        assert np.all(np.abs(xt.std(0) - sigma) <= 3 * sigma / np.sqrt(2 * n))


@pytest.mark.parametrize("sch", SCHEDULES, ids=ids)
def test_std_positive_on_domain(sch):
    t = np.linspace(0, sch.t_max, 1001)
    assert np.all(sch.mean_std(t, np.zeros((1001, 2)))[1] > 0)


def test_boundary_conditions():
    x1 = np.array([1.5, -0.5])
    ot = OTPath()
    mu0, s0, _, _ = ot.mean_std(0.0, x1)
    mu1, s1, _, _ = ot.mean_std(1.0, x1)
    assert np.all(mu0 == 0) and s0 == 1.0
    np.testing.assert_array_equal(mu1, x1)
    assert s1 == pytest.approx(ot.sigma_min, rel=1e-10)
    vp = VPPath()
    mu1, s1, _, _ = vp.mean_std(vp.t_max, x1)
    assert np.max(np.abs(mu1 - x1)) < 1e-5 and s1 < 1.5e-3


# score

@pytest.mark.parametrize("sch", SCHEDULES, ids=ids)
def test_score_vanishes_at_mean(sch):
    x1 = np.array([0.7, 0.2])
    mu = sch.mean_std(0.4, x1)[0]
    np.testing.assert_array_equal(sch.conditional_score(0.4, mu, x1), [0.0, 0.0])


def test_vp_noise_end_score_is_standard_normal():
    s = VPPath().conditional_score(0.0, np.array([1.0, 0.0]), np.array([0.3, -0.4]))
    np.testing.assert_allclose(s, [-1.0, 0.0], atol=1e-2)


def test_gaussian_score_value():
    ve = VEPath()
    t = 1 - np.log(2 / 0.01) / np.log(50 / 0.01)  # sigma_t = 2
    assert ve.mean_std(t, np.zeros(1))[1] == pytest.approx(2.0, rel=1e-12)
    np.testing.assert_allclose(ve.conditional_score(t, np.array([2.0]), np.zeros(1)), [-0.5], rtol=1e-12)


@pytest.mark.parametrize("sch", SCHEDULES[:3], ids=ids[:3])
def test_score_is_gradient_of_log_density(sch):
    rng = np.random.default_rng(1)
    x, x1, h = rng.standard_normal(2), rng.standard_normal(2), 1e-5
    fd = [(sch.conditional_log_density(0.5, x + h * e, x1) - sch.conditional_log_density(0.5, x - h * e, x1)) / (2 * h)
          for e in np.eye(2)]
    np.testing.assert_allclose(sch.conditional_score(0.5, x, x1), fd, rtol=1e-6)


# config

@pytest.mark.parametrize("sch", SCHEDULES, ids=ids)
def test_config_round_trip(sch):
    assert schedule_from_config(sch.to_config()) == sch


def test_config_errors():
    with pytest.raises(ValueError):
        schedule_from_config({"kind": "xx"})
    with pytest.raises((ValueError, TypeError)):
        schedule_from_config({"kind": "ot", "sigma": 1})
    with pytest.raises(ValueError):
        OTPath(sigma_min=-1.0)


def test_batched_times():
    ot = OTPath()
    t = np.array([0.0, 0.5, 1.0])
    x0, x1 = np.ones((3, 2)), np.zeros((3, 2))
    out = ot.conditional_flow(t, x0, x1)
    np.testing.assert_allclose(out[:, 0], 1 - (1 - ot.sigma_min) * t)

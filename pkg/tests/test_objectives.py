import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowmatch import autodiff as ad
from flowmatch.model import VectorFieldModel
from flowmatch.objectives import (ParameterizationError, Quadrature, cfm_loss, cfm_loss_conditional,
                                  cfm_loss_quadrature, ddpm_loss, fm_loss_exact, likelihood_vf, make_batch,
                                  noise_to_score, sample_times, sampling_vf, score_to_vf, scoreflow_loss,
                                  scoreflow_weight, sm_loss, to_vector_field)
from flowmatch.oracle import MixtureOracle
from flowmatch.paths import OTPath, VPPath


class Zero:
    def __init__(self, parameterization="vector_field"):
        self.parameterization = parameterization

    def __call__(self, t, x):
        return ad.Tensor(np.zeros_like(np.asarray(x.data if isinstance(x, ad.Tensor) else x)))


class OracleModel:
    def __init__(self, oracle):
        self.oracle = oracle

    def __call__(self, t, x):
        t = np.asarray(t)
        out = np.empty_like(x)
        for tk in np.unique(t):
            m = t == tk
            out[m] = self.oracle.marginal_vf(tk, x[m])
        return ad.Tensor(out)


def _batch(sch, n=4096, d=2, seed=0, x1=None):
    rng = np.random.default_rng(seed)
    x1 = np.zeros((n, d)) if x1 is None else x1
    return make_batch(sch, x1, rng)


def test_zero_model_cfm_loss_is_dimension():
    n, d = 20_000, 3
    b = _batch(OTPath(sigma_min=0.0), n, d)
    loss = float(cfm_loss(Zero(), OTPath(sigma_min=0.0), b).data)
    assert loss == pytest.approx(np.mean(np.sum(b.x0**2, 1)), rel=1e-12)
    assert abs(loss - d) < 3 * np.sqrt(2 * d / n)


def test_zero_model_sm_loss_is_dimension():
    vp = VPPath()
    b = _batch(vp, 20_000, 2, x1=np.random.default_rng(1).standard_normal((20_000, 2)))
    loss = float(sm_loss(Zero("score"), vp, b).data)
    assert loss == pytest.approx(np.mean(np.sum(b.x0**2, 1)), rel=1e-10)


def test_zero_model_ddpm_loss_is_dimension():
    n, d = 20_000, 2
    vp = VPPath()
    b = _batch(vp, n, d)
    loss = float(ddpm_loss(Zero("noise"), vp, b).data)
    assert loss == pytest.approx(np.mean(np.sum(b.x0**2, 1)), rel=1e-14)
    assert abs(loss - d) < 3 * np.sqrt(2 * d / n)


@pytest.mark.parametrize("sch", [OTPath(), VPPath(), OTPath(sigma_min=0.2)], ids=["ot", "vp", "ot0.2"])
def test_two_cfm_forms_agree(sch):
    rng = np.random.default_rng(2)
    b = _batch(sch, 512, 2, x1=rng.standard_normal((512, 2)))
    model = VectorFieldModel(2, widths=(16, 16), seed=3)
    model.params["W2"].data = rng.standard_normal(model.params["W2"].shape) * 0.3
    a = float(cfm_loss(model, sch, b).data)
    c = float(cfm_loss_conditional(model, sch, b).data)
    assert abs(a - c) <= 1e-12 * max(1.0, abs(a))


def test_scoreflow_weight_at_noise_end():
    assert scoreflow_weight(VPPath(), 0.0) == pytest.approx(20.0)
    assert scoreflow_weight(VPPath(), 1.0) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        scoreflow_weight(OTPath(), 0.5)


def test_scoreflow_is_beta_weighted_sm():
    vp = VPPath()
    b = _batch(vp, 256, 2, x1=np.random.default_rng(4).standard_normal((256, 2)))
    model = Zero("score")
    manual = np.mean(vp.beta(1 - b.t) * np.sum(vp.conditional_score(b.t, b.xt, b.x1) ** 2, 1))
    assert float(scoreflow_loss(model, vp, b).data) == pytest.approx(manual, rel=1e-12)


def test_conversions():
    vp = VPPath()
    x = np.array([[1.0, -2.0]])
    t = np.array([0.3])
    np.testing.assert_allclose(to_vector_field("noise", np.zeros((1, 2)), vp, t, x),
                               0.5 * vp.beta(0.7) * x, rtol=1e-15)
    np.testing.assert_array_equal(noise_to_score(np.array([[1.0, 2.0]]), np.array([2.0])), [[-0.5, -1.0]])
    # the true conditional score turned into a field is the conditional field
    x1 = np.array([[0.2, 0.4]])
    s = vp.conditional_score(t, x, x1)
    np.testing.assert_allclose(score_to_vf(s, vp, t, x), vp.conditional_vf(t, x, x1), rtol=1e-10)
    with pytest.raises(ParameterizationError):
        to_vector_field("score", np.zeros((1, 2)), OTPath(), t, x)


@pytest.mark.parametrize("kind", ["score", "noise"])
def test_likelihood_vf_matches_sampling_vf(kind):
    vp = VPPath()
    model = VectorFieldModel(2, widths=(8,), parameterization=kind, seed=0)
    model.params["W1"].data = np.random.default_rng(5).standard_normal(model.params["W1"].shape)
    x = np.random.default_rng(6).standard_normal((5, 2))
    a = sampling_vf(model, vp)(0.4, x)
    b = likelihood_vf(model, vp)(0.4, ad.Tensor(x)).data
    np.testing.assert_allclose(a, b, rtol=1e-13)


def test_parameterization_mismatch():
    b = _batch(VPPath(), 8, 2)
    with pytest.raises(ParameterizationError):
        cfm_loss(Zero("score"), VPPath(), b)
    with pytest.raises(ParameterizationError):
        ddpm_loss(Zero(), VPPath(), b)


@given(st.integers(1, 200), st.booleans(), st.integers(0, 100))
def test_sample_times_range(n, stratified, seed):
    t = sample_times(n, np.random.default_rng(seed), 0.9, stratified)
    assert t.shape == (n,) and np.all((t >= 0) & (t <= 0.9))


def test_stratified_times_cover_strata():
    t = sample_times(100, np.random.default_rng(0), 1.0, stratified=True)
    assert np.array_equal(np.sort(np.floor(t * 100)), np.arange(100))


# exact FM against the oracle

def _small_quad(data, sch, n_times=11, n_space=31):
    return Quadrature.build(MixtureOracle(data, sch), n_times=n_times, n_space=n_space, bound=4.0)


def test_fm_exact_vanishes_at_oracle():
    quad = _small_quad(np.array([[1.0, 0.5], [-1.0, 0.0]]), OTPath(sigma_min=0.05))
    assert float(fm_loss_exact(OracleModel(quad.oracle), quad).data) <= 1e-20


def test_single_point_fm_equals_cfm():
    quad = _small_quad(np.array([[0.7, -0.3]]), OTPath(sigma_min=0.1))
    model = VectorFieldModel(2, widths=(8, 8), seed=1)
    model.params["W2"].data = np.random.default_rng(1).standard_normal(model.params["W2"].shape)
    a = float(fm_loss_exact(model, quad).data)
    b = float(cfm_loss_quadrature(model, quad).data)
    assert a == pytest.approx(b, rel=1e-12)


def test_fm_and_cfm_gradients_match():
    data = np.array([[1.0, 1.0], [-1.0, 1.0], [0.5, -1.0], [-0.5, -0.5]])
    quad = _small_quad(data, OTPath(sigma_min=0.05), n_times=21, n_space=61)
    assert quad.check() == pytest.approx(1.0, abs=1e-2)
    model = VectorFieldModel(2, widths=(16, 16), seed=2)
    model.params["W2"].data = np.random.default_rng(2).standard_normal(model.params["W2"].shape)
    leaves = list(model.params.values())
    g_fm = ad.grad(fm_loss_exact(model, quad), leaves)
    g_cfm = ad.grad(cfm_loss_quadrature(model, quad), leaves)
    flat = lambda gs: np.concatenate([g.ravel() for g in gs])
    a, b = flat(g_fm), flat(g_cfm)
    assert np.linalg.norm(a - b) <= 1e-9 * np.linalg.norm(a)
    # the losses themselves differ by a parameter-free constant
    assert float(cfm_loss_quadrature(model, quad).data) > float(fm_loss_exact(model, quad).data)


def test_quadrature_dimension_limit():
    with pytest.raises(ValueError):
        Quadrature.build(MixtureOracle(np.zeros((1, 3)), OTPath()))


def test_under_resolved_quadrature_warns():
    quad = Quadrature.build(MixtureOracle(np.array([[3.5, 3.5]]), OTPath(sigma_min=0.01)),
                            n_times=5, n_space=9, bound=2.0)
    with pytest.warns(UserWarning, match="under-resolved"):
        quad.check()

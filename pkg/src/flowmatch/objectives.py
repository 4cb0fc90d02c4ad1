"""Regression losses for training vector-field, score and noise models.

A model is any callable ``model(t, x)`` returning a Tensor (or an array,
which is treated as a constant). Its output type is read from an optional
``parameterization`` attribute and defaults to ``"vector_field"``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .oracle import MixtureOracle
from .paths import OTPath, PathSchedule, VPPath


class ParameterizationError(ValueError):
    """The model's output type does not fit the requested loss or conversion."""


def _require(model, kind: str) -> None:
    got = getattr(model, "parameterization", "vector_field")
    if got != kind:
        raise ParameterizationError(f"loss expects a {kind} model, got {got}")


@dataclass
class LossBatch:
    t: np.ndarray   # (B,)
    x0: np.ndarray  # (B, d) noise
    x1: np.ndarray  # (B, d) data
    xt: np.ndarray  # (B, d) psi_t(x0)

    def __len__(self) -> int:
        return len(self.t)


def sample_times(n: int, rng: np.random.Generator, t_max: float = 1.0,
                 stratified: bool = False) -> np.ndarray:
    """Uniform times on ``[0, t_max]``; optionally one per stratum with antithetic pairs."""
    if not stratified:
        return rng.uniform(0.0, 1.0, n) * t_max
    u = (np.arange(n) + rng.uniform(0.0, 1.0, n)) / n
    half = n // 2
    u[half:2 * half] = 1.0 - u[:half]
    return rng.permutation(u) * t_max


def make_batch(schedule: PathSchedule, x1: np.ndarray, rng: np.random.Generator,
               stratified: bool = False) -> LossBatch:
    """Draw ``t`` and ``x0`` for a batch of data points and place them on the path."""
    x1 = np.asarray(x1, dtype=np.float64)
    n = len(x1)
    t = sample_times(n, rng, schedule.t_max, stratified)
    x0 = rng.standard_normal(x1.shape)
    return LossBatch(t, x0, x1, schedule.conditional_flow(t, x0, x1))


def _mean_sq(pred, target, weight=None) -> ad.Tensor:
    per = ad.squared_l2(ad.sub(pred, target), axis=-1)
    if weight is not None:
        per = ad.mul(per, np.asarray(weight, dtype=np.float64))
    return ad.mean(per)


def cfm_target(schedule: PathSchedule, batch: LossBatch) -> np.ndarray:
    """``d/dt psi_t(x0)``; for the OT path exactly ``x1 - (1 - sigma_min) x0``."""
    if isinstance(schedule, OTPath):
        return schedule.target(batch.x0, batch.x1)
    return schedule.flow_velocity(batch.t, batch.x0, batch.x1)


def cfm_loss(model, schedule: PathSchedule, batch: LossBatch) -> ad.Tensor:
    """Mean of ``|v_t(psi_t(x0)) - d/dt psi_t(x0)|^2`` over the batch."""
    _require(model, "vector_field")
    return _mean_sq(model(batch.t, batch.xt), cfm_target(schedule, batch))


def cfm_loss_conditional(model, schedule: PathSchedule, batch: LossBatch) -> ad.Tensor:
    """Same loss written with the conditional field evaluated at the sampled ``x``."""
    _require(model, "vector_field")
    target = schedule.conditional_vf(batch.t, batch.xt, batch.x1)
    return _mean_sq(model(batch.t, batch.xt), target)


def sm_weight(schedule: PathSchedule, t, x1) -> np.ndarray:
    return schedule.mean_std(t, x1)[1] ** 2


def scoreflow_weight(schedule: PathSchedule, t, x1=None) -> np.ndarray:
    """``beta(1 - t)``: the likelihood weighting of the VP path."""
    if not isinstance(schedule, VPPath):
        raise ValueError("ScoreFlow weighting is defined for the VP path only")
    return schedule.beta(1.0 - np.asarray(t, dtype=np.float64))


def sm_loss(model, schedule: PathSchedule, batch: LossBatch, weighting: str = "sm") -> ad.Tensor:
    """Weighted denoising score matching against ``grad log p_t(x | x1)``."""
    _require(model, "score")
    target = schedule.conditional_score(batch.t, batch.xt, batch.x1)
    if weighting == "sm":
        lam = sm_weight(schedule, batch.t, batch.x1)
    elif weighting == "scoreflow":
        lam = scoreflow_weight(schedule, batch.t)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return _mean_sq(model(batch.t, batch.xt), target, lam)


def scoreflow_loss(model, schedule: PathSchedule, batch: LossBatch) -> ad.Tensor:
    return sm_loss(model, schedule, batch, weighting="scoreflow")


def ddpm_loss(model, schedule: PathSchedule, batch: LossBatch) -> ad.Tensor:
    """Noise regression ``|eps_t(psi_t(x0)) - x0|^2``."""
    _require(model, "noise")
    return _mean_sq(model(batch.t, batch.xt), batch.x0)


LOSSES = {
    "cfm": (cfm_loss, "vector_field"),
    "sm": (sm_loss, "score"),
    "scoreflow": (scoreflow_loss, "score"),
    "ddpm": (ddpm_loss, "noise"),
}


# parameterization conversions

def noise_to_score(eps, sigma) -> np.ndarray:
    """``grad log p = -eps / sigma`` for the Gaussian path."""
    return -np.asarray(eps, dtype=np.float64) / np.asarray(sigma, dtype=np.float64)[..., None]


def score_to_vf(score, schedule: VPPath, t, x) -> np.ndarray:
    """Probability-flow field of the reversed VP path: ``T'(1-t)/2 * (x + score)``."""
    dT = schedule.beta(1.0 - np.asarray(t, dtype=np.float64))
    dT = dT[..., None] if np.ndim(dT) else dT
    return 0.5 * dT * (np.asarray(x, dtype=np.float64) + np.asarray(score, dtype=np.float64))


def to_vector_field(kind: str, output, schedule: PathSchedule, t, x) -> np.ndarray:
    """Map a model output of type ``kind`` to the sampling vector field."""
    output = np.asarray(output.data if isinstance(output, ad.Tensor) else output, dtype=np.float64)
    if kind == "vector_field":
        return output
    if not isinstance(schedule, VPPath):
        raise ParameterizationError(f"{kind} -> vector field conversion needs the VP path")
    if kind == "score":
        return score_to_vf(output, schedule, t, x)
    if kind == "noise":
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), np.shape(output)[:-1])
        sigma = schedule.mean_std(t_arr, np.zeros_like(output))[1]
        return score_to_vf(noise_to_score(output, sigma), schedule, t, x)
    raise ParameterizationError(f"unknown parameterization {kind!r}")


def sampling_vf(model, schedule: PathSchedule):
    """Graph-free ``vf(t, x) -> array`` for any trained parameterization."""
    kind = getattr(model, "parameterization", "vector_field")

    def vf(t, x):
        x = np.atleast_2d(x)
        tt = np.full(len(x), float(t)) if np.ndim(t) == 0 else np.asarray(t)
        with ad.no_grad():
            out = model(tt, x)
        return to_vector_field(kind, out, schedule, tt, x)

    return vf


def likelihood_vf(model, schedule: PathSchedule):
    """Differentiable ``vf(t, x: Tensor) -> Tensor`` for likelihood solves (scalar ``t``)."""
    kind = getattr(model, "parameterization", "vector_field")
    if kind == "vector_field":
        return model
    if not isinstance(schedule, VPPath):
        raise ParameterizationError(f"{kind} -> vector field conversion needs the VP path")

    def vf(t, x):
        x = ad.as_tensor(x)
        out = model(t, x)
        if kind == "noise":
            sigma = float(schedule.mean_std(float(t), np.zeros(1))[1])
            out = ad.scale(out, -1.0 / sigma)
        return ad.scale(ad.add(x, out), 0.5 * float(schedule.beta(1.0 - float(t))))

    return vf


# exact FM against the oracle, by quadrature

@dataclass
class Quadrature:
    """Tensor grid over ``(t, x)`` with density-weighted quadrature weights.

    ``weights[k, j]`` is ``p_t(x_j) * dx * dt`` at time ``times[k]``; the
    per-component weights for the conditional loss factor the same way.
    """

    times: np.ndarray
    time_weights: np.ndarray
    points: np.ndarray
    cell: float
    oracle: MixtureOracle

    @classmethod
    def build(cls, oracle: MixtureOracle, n_times: int = 41, n_space: int = 81,
              bound: float = 4.0, t_max: float | None = None) -> Quadrature:
        if oracle.dim > 2:
            raise ValueError("quadrature grids support d <= 2")
        t_max = oracle.schedule.t_max if t_max is None else t_max
        # midpoint rule keeps t strictly inside the path's domain
        edges = np.linspace(0.0, t_max, n_times + 1)
        times = 0.5 * (edges[1:] + edges[:-1])
        tw = np.diff(edges)
        ax = np.linspace(-bound, bound, n_space)
        mesh = np.meshgrid(*([ax] * oracle.dim), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        cell = (ax[1] - ax[0]) ** oracle.dim
        return cls(times, tw, pts, cell, oracle)

    def _arrays(self):
        n_t, n_x = len(self.times), len(self.points)
        T = np.repeat(self.times, n_x)
        X = np.tile(self.points, (n_t, 1))
        return T, X

    def check(self) -> float:
        """Total weight; warns if it strays from the time span by more than 1e-2."""
        total = 0.0
        for k, t in enumerate(self.times):
            total += self.time_weights[k] * self.cell * np.sum(self.oracle.marginal_density(t, self.points))
        span = float(np.sum(self.time_weights))
        if abs(total / span - 1.0) > 1e-2:
            warnings.warn(f"quadrature under-resolved: normalised weight sum {total / span:.4f}")
        return total / span


def _quad_setup(quad: Quadrature):
    o = quad.oracle
    T, X = quad._arrays()
    n_x = len(quad.points)
    marg_w = np.empty(len(T))
    marg_u = np.empty_like(X)
    comp_w, comp_u = [], []
    for k, t in enumerate(quad.times):
        sl = slice(k * n_x, (k + 1) * n_x)
        w_k = quad.time_weights[k] * quad.cell
        comp_w.append(np.exp(o.component_log_density(t, quad.points) + o._log_w) * w_k)
        comp_u.append(o.conditional_fields(t, quad.points))
        marg_w[sl] = np.exp(o.log_density(t, quad.points)) * w_k
        marg_u[sl] = o.marginal_vf(t, quad.points)
    return T, X, marg_w, marg_u, np.concatenate(comp_w), np.concatenate(comp_u)


def fm_loss_exact(model, quad: Quadrature) -> ad.Tensor:
    """Quadrature of ``E_{t, p_t} |v_t(x) - u_t(x)|^2`` using the exact marginal field.

    Normalised by the time span so it estimates the expectation over uniform t.
    """
    _require(model, "vector_field")
    T, X, w, u, _, _ = _quad_setup(quad)
    pred = model(T, X)
    per = ad.squared_l2(ad.sub(pred, u), axis=-1)
    return ad.scale(ad.sum(ad.mul(per, w)), 1.0 / float(np.sum(quad.time_weights)))


def cfm_loss_quadrature(model, quad: Quadrature) -> ad.Tensor:
    """Quadrature of the conditional objective on the same grid as :func:`fm_loss_exact`."""
    _require(model, "vector_field")
    T, X, _, _, cw, cu = _quad_setup(quad)
    pred = model(T, X)
    n = cu.shape[1]
    total = None
    for i in range(n):
        per = ad.squared_l2(ad.sub(pred, cu[:, i, :]), axis=-1)
        term = ad.sum(ad.mul(per, cw[:, i]))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / float(np.sum(quad.time_weights)))

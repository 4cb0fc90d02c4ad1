"""Exact marginal quantities for a small weighted dataset.

For a finite dataset the marginal path is a Gaussian mixture, so the
marginal density, score and vector field are available in closed form.
These serve as ground truth for the flow-matching identities, together with
a finite-difference check of the continuity equation on a grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from .paths import PathSchedule, VEPath, VPPath

MAX_ORACLE_POINTS = 64


class MixtureOracle:
    """Marginal path of ``schedule`` over a weighted point set.

    Parameters
    ----------
    dataset : array_like, shape (n, d)
        Data points, ``n <= 64``.
    schedule : PathSchedule
    weights : array_like, shape (n,), optional
        Mixture weights; uniform when omitted.
    """

    def __init__(self, dataset, schedule: PathSchedule, weights=None):
        data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
        n = data.shape[0]
        if n > MAX_ORACLE_POINTS:
            raise ValueError(f"oracle supports at most {MAX_ORACLE_POINTS} points, got {n}")
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative, one per point, and sum to 1")
        self.dataset = data
        self.weights = w
        self.schedule = schedule
        self._log_w = np.log(np.where(w > 0, w, 1.0)) + np.where(w > 0, 0.0, -np.inf)

    @property
    def dim(self) -> int:
        return self.dataset.shape[1]

    def component_log_density(self, t, x) -> np.ndarray:
        """``log p_t(x | x1_i)`` for every point and data item, shape (N, n)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mu, sigma, _, _ = self.schedule.mean_std(np.full(len(self.dataset), float(t)), self.dataset)
        r2 = np.sum((x[:, None, :] - mu[None, :, :]) ** 2, axis=-1)
        d = self.dim
        return -0.5 * r2 / sigma**2 - d * np.log(sigma) - 0.5 * d * np.log(2 * np.pi)

    def posterior(self, t, x) -> np.ndarray:
        """Posterior weights over data points given ``x`` at time ``t``, shape (N, n)."""
        return softmax(self.component_log_density(t, x) + self._log_w, axis=1)

    def log_density(self, t, x) -> np.ndarray:
        out = logsumexp(self.component_log_density(t, x) + self._log_w, axis=1)
        return out if np.ndim(x) > 1 else out[0]

    def marginal_density(self, t, x) -> np.ndarray:
        return np.exp(self.log_density(t, x))

    def conditional_fields(self, t, x) -> np.ndarray:
        """``u_t(x | x1_i)`` for every point and data item, shape (N, n, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        N, n = len(x), len(self.dataset)
        xr = np.repeat(x, n, axis=0)
        x1r = np.tile(self.dataset, (N, 1))
        u = self.schedule.conditional_vf(np.full(N * n, float(t)), xr, x1r)
        return u.reshape(N, n, self.dim)

    def conditional_scores(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        N, n = len(x), len(self.dataset)
        xr = np.repeat(x, n, axis=0)
        x1r = np.tile(self.dataset, (N, 1))
        s = self.schedule.conditional_score(np.full(N * n, float(t)), xr, x1r)
        return s.reshape(N, n, self.dim)

    def marginal_vf(self, t, x) -> np.ndarray:
        """Posterior-weighted average of the conditional fields."""
        out = np.einsum("nk,nkd->nd", self.posterior(t, x), self.conditional_fields(t, x))
        return out if np.ndim(x) > 1 else out[0]

    def marginal_score(self, t, x) -> np.ndarray:
        out = np.einsum("nk,nkd->nd", self.posterior(t, x), self.conditional_scores(t, x))
        return out if np.ndim(x) > 1 else out[0]

    def sample(self, t, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.dataset), size=n, p=self.weights)
        x0 = rng.standard_normal((n, self.dim))
        return self.schedule.conditional_flow(np.full(n, float(t)), x0, self.dataset[idx])


# continuity equation on a grid

@dataclass(frozen=True)
class GridSpec:
    """Tensor grid over space plus a short stencil of time slices.

    Time slices are ``t_center + k * dt`` for ``k = -(n_times//2) .. n_times//2``.
    The default ``dt`` is small enough that the time stencil error sits far
    below the spatial ``h^2`` term, so refinement isolates the latter.
    """

    lower: tuple = (-3.0, -3.0)
    upper: tuple = (3.0, 3.0)
    points: int | tuple = 129
    t_center: float = 0.5
    n_times: int = 5
    dt: float = 1e-3

    def __post_init__(self):
        pts = (self.points,) * len(self.lower) if np.isscalar(self.points) else tuple(self.points)
        if len(pts) != len(self.lower) or len(self.upper) != len(self.lower):
            raise ValueError("grid bounds and point counts disagree in dimension")
        if min(pts) < 3 or self.n_times < 3:
            raise ValueError("grid too coarse: need at least 3 points per axis and 3 time slices")
        object.__setattr__(self, "points", pts)

    @property
    def spacing(self) -> np.ndarray:
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        return (hi - lo) / (np.asarray(self.points) - 1)

    @property
    def time_step(self) -> float:
        return float(self.dt)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.points)]

    def times(self) -> np.ndarray:
        k = np.arange(self.n_times) - self.n_times // 2
        return self.t_center + k * self.time_step

    def refined(self) -> GridSpec:
        """Halve every spatial spacing."""
        pts = tuple(2 * (n - 1) + 1 for n in self.points)
        return GridSpec(self.lower, self.upper, pts, self.t_center, self.n_times, self.dt)


@dataclass
class ResidualReport:
    times: np.ndarray
    h: float
    dt: float
    max_residual: float
    mean_residual: float
    per_time: list = field(default_factory=list)

    @property
    def h2(self) -> float:
        return self.h**2

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "grid_h", "max_residual", "mean_residual"])
            for t, mx, mn in self.per_time:
                w.writerow([repr(t), repr(self.h), repr(mx), repr(mn)])


def continuity_residual(density: Callable, vf: Callable, grid: GridSpec) -> ResidualReport:
    """Finite-difference residual of ``d/dt p + div(p v)`` on the grid interior.

    ``density(t, X)`` returns ``(N,)`` and ``vf(t, X)`` returns ``(N, d)`` for
    points ``X`` of shape ``(N, d)``. Central differences are used in both
    time and space, so the residual of an exact pair shrinks like ``h^2``.
    """
    d = len(grid.lower)
    if d > 3:
        raise ValueError("grid verification supports d <= 3")
    axes = grid.axes()
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=-1)
    shape = tuple(grid.points)
    hs = grid.spacing
    dt = grid.time_step
    times = grid.times()

    dens = [np.asarray(density(t, X)).reshape(shape) for t in times]
    interior = (slice(1, -1),) * d
    per_time = []
    all_res = []
    for k in range(1, len(times) - 1):
        t = times[k]
        dpdt = (dens[k + 1] - dens[k - 1]) / (2 * dt)
        flux = dens[k][..., None] * np.asarray(vf(t, X)).reshape(shape + (d,))
        div = np.zeros(tuple(n - 2 for n in shape))
        for i in range(d):
            hi = [slice(1, -1)] * d
            lo = [slice(1, -1)] * d
            hi[i] = slice(2, None)
            lo[i] = slice(None, -2)
            div += (flux[tuple(hi) + (i,)] - flux[tuple(lo) + (i,)]) / (2 * hs[i])
        res = np.abs(dpdt[interior] + div)
        per_time.append((float(t), float(res.max()), float(res.mean())))
        all_res.append(res)
    allr = np.concatenate([r.ravel() for r in all_res])
    return ResidualReport(times=times, h=float(np.max(hs)), dt=dt,
                          max_residual=float(allr.max()), mean_residual=float(allr.mean()),
                          per_time=per_time)


def oracle_residual(oracle: MixtureOracle, grid: GridSpec) -> ResidualReport:
    return continuity_residual(oracle.marginal_density, oracle.marginal_vf, grid)


def convergence_ratio(density: Callable, vf: Callable, grid: GridSpec) -> tuple[float, ResidualReport, ResidualReport]:
    """Max-residual ratio between ``grid`` and its refinement (about 4 for O(h^2))."""
    coarse = continuity_residual(density, vf, grid)
    fine = continuity_residual(density, vf, grid.refined())
    return coarse.max_residual / fine.max_residual, coarse, fine


# time reversal

def reversed_vf(vf: Callable) -> Callable:
    """``v~_t(x) = -v_{1-t}(x)``, which generates ``p_{1-t}``."""
    return lambda t, x: -np.asarray(vf(1.0 - t, x))


def reversed_density(density: Callable) -> Callable:
    return lambda t, x: density(1.0 - t, x)


def reversed_vf_check(oracle: MixtureOracle, t, x):
    """Return the reversed field at ``(t, x)`` and the forward field at ``1 - t``."""
    return reversed_vf(oracle.marginal_vf)(t, x), np.asarray(oracle.marginal_vf(1.0 - t, x))


def reversed_residual(oracle: MixtureOracle, grid: GridSpec) -> ResidualReport:
    """Continuity residual of the reversed pair ``(p_{1-t}, -u_{1-t})``."""
    return continuity_residual(reversed_density(oracle.marginal_density),
                               reversed_vf(oracle.marginal_vf), grid)


# probability flow of the underlying diffusion

def probability_flow_vf(schedule: PathSchedule, t, x, x1=None, oracle: MixtureOracle | None = None):
    """Deterministic field of a diffusion path, mapped to noise-to-data time.

    In diffusion time ``s`` (data at 0) the probability-flow field is
    ``w_s(y) = f_s(y) - g_s^2 / 2 * grad log p_s(y)``. Reversing time gives
    ``-w_{1-t}``. The score is the conditional one given ``x1``, or the
    oracle's marginal score when an oracle is passed. Only VP and VE paths
    carry an SDE description.
    """
    if not isinstance(schedule, (VPPath, VEPath)):
        raise NotImplementedError(f"{schedule.kind} path has no diffusion SDE form")
    schedule.check_time(t)
    x = np.asarray(x, dtype=np.float64)
    s = 1.0 - np.asarray(t, dtype=np.float64)
    f_coef, g2 = schedule.sde_coefficients(s)
    f_coef = np.asarray(f_coef)[..., None] if np.ndim(f_coef) else f_coef
    g2 = np.asarray(g2)[..., None] if np.ndim(g2) else g2
    if oracle is not None:
        if np.ndim(t):
            raise ValueError("marginal probability flow takes a scalar t")
        score = oracle.marginal_score(float(np.asarray(t)), x)
    else:
        if x1 is None:
            raise ValueError("need x1 or an oracle")
        scale_, std = schedule.diffusion_marginal(s)
        scale_ = np.asarray(scale_)[..., None] if np.ndim(scale_) else scale_
        std = np.asarray(std)[..., None] if np.ndim(std) else std
        score = -(x - scale_ * np.asarray(x1, dtype=np.float64)) / std**2
    w = f_coef * x - 0.5 * g2 * score
    return -w

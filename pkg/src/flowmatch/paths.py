"""Gaussian conditional probability paths.

A path is a pair of schedules ``mu_t(x1)`` and ``sigma_t(x1)`` with
``p_t(x | x1) = N(x | mu_t(x1), sigma_t(x1)^2 I)``. Time runs from noise at
``t = 0`` to data at ``t = 1``.

Arrays follow one convention throughout: ``t`` is a scalar or a ``(B,)``
vector, points are ``(d,)`` or ``(B, d)``. Per-sample scalars (``sigma``,
``dsigma``) come back with the shape of ``t``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import ClassVar

import numpy as np

DEFAULT_SIGMA_MIN = 1e-5
DEFAULT_EPS = 1e-5


class PathDomainError(ValueError):
    """Time outside the schedule's valid (possibly truncated) domain."""


class SingularPathError(ValueError):
    """The conditional std vanished, so the conditional VF/score is undefined."""


def _col(a):
    """Append a trailing axis to per-sample scalars so they broadcast over d."""
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim else a


class PathSchedule:
    kind: ClassVar[str]
    t_max: float = 1.0

    # subclasses supply the schedules on validated time
    def _alpha_sigma(self, t: np.ndarray):
        """Return ``(a, sigma, da, dsigma)`` with ``mu_t(x1) = a * x1``."""
        raise NotImplementedError

    def check_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.t_max) or not np.all(np.isfinite(t)):
            lo, hi = float(np.min(t)), float(np.max(t))
            raise PathDomainError(
                f"{self.kind} path is defined for t in [0, {self.t_max!r}] "
                f"(data end truncated by eps={1.0 - self.t_max:.3g}); got t in [{lo}, {hi}]")
        return t

    def mean_std(self, t, x1):
        """``(mu, sigma, dmu, dsigma)`` with exact analytic time derivatives."""
        t = self.check_time(t)
        x1 = np.asarray(x1, dtype=np.float64)
        a, sigma, da, dsigma = self._alpha_sigma(t)
        return _col(a) * x1, sigma, _col(da) * x1, dsigma

    def conditional_flow(self, t, x0, x1) -> np.ndarray:
        """``psi_t(x0) = sigma_t * x0 + mu_t``."""
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        if x0.shape[-1:] != x1.shape[-1:]:
            raise ValueError(f"dimension mismatch: x0 {x0.shape} vs x1 {x1.shape}")
        mu, sigma, _, _ = self.mean_std(t, x1)
        return _col(sigma) * x0 + mu

    def flow_velocity(self, t, x0, x1) -> np.ndarray:
        """``d/dt psi_t(x0)``: the regression target of the reparameterized loss."""
        x0 = np.asarray(x0, dtype=np.float64)
        _, _, dmu, dsigma = self.mean_std(t, x1)
        return _col(dsigma) * x0 + dmu

    def conditional_vf(self, t, x, x1) -> np.ndarray:
        """General Gaussian-path field ``(sigma'/sigma)(x - mu) + mu'``."""
        mu, sigma, dmu, dsigma = self.mean_std(t, x1)
        if np.any(np.asarray(sigma) <= 0.0):
            raise SingularPathError(f"{self.kind}: sigma_t <= 0, conditional VF undefined")
        return _col(dsigma / sigma) * (np.asarray(x, dtype=np.float64) - mu) + dmu

    def closed_form_vf(self, t, x, x1) -> np.ndarray:
        """Instance-specific closed form of the conditional VF."""
        raise NotImplementedError

    def conditional_score(self, t, x, x1) -> np.ndarray:
        """``grad_x log p_t(x | x1) = -(x - mu) / sigma^2``."""
        mu, sigma, _, _ = self.mean_std(t, x1)
        if np.any(np.asarray(sigma) <= 0.0):
            raise SingularPathError(f"{self.kind}: sigma_t <= 0, score undefined")
        return -(np.asarray(x, dtype=np.float64) - mu) / _col(sigma) ** 2

    def conditional_log_density(self, t, x, x1) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mu, sigma, _, _ = self.mean_std(t, x1)
        d = x.shape[-1]
        r2 = np.sum((x - mu) ** 2, axis=-1)
        return -0.5 * r2 / sigma**2 - d * np.log(sigma) - 0.5 * d * np.log(2 * np.pi)

    def to_config(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class OTPath(PathSchedule):
    """Linear mean and std: ``mu_t = t x1``, ``sigma_t = 1 - (1 - sigma_min) t``."""

    sigma_min: float = DEFAULT_SIGMA_MIN
    kind: ClassVar[str] = "ot"

    def __post_init__(self):
        if not self.sigma_min >= 0.0:
            raise ValueError("sigma_min must be non-negative")

    def _alpha_sigma(self, t):
        c = 1.0 - self.sigma_min
        return t, 1.0 - c * t, np.ones_like(t), np.full_like(t, -c)

    def conditional_flow(self, t, x0, x1):
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        if x0.shape[-1:] != x1.shape[-1:]:
            raise ValueError(f"dimension mismatch: x0 {x0.shape} vs x1 {x1.shape}")
        t = _col(self.check_time(t))
        return (1.0 - (1.0 - self.sigma_min) * t) * x0 + t * x1

    def closed_form_vf(self, t, x, x1):
        t = _col(self.check_time(t))
        c = 1.0 - self.sigma_min
        den = 1.0 - c * t
        if np.any(den <= 0.0):
            raise SingularPathError("ot: sigma_min = 0 makes the field singular at t = 1")
        return (np.asarray(x1, dtype=np.float64) - c * np.asarray(x, dtype=np.float64)) / den

    def conditional_vf(self, t, x, x1):
        """Closed form; avoids forming ``sigma'/sigma`` and stays exact at ``sigma_min = 0``, ``t < 1``."""
        return self.closed_form_vf(t, x, x1)

    def target(self, x0, x1):
        """Constant-in-time velocity ``x1 - (1 - sigma_min) x0``."""
        return np.asarray(x1, dtype=np.float64) - (1.0 - self.sigma_min) * np.asarray(x0, dtype=np.float64)


@dataclass(frozen=True)
class VPPath(PathSchedule):
    """Reversed variance-preserving diffusion path.

    ``mu_t = alpha_{1-t} x1``, ``sigma_t = sqrt(1 - alpha_{1-t}^2)`` with
    ``alpha_s = exp(-T(s)/2)`` and the linear noise rate
    ``beta(s) = beta_min + s (beta_max - beta_min)``.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    eps: float = DEFAULT_EPS
    kind: ClassVar[str] = "vp"

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max >= self.beta_min):
            raise ValueError("need 0 < beta_min <= beta_max")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")

    @property
    def t_max(self) -> float:
        return 1.0 - self.eps

    def beta(self, s):
        return self.beta_min + np.asarray(s, dtype=np.float64) * (self.beta_max - self.beta_min)

    def T(self, s):
        """Integrated noise rate ``int_0^s beta``."""
        s = np.asarray(s, dtype=np.float64)
        return s * self.beta_min + 0.5 * s * s * (self.beta_max - self.beta_min)

    def _alpha_sigma(self, t):
        s = 1.0 - t
        a = np.exp(-0.5 * self.T(s))
        # 1 - a^2 via expm1 keeps precision near the data end
        var = -np.expm1(-self.T(s))
        sigma = np.sqrt(var)
        b = self.beta(s)
        da = 0.5 * b * a
        dsigma = -0.5 * b * a * a / sigma
        return a, sigma, da, dsigma

    def closed_form_vf(self, t, x, x1):
        t = _col(self.check_time(t))
        T = self.T(1.0 - t)
        dT = self.beta(1.0 - t)
        x = np.asarray(x, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        return -0.5 * dT * (np.exp(-T) * x - np.exp(-0.5 * T) * x1) / (-np.expm1(-T))

    # diffusion-time description (data at s=0, noise at s=1)
    def sde_coefficients(self, s):
        """Linear drift coefficient ``f_s(y) = c y`` and squared diffusion ``g_s^2``."""
        b = self.beta(s)
        return -0.5 * b, b

    def diffusion_marginal(self, s):
        """Scale and std of ``p_s(y | y0) = N(scale * y0, std^2 I)``."""
        T = self.T(s)
        return np.exp(-0.5 * T), np.sqrt(1.0 - np.exp(-T))


@dataclass(frozen=True)
class VEPath(PathSchedule):
    """Reversed variance-exploding path ``N(x1, sigma_{1-t}^2 I)``.

    The diffusion std is the geometric schedule
    ``sigma(s) = sigma_small * (sigma_large / sigma_small) ** s``; its value
    at the noise end is ``sigma_large``, not 1.
    """

    sigma_small: float = 0.01
    sigma_large: float = 50.0
    eps: float = DEFAULT_EPS
    kind: ClassVar[str] = "ve"

    def __post_init__(self):
        if not 0.0 < self.sigma_small < self.sigma_large:
            raise ValueError("need 0 < sigma_small < sigma_large")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")

    @property
    def t_max(self) -> float:
        return 1.0 - self.eps

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_large / self.sigma_small))

    def sigma_diffusion(self, s):
        return self.sigma_small * np.exp(self.log_ratio * np.asarray(s, dtype=np.float64))

    def _alpha_sigma(self, t):
        sigma = self.sigma_diffusion(1.0 - t)
        return np.ones_like(t), sigma, np.zeros_like(t), -self.log_ratio * sigma

    def closed_form_vf(self, t, x, x1):
        t = _col(self.check_time(t))
        s = 1.0 - t
        sig = self.sigma_diffusion(s)
        dsig = self.log_ratio * sig
        return -(dsig / sig) * (np.asarray(x, dtype=np.float64) - np.asarray(x1, dtype=np.float64))

    def sde_coefficients(self, s):
        sig = self.sigma_diffusion(s)
        # g^2 = d/ds sigma(s)^2
        return np.zeros_like(sig), 2.0 * self.log_ratio * sig * sig

    def diffusion_marginal(self, s):
        sig = self.sigma_diffusion(s)
        return np.ones_like(sig), sig


_KINDS = {"ot": OTPath, "vp": VPPath, "ve": VEPath}


def schedule_from_config(cfg: dict) -> PathSchedule:
    """Build a schedule from ``{"kind": ..., **params}``."""
    cfg = dict(cfg)
    try:
        kind = cfg.pop("kind")
        cls = _KINDS[kind]
    except KeyError as err:
        raise ValueError(f"schedule.kind must be one of {sorted(_KINDS)}") from err
    unknown = set(cfg) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown schedule keys for {kind}: {sorted(unknown)}")
    return cls(**cfg)

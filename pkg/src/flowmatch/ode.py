"""ODE integration, divergence estimation and likelihood evaluation.

Vector fields come in two flavours:

* sampling fields ``vf(t, x) -> ndarray`` for :func:`integrate`;
* differentiable fields ``vf(t, x: Tensor) -> Tensor`` for divergences and
  :func:`log_likelihood`, built from :mod:`flowmatch.autodiff` ops.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad

METHODS = ("euler", "midpoint", "rk4", "dopri5")


class StepSizeUnderflow(RuntimeError):
    pass


@dataclass
class SolverCfg:
    method: str = "dopri5"
    steps: int = 100
    atol: float = 1e-5
    rtol: float = 1e-5
    max_nfe: int = 100_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"solver method must be one of {METHODS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("atol and rtol must be positive")

    @classmethod
    def for_nfe(cls, method: str, nfe: int) -> SolverCfg:
        """Fixed-step config spending exactly ``nfe`` evaluations."""
        per = {"euler": 1, "midpoint": 2, "rk4": 4}[method]
        if nfe % per:
            raise ValueError(f"{method} needs an NFE budget divisible by {per}")
        return cls(method=method, steps=nfe // per)


@dataclass
class SolveReport:
    y: np.ndarray
    nfe: int
    accepted: int = 0
    rejected: int = 0
    success: bool = True
    message: str = ""
    ts: np.ndarray | None = None
    ys: np.ndarray | None = None
    step_sizes: list = field(default_factory=list)


class _Counted:
    def __init__(self, f):
        self.f = f
        self.n = 0

    def __call__(self, t, y):
        self.n += 1
        return np.asarray(self.f(t, y), dtype=np.float64)


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_LOW = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B_LOW


def _hermite(t0, y0, f0, t1, y1, f1, t):
    h = t1 - t0
    s = (t - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def _fixed_step(f, y, t0, t1, method, steps, t_eval):
    h = (t1 - t0) / steps
    t = t0
    ts, ys = [t0], [y.copy()]
    for _ in range(steps):
        if method == "euler":
            y = y + h * f(t, y)
        elif method == "midpoint":
            k1 = f(t, y)
            y = y + h * f(t + 0.5 * h, y + 0.5 * h * k1)
        else:
            k1 = f(t, y)
            k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = f(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + h
        if t_eval is not None:
            ts.append(t)
            ys.append(y.copy())
    return y, ts, ys


def _error_norm(err, y_old, y_new, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _dopri5(f, y, t0, t1, atol, rtol, max_nfe, t_eval, report):
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    k1 = f(t0, y)
    # step from the derivative scale only; the second-derivative refinement
    # of the usual heuristic would cost an extra evaluation
    sc = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / sc) ** 2))
    d1 = np.sqrt(np.mean((k1 / sc) ** 2))
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h, span)
    t = t0
    err_prev = 1e-4
    safety, fac_min, fac_max = 0.9, 0.2, 10.0
    beta = 0.04
    alpha = 0.2 - 0.75 * beta
    dense = [(t0, y.copy(), k1.copy())] if t_eval is not None else None
    min_h = 1e-14 * max(1.0, abs(t0), abs(t1))

    while direction * (t1 - t) > 0:
        if f.n + 6 > max_nfe:
            report.success = False
            report.message = f"max NFE {max_nfe} exceeded at t={t:.6g}"
            break
        if h < min_h:
            raise StepSizeUnderflow(f"step size {h:.3g} underflowed at t={t:.6g}")
        last = h >= abs(t1 - t)
        if last:
            h = abs(t1 - t)
        hs = direction * h
        ks = [k1]
        for i in range(1, 7):
            yi = y + hs * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
            ks.append(f(t + _C[i] * hs, yi))
        y_new = y + hs * sum(b * k for b, k in zip(_B, ks) if b != 0.0)
        err = hs * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        en = _error_norm(err, y, y_new, atol, rtol)
        if en <= 1.0:
            t_new = t1 if last else t + hs
            report.accepted += 1
            report.step_sizes.append(h)
            fac = safety * max(en, 1e-10) ** (-alpha) * err_prev**beta
            fac = min(fac_max, max(fac_min, fac))
            err_prev = max(en, 1e-4)
            t, y, k1 = t_new, y_new, ks[6]
            if dense is not None:
                dense.append((t, y.copy(), k1.copy()))
            h = h * fac
        else:
            report.rejected += 1
            h = h * max(fac_min, safety * en ** (-alpha))
    return y, dense


def integrate(vf: Callable, x0, t_span=(0.0, 1.0), cfg: SolverCfg | None = None,
              t_eval=None) -> SolveReport:
    """Solve ``dx/dt = vf(t, x)`` over ``t_span`` from ``x0``.

    The state may be any array shape; the adaptive error norm is the RMS of
    ``err_i / (atol + rtol * max(|y_i|, |y_new_i|))`` over all components.
    ``t_eval`` requests a dense trajectory (cubic Hermite between steps for
    dopri5, exact step values for fixed-step methods on their own grid).
    """
    cfg = cfg or SolverCfg()
    f = _Counted(vf)
    y = np.array(x0, dtype=np.float64)
    t0, t1 = float(t_span[0]), float(t_span[1])
    report = SolveReport(y=y, nfe=0)
    if cfg.method == "dopri5":
        y, dense = _dopri5(f, y, t0, t1, cfg.atol, cfg.rtol, cfg.max_nfe, t_eval, report)
        if t_eval is not None:
            report.ts, report.ys = _interp_dense(dense, np.asarray(t_eval, dtype=np.float64))
    else:
        y, ts, ys = _fixed_step(f, y, t0, t1, cfg.method, cfg.steps, t_eval)
        report.accepted = cfg.steps
        report.step_sizes = [abs(t1 - t0) / cfg.steps] * cfg.steps
        if t_eval is not None:
            report.ts, report.ys = _interp_fixed(ts, ys, np.asarray(t_eval, dtype=np.float64))
    report.y = y
    report.nfe = f.n
    return report


def _interp_dense(dense, t_eval):
    ts = np.array([d[0] for d in dense])
    out = []
    for te in t_eval:
        if len(dense) == 1:
            out.append(dense[0][1])
            continue
        order = np.argsort(ts)
        tsorted = ts[order]
        j = int(np.clip(np.searchsorted(tsorted, te) - 1, 0, len(ts) - 2))
        a, b = dense[order[j]], dense[order[j + 1]]
        out.append(_hermite(a[0], a[1], a[2], b[0], b[1], b[2], te))
    return t_eval, np.stack(out)


def _interp_fixed(ts, ys, t_eval):
    """Linear interpolation between fixed-step nodes (exact at the nodes)."""
    ts = np.asarray(ts)
    ys = np.stack(ys)
    if ts[-1] < ts[0]:
        ts, ys = ts[::-1], ys[::-1]
    flat = ys.reshape(len(ts), -1)
    out = np.stack([np.interp(t_eval, ts, flat[:, j]) for j in range(flat.shape[1])], axis=-1)
    return t_eval, out.reshape((len(t_eval),) + ys.shape[1:])


# divergences

def _as_leaf(x) -> ad.Tensor:
    return ad.Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)), requires_grad=True, check=False)


def divergence_exact(vf: Callable, t, x, return_value: bool = False):
    """Jacobian trace per row of ``x`` via one reverse pass per coordinate."""
    xt = _as_leaf(x)
    out = vf(t, xt)
    d = xt.shape[1]
    div = np.zeros(xt.shape[0])
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        (g,) = ad.grad(ad.sum(ad.mul(out, e)), [xt])
        div += g[:, i]
    return (div, out.data) if return_value else div


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def draw_probes(rng: np.random.Generator, shape, kind: str = "rademacher") -> np.ndarray:
    if kind == "rademacher":
        return rademacher(rng, shape)
    if kind == "gaussian":
        return rng.standard_normal(shape)
    raise ValueError(f"unknown probe distribution {kind!r}")


def divergence_hutchinson(vf: Callable, t, x, z, return_value: bool = False):
    """Mean over probes of ``z^T (Dv) z``; ``z`` is ``(K, B, d)`` or ``(B, d)``."""
    xt = _as_leaf(x)
    out = vf(t, xt)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    est = np.zeros(xt.shape[0])
    for zk in z:
        (g,) = ad.grad(ad.sum(ad.mul(out, zk)), [xt])
        est += np.sum(g * zk, axis=1)
    est /= len(z)
    return (est, out.data) if return_value else est


# likelihood

def standard_normal_logpdf(x) -> np.ndarray:
    x = np.atleast_2d(x)
    d = x.shape[1]
    return -0.5 * np.sum(x * x, axis=1) - 0.5 * d * np.log(2 * np.pi)


@dataclass
class LikelihoodResult:
    logp: np.ndarray
    x0: np.ndarray
    nfe: int
    report: SolveReport


def log_likelihood(vf: Callable, x1, cfg: SolverCfg | None = None, mode: str = "exact",
                   probes: np.ndarray | None = None, rng: np.random.Generator | None = None,
                   probe_kind: str = "rademacher", t_span=(0.0, 1.0)) -> LikelihoodResult:
    """``log p_1(x1)`` of the flow of ``vf`` from a standard-normal prior at ``t_span[0]``.

    Integrates the augmented state ``[x, f]`` in reversed time ``s`` (so
    ``t = t1 - s``) with field ``[-v, div v]`` from ``[x1, 0]``, then returns
    ``log p_0(x(s_end)) - f(s_end)``. In ``"hutchinson"`` mode the divergence
    is replaced by ``z^T Dv z`` with one probe per row held fixed for the solve,
    giving an unbiased estimate.
    """
    cfg = cfg or SolverCfg()
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    B, d = x1.shape
    t_lo, t_hi = float(t_span[0]), float(t_span[1])
    if mode == "hutchinson":
        if probes is None:
            rng = rng or np.random.default_rng()
            probes = draw_probes(rng, (B, d), probe_kind)
        probes = np.asarray(probes, dtype=np.float64).reshape(B, d)
    elif mode != "exact":
        raise ValueError("mode must be 'exact' or 'hutchinson'")

    def aug(s, y):
        y = y.reshape(B, d + 1)
        t = t_hi - s
        if mode == "exact":
            div, v = divergence_exact(vf, t, y[:, :d], return_value=True)
        else:
            div, v = divergence_hutchinson(vf, t, y[:, :d], probes, return_value=True)
        return np.concatenate([-v, div[:, None]], axis=1).ravel()

    y0 = np.concatenate([x1, np.zeros((B, 1))], axis=1).ravel()
    rep = integrate(aug, y0, (0.0, t_hi - t_lo), cfg)
    y = rep.y.reshape(B, d + 1)
    x0, f0 = y[:, :d], y[:, d]
    return LikelihoodResult(standard_normal_logpdf(x0) - f0, x0, rep.nfe, rep)


# dequantized BPD

PIXEL_SHIFT_BITS = 7


def to_model_space(x) -> np.ndarray:
    """Inverse of ``y -> 2^7 (y + 1)``: pixels in [0, 256] to [-1, 1]."""
    return np.asarray(x, dtype=np.float64) / 2.0**PIXEL_SHIFT_BITS - 1.0


def to_pixel_space(y) -> np.ndarray:
    return 2.0**PIXEL_SHIFT_BITS * (np.asarray(y, dtype=np.float64) + 1.0)


def bpd(log_prob: Callable, x, K: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """Importance-weighted dequantized bits per dimension, per example.

    ``log_prob(y)`` is the model log-density on ``[-1, 1]^d`` for a batch
    ``y`` of shape ``(N, d)``. Each example is dequantized ``K`` times with
    ``u ~ U(0, 1)^d``.
    """
    x = np.atleast_2d(np.asarray(x))
    if K < 1:
        raise ValueError("K must be >= 1")
    if np.any(x < 0) or np.any(x > 255) or np.any(np.asarray(x) != np.round(x)):
        raise ValueError("pixels must be integers in [0, 255]")
    rng = rng or np.random.default_rng()
    N, d = x.shape
    u = rng.uniform(0.0, 1.0, (K, N, d))
    y = to_model_space(x[None, :, :] + u).reshape(K * N, d)
    lp = np.asarray(log_prob(y), dtype=np.float64).reshape(K, N)
    iw = logsumexp(lp, axis=0) - np.log(K)
    return -iw / (d * np.log(2.0)) + PIXEL_SHIFT_BITS


def flow_log_prob(vf: Callable, cfg: SolverCfg | None = None, mode: str = "exact",
                  rng: np.random.Generator | None = None, t_span=(0.0, 1.0)) -> Callable:
    """Wrap :func:`log_likelihood` as a ``log_prob(y)`` callable for :func:`bpd`."""
    def log_prob(y):
        return log_likelihood(vf, y, cfg, mode=mode, rng=rng, t_span=t_span).logp
    return log_prob


# exports

def write_trajectories(path, ts, ys) -> None:
    """CSV ``sample_id, t, x0, x1, ...`` from ``ys`` of shape ``(T, N, d)``."""
    ys = np.asarray(ys)
    d = ys.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "t"] + [f"x{i}" for i in range(d)])
        for n in range(ys.shape[1]):
            for k, t in enumerate(ts):
                w.writerow([n, repr(float(t))] + [repr(float(v)) for v in ys[k, n]])


def write_nll_report(path, logp, nfe, mode: str, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_id", "logp", "nfe", "mode", "seed"])
        nfe = np.broadcast_to(np.asarray(nfe), np.shape(logp))
        for i, (lp, n) in enumerate(zip(logp, nfe)):
            w.writerow([i, repr(float(lp)), int(n), mode, seed])

"""Seeded 2D toy datasets and a small quantized dataset for BPD tests."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .ode import to_model_space, to_pixel_space

STREAMS = ("data", "init", "batch", "probes", "dequant")

CHECKER_CELLS = 4
CHECKER_LO, CHECKER_HI = -2.0, 2.0
CHECKER_AREA = 8.0  # eight unit cells of the 4x4 partition

EIGHT_RADIUS = 2.0
EIGHT_STD = 0.1


def substream(root_seed: int, name: str) -> np.random.Generator:
    """PCG64 generator for a named substream of ``root_seed``.

    The child seed sequence is ``SeedSequence(root_seed, spawn_key=(crc32(name),))``,
    so streams are independent of creation order.
    """
    ss = np.random.SeedSequence(root_seed, spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.PCG64(ss))


def rng_for(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


# checkerboard

def checkerboard_cells() -> np.ndarray:
    return np.array([(i, j) for i in range(CHECKER_CELLS) for j in range(CHECKER_CELLS)
                     if (i + j) % 2 == 0])


def checkerboard_cell_index(x) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.floor(x - CHECKER_LO).astype(int)


def checkerboard_inside(x) -> np.ndarray:
    x = np.atleast_2d(x)
    idx = checkerboard_cell_index(x)
    in_box = np.all((x >= CHECKER_LO) & (x < CHECKER_HI), axis=1)
    return in_box & (idx.sum(axis=1) % 2 == 0)


def checkerboard_log_density(x) -> np.ndarray:
    return np.where(checkerboard_inside(x), -np.log(CHECKER_AREA), -np.inf)


def checkerboard_entropy() -> float:
    return float(np.log(CHECKER_AREA))


def sample_checkerboard(n: int, seed=0) -> np.ndarray:
    rng = rng_for(seed)
    cells = checkerboard_cells()
    pick = cells[rng.integers(0, len(cells), n)]
    return CHECKER_LO + pick + rng.uniform(0.0, 1.0, (n, 2))


# eight Gaussians

def eight_centers() -> np.ndarray:
    ang = np.arange(8) * np.pi / 4
    return EIGHT_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def sample_eight_gaussians(n: int, seed=0) -> np.ndarray:
    rng = rng_for(seed)
    c = eight_centers()[rng.integers(0, 8, n)]
    return c + EIGHT_STD * rng.standard_normal((n, 2))


def eight_gaussians_log_density(x) -> np.ndarray:
    x = np.atleast_2d(x)
    diff = x[:, None, :] - eight_centers()[None]
    logc = -0.5 * np.sum(diff**2, -1) / EIGHT_STD**2 - np.log(2 * np.pi * EIGHT_STD**2)
    return logsumexp(logc, axis=1) - np.log(8)


# two moons

MOONS_NOISE = 0.05
MOONS_BOUNDS = ((-1.5, 2.5), (-1.0, 1.5))


def sample_two_moons(n: int, seed=0) -> np.ndarray:
    """Two interleaved half circles with Gaussian jitter clipped to the bounding box."""
    rng = rng_for(seed)
    upper = rng.integers(0, 2, n).astype(bool)
    theta = rng.uniform(0.0, np.pi, n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1) + MOONS_NOISE * rng.standard_normal((n, 2))
    lo = np.array([b[0] for b in MOONS_BOUNDS])
    hi = np.array([b[1] for b in MOONS_BOUNDS])
    return np.clip(pts, lo, hi)


@dataclass(frozen=True)
class ToyDataset:
    kind: str

    SAMPLERS = {"checkerboard": sample_checkerboard, "eight_gaussians": sample_eight_gaussians,
                "two_moons": sample_two_moons}
    DENSITIES = {"checkerboard": checkerboard_log_density,
                 "eight_gaussians": eight_gaussians_log_density}

    def __post_init__(self):
        if self.kind not in self.SAMPLERS:
            raise ValueError(f"dataset kind must be one of {sorted(self.SAMPLERS)}")

    def sample(self, n: int, seed=0) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        return self.SAMPLERS[self.kind](n, seed)

    @property
    def has_density(self) -> bool:
        return self.kind in self.DENSITIES

    def log_density(self, x) -> np.ndarray:
        return self.DENSITIES[self.kind](x)


# quantized synthetic data

QUANT_CENTERS = np.array([-0.4, 0.0, 0.35])
QUANT_STD = 0.08


def quantized_synthetic(d: int, n: int, seed=0, std: float = QUANT_STD,
                        centers=QUANT_CENTERS) -> np.ndarray:
    """Integers in ``{0..255}^d`` from a small Gaussian mixture on [-1, 1]^d.

    Each row picks one center (shared across its coordinates) and adds
    isotropic noise; the result is mapped with ``y -> 2^7 (y + 1)``, rounded
    down and clamped.
    """
    if d > 8:
        raise ValueError("quantized_synthetic supports d <= 8")
    rng = rng_for(seed)
    centers = np.asarray(centers, dtype=np.float64)
    c = centers[rng.integers(0, len(centers), n)][:, None]
    y = c + std * rng.standard_normal((n, d))
    return np.clip(np.floor(to_pixel_space(y)), 0, 255).astype(np.int64)


# CSV dump/load

def dump_csv(path, points, kind: str, seed: int) -> None:
    points = np.asarray(points)
    with open(path, "w", newline="") as fh:
        fh.write(f"# kind={kind},seed={seed},n={len(points)}\n")
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(points.shape[1])])
        for p in points:
            w.writerow([repr(float(v)) for v in p])


def load_csv(path) -> tuple[np.ndarray, dict]:
    lines = Path(path).read_text().splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for item in lines[0][1:].strip().split(","):
            k, v = item.split("=")
            meta[k] = v
        lines = lines[1:]
    rows = [list(map(float, ln.split(","))) for ln in lines[1:] if ln]
    return np.array(rows), {"kind": meta.get("kind"), "seed": int(meta.get("seed", 0)),
                            "n": int(meta.get("n", len(rows)))}


# dataset specs used by run configs

SPEC_KINDS = tuple(ToyDataset.SAMPLERS) + ("standard_normal", "quantized")


def spec_dim(spec: dict) -> int:
    kind = spec.get("kind")
    if kind in ToyDataset.SAMPLERS:
        if spec.get("dim", 2) != 2:
            raise ValueError(f"{kind} is two-dimensional")
        return 2
    if kind not in SPEC_KINDS:
        raise ValueError(f"dataset kind must be one of {list(SPEC_KINDS)}")
    dim = spec.get("dim")
    if not isinstance(dim, int) or dim < 1:
        raise ValueError(f"{kind} needs an integer dim >= 1")
    if kind == "quantized" and dim > 8:
        raise ValueError("quantized supports dim <= 8")
    return dim


def spec_sampler(spec: dict):
    """``sample(n, rng)`` drawing continuous training points for a dataset spec.

    Quantized data is dequantized with uniform noise and mapped to [-1, 1].
    """
    kind = spec["kind"]
    dim = spec_dim(spec)
    if kind in ToyDataset.SAMPLERS:
        ds = ToyDataset(kind)
        return lambda n, rng: ds.sample(n, rng)
    if kind == "standard_normal":
        return lambda n, rng: rng.standard_normal((n, dim))

    def quantized(n, rng):
        x = quantized_synthetic(dim, n, rng)
        return to_model_space(x + rng.uniform(0.0, 1.0, x.shape))
    return quantized


def histogram_tv(samples, reference, bins: int = 32, bounds=(-2.0, 2.0)) -> float:
    """Total-variation distance between 2D histograms on a square box.

    Mass falling outside the box counts as its own bin, so samples that
    leave the data support are penalised.
    """
    edges = np.linspace(bounds[0], bounds[1], bins + 1)
    hs = []
    for pts in (samples, reference):
        pts = np.asarray(pts)
        H, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=[edges, edges])
        H = H / len(pts)
        hs.append(np.append(H.ravel(), 1.0 - H.sum()))
    return float(0.5 * np.sum(np.abs(hs[0] - hs[1])))

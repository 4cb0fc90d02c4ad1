"""Time-conditioned MLP vector fields and their training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

ACTIVATIONS = {"silu": ad.silu, "tanh": ad.tanh, "relu": ad.relu}
PARAMETERIZATIONS = ("vector_field", "score", "noise")
EMBEDDINGS = ("concat", "sinusoidal")

PRESETS = {
    "desk": {"widths": [64, 64, 64], "activation": "silu"},
    "paper-2d": {"widths": [512] * 5, "activation": "silu"},
}


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite; ``last_good`` holds the previous state."""

    def __init__(self, step: int, last_good: dict[str, np.ndarray]):
        super().__init__(f"non-finite loss or parameters at step {step}")
        self.step = step
        self.last_good = last_good


def time_features(t, embedding: str = "concat", frequencies: int = 8) -> np.ndarray:
    """Time conditioning as a ``(B, k)`` feature block."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if embedding == "concat":
        return t[:, None]
    if embedding == "sinusoidal":
        freqs = np.pi * 2.0 ** np.arange(frequencies)
        ang = t[:, None] * freqs[None, :]
        return np.concatenate([t[:, None], np.sin(ang), np.cos(ang)], axis=1)
    raise ValueError(f"unknown time embedding {embedding!r}")


class VectorFieldModel:
    """MLP ``v(t, x; theta)`` on ``[x, phi(t)]`` inputs.

    Hidden layers use Kaiming-style uniform fan-in scaling; the output layer
    starts at zero so the initial field vanishes identically.
    """

    def __init__(self, dim: int, widths=(64, 64, 64), activation: str = "silu",
                 embedding: str = "concat", frequencies: int = 8,
                 parameterization: str = "vector_field", seed: int | np.random.Generator = 0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if embedding not in EMBEDDINGS:
            raise ValueError(f"embedding must be one of {EMBEDDINGS}")
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        self.dim = dim
        self.widths = list(widths)
        self.activation = activation
        self.embedding = embedding
        self.frequencies = frequencies
        self.parameterization = parameterization
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

        n_time = time_features(0.0, embedding, frequencies).shape[1]
        sizes = [dim + n_time] + self.widths + [dim]
        self.params: dict[str, Tensor] = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last:
                W = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / fan_in)
                W = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params[f"W{i}"] = Tensor(W, requires_grad=True)
            self.params[f"b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True)
        self.n_layers = len(sizes) - 1

    @property
    def input_width(self) -> int:
        return self.params["W0"].shape[0]

    def config(self) -> dict:
        return {"dim": self.dim, "widths": self.widths, "activation": self.activation,
                "embedding": self.embedding, "frequencies": self.frequencies,
                "parameterization": self.parameterization}

    @classmethod
    def from_config(cls, cfg: dict, seed=0) -> VectorFieldModel:
        cfg = dict(cfg)
        preset = cfg.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown model preset {preset!r}")
            cfg = {**PRESETS[preset], **cfg}
        return cls(seed=seed, **cfg)

    def forward(self, t, x) -> Tensor:
        """Evaluate the network on a batch; ``x`` may be a tracked Tensor."""
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ad.ShapeError("forward", x.shape, (None, self.dim))
        tf = time_features(t, self.embedding, self.frequencies)
        if tf.shape[0] == 1 and x.shape[0] != 1:
            tf = np.repeat(tf, x.shape[0], axis=0)
        if tf.shape[0] != x.shape[0]:
            raise ad.ShapeError("forward", tf.shape, x.shape)
        act = ACTIVATIONS[self.activation]
        h = ad.concat([x, Tensor(tf, check=False)], axis=1)
        for i in range(self.n_layers):
            h = ad.add(ad.matmul(h, self.params[f"W{i}"]), self.params[f"b{i}"])
            if i < self.n_layers - 1:
                h = act(h)
        return h

    __call__ = forward

    def numpy_vf(self, t, x) -> np.ndarray:
        """Graph-free evaluation for samplers."""
        with ad.no_grad():
            return self.forward(t, np.atleast_2d(x)).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ad.ShapeError(f"load {k}", self.params[k].shape, np.shape(v))
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path, extra_meta: dict | None = None) -> None:
        ad.save_checkpoint(path, self.params, meta={"model": self.config(), **(extra_meta or {})})

    @classmethod
    def load(cls, path) -> VectorFieldModel:
        state, meta = ad.load_checkpoint(path)
        model = cls(**meta["model"])
        model.load_state_dict(state)
        return model


class Adam:
    """Adam with decoupled-free L2 weight decay (the classic formulation)."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr == 0.0:
                continue
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 1000
    batch: int = 256
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_schedule: str = "constant"  # or "cosine"
    checkpoint_every: int = 0
    log_every: int = 0


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "wall_time", "grad_norm"])
            for i, (l, wt, g) in enumerate(zip(self.losses, self.wall_times, self.grad_norms)):
                w.writerow([i, repr(l), f"{wt:.6f}", repr(g)])


def train(model: VectorFieldModel, loss_fn: Callable, sample_batch: Callable,
          cfg: TrainConfig, checkpoint_cb: Callable | None = None) -> TrainResult:
    """Minimise ``loss_fn(model, batch)`` with Adam.

    ``sample_batch(step)`` must return the batch for a given step so that
    runs are reproducible; all randomness is expected to live there.
    """
    opt = Adam(model.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
               weight_decay=cfg.weight_decay)
    names = list(model.params)
    leaves = [model.params[k] for k in names]
    result = TrainResult()
    t_start = time.perf_counter()
    last_good = model.state_dict()
    for step in range(cfg.steps):
        batch = sample_batch(step)
        loss = loss_fn(model, batch)
        value = float(loss.data)
        gs = ad.grad(loss, leaves)
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in gs)))
        if not (np.isfinite(value) and np.isfinite(gnorm)):
            model.load_state_dict(last_good)
            raise TrainingDiverged(step, last_good)
        lr = cfg.lr
        if cfg.lr_schedule == "cosine":
            lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / cfg.steps))
        opt.step(dict(zip(names, gs)), lr=lr)
        if not all(np.all(np.isfinite(p.data)) for p in leaves):
            model.load_state_dict(last_good)
            raise TrainingDiverged(step, last_good)
        last_good = {k: p.data for k, p in model.params.items()}
        result.losses.append(value)
        result.grad_norms.append(gnorm)
        result.wall_times.append(time.perf_counter() - t_start)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f |g| %.3f", step, value, gnorm)
        if checkpoint_cb is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            result.checkpoints.append(checkpoint_cb(step + 1, model))
    return result

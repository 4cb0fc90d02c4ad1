"""Command-line front end: ``python -m flowmatch <command>``.

Commands
--------
train         fit a model from a JSON run config
sample        push noise through a trained field (optionally an NFE sweep)
nll           per-example log-likelihood, or BPD with a dequantization K sweep
verify        run the invariant suite and write a JSON report
trajectories  export sample paths as CSV
raster        density heatmaps as PGM/PPM

Exit codes: 0 ok, 2 config/input error, 3 numeric failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import ode
from .autodiff import load_checkpoint
from .config import ConfigError, RunPaths, load_config, save_config
from .data import SPEC_KINDS, quantized_synthetic, spec_dim, spec_sampler, substream
from .model import TrainConfig, TrainingDiverged, VectorFieldModel, train
from .objectives import LOSSES, likelihood_vf, make_batch, sampling_vf
from .oracle import MixtureOracle
from .paths import PathSchedule, schedule_from_config

log = logging.getLogger("flowmatch")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
DEFAULT_NFE_SWEEP = (4, 8, 10, 20)
DEFAULT_K_SWEEP = (1, 5, 15)


class NumericFailure(RuntimeError):
    pass


# shared helpers

def load_run(path) -> tuple[VectorFieldModel, PathSchedule, dict]:
    """Model, schedule and metadata from a checkpoint written by ``train``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("checkpoint", f"{path} does not exist")
    model = VectorFieldModel.load(path)
    _, meta = load_checkpoint(path)
    return model, schedule_from_config(meta["schedule"]), meta


def _solver(args, default_method="dopri5") -> ode.SolverCfg:
    return ode.SolverCfg(method=args.solver or default_method, steps=getattr(args, "steps_ode", 100),
                         atol=args.atol, rtol=args.rtol)


def _mkdir(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


# train

def run_training(cfg: dict, seed: int, out) -> dict:
    out = _mkdir(out)
    paths = RunPaths(out)
    sch = schedule_from_config(cfg["schedule"])
    dim = spec_dim(cfg["dataset"])
    loss_fn, param = LOSSES[cfg["objective"]]
    m = cfg["model"]
    model = VectorFieldModel(dim, widths=m["widths"], activation=m["activation"],
                             embedding=m["embedding"], frequencies=m.get("frequencies", 8),
                             parameterization=param, seed=substream(seed, "init"))
    o = cfg["optimizer"]
    tcfg = TrainConfig(lr=o["lr"], steps=o["steps"], batch=o["batch"], betas=tuple(o["betas"]),
                       eps=o["eps"], weight_decay=o["weight_decay"], lr_schedule=o["lr_schedule"],
                       checkpoint_every=o["checkpoint_every"], log_every=max(o["steps"] // 20, 1))
    drng, brng = substream(seed, "data"), substream(seed, "batch")
    draw = spec_sampler(cfg["dataset"])

    def sample_batch(step):
        return make_batch(sch, draw(tcfg.batch, drng), brng, o["stratified_t"])

    meta = {"schedule": sch.to_config(), "objective": cfg["objective"], "parameterization": param,
            "dataset": cfg["dataset"], "seed": seed}

    def ckpt(step, mdl):
        p = out / f"checkpoint_{step:07d}.json"
        mdl.save(p, {**meta, "step": step})
        return str(p)

    snapshot = json.loads(json.dumps(cfg))
    snapshot["seed"] = seed
    snapshot["out"] = str(out)
    save_config(snapshot, paths.config)
    try:
        res = train(model, lambda mdl, b: loss_fn(mdl, sch, b), sample_batch, tcfg, ckpt)
    except TrainingDiverged as err:
        model.save(out / "last_good.json", {**meta, "step": err.step})
        raise
    model.save(paths.checkpoint, {**meta, "step": tcfg.steps})
    res.write_csv(paths.losses)
    return {"checkpoint": str(paths.checkpoint), "final_loss": res.losses[-1] if res.losses else None,
            "steps": tcfg.steps}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        if args.steps < 0:
            raise ConfigError("optimizer.steps", "must be >= 0")
        cfg["optimizer"]["steps"] = args.steps
    seed = cfg["seed"] if args.seed is None else args.seed
    out = args.out or cfg["out"]
    info = run_training(cfg, seed, out)
    log.info("trained %d steps, final loss %s -> %s", info["steps"], info["final_loss"], info["checkpoint"])
    return EXIT_OK


# sample

def _budgets(args) -> list:
    if args.solver == "dopri5":
        return [None]
    return list(args.nfe or DEFAULT_NFE_SWEEP)


def cmd_sample(args) -> int:
    model, sch, meta = load_run(args.checkpoint)
    out = _mkdir(args.out)
    vf = sampling_vf(model, sch)
    x0 = substream(args.seed, "sample").standard_normal((args.n, model.dim))
    span = (0.0, sch.t_max)
    summary = []
    for budget in _budgets(args):
        if budget is None:
            cfg = ode.SolverCfg(atol=args.atol, rtol=args.rtol)
            ys, nfes, ok = [], [], []
            for row in x0:
                try:
                    rep = ode.integrate(vf, row[None], span, cfg)
                    ys.append(rep.y[0]), nfes.append(rep.nfe), ok.append(rep.success)
                except (ode.StepSizeUnderflow, FloatingPointError) as err:
                    log.warning("sample failed: %s", err)
                    ys.append(np.full(model.dim, np.nan)), nfes.append(-1), ok.append(False)
            ys, nfes, ok = np.array(ys), np.array(nfes), np.array(ok)
            name, label = "samples_dopri5.csv", "dopri5"
        else:
            try:
                cfg = ode.SolverCfg.for_nfe(args.solver, budget)
            except ValueError as err:
                raise ConfigError("nfe", str(err)) from None
            rep = ode.integrate(vf, x0, span, cfg)
            ys = rep.y
            ok = np.all(np.isfinite(ys), axis=1)
            nfes = np.full(args.n, rep.nfe)
            name, label = f"samples_nfe{budget}.csv", str(budget)
        _write_rows(out / name, ["sample_id", "nfe", "success"] + [f"x{i}" for i in range(model.dim)],
                    [[i, int(n), int(s)] + [_fmt(v) for v in y] for i, (y, n, s) in enumerate(zip(ys, nfes, ok))])
        good = nfes[nfes >= 0]
        summary.append([args.solver, label, _fmt(good.mean() if len(good) else np.nan), int(np.sum(~ok))])
    _write_rows(out / "nfe_summary.csv", ["method", "budget", "mean_nfe", "failures"], summary)
    return EXIT_OK


# nll

def _eval_data(spec: dict, n: int, seed: int) -> np.ndarray:
    rng = substream(seed, "eval")
    if spec["kind"] == "quantized":
        return quantized_synthetic(spec_dim(spec), n, rng)
    return spec_sampler(spec)(n, rng)


def cmd_nll(args) -> int:
    model, sch, meta = load_run(args.checkpoint)
    spec = {"kind": args.dataset, "dim": args.dim or model.dim} if args.dataset != "checkpoint" else meta["dataset"]
    if spec["kind"] not in ("standard_normal", "quantized"):
        spec = {"kind": spec["kind"]}
    try:
        d = spec_dim(spec)
    except ValueError as err:
        raise ConfigError("dataset", str(err)) from None
    if d != model.dim:
        raise ConfigError("dataset", f"data dimension {d} != model dimension {model.dim}")
    out = _mkdir(args.out)
    x = _eval_data(spec, args.n, args.seed)
    vf = likelihood_vf(model, sch)
    cfg = _solver(args)
    span = (0.0, sch.t_max)
    probes = substream(args.seed, "probes")
    summary = {"dataset": spec, "mode": args.mode, "n": args.n, "dim": d, "seed": args.seed,
               "solver": cfg.method, "atol": cfg.atol, "rtol": cfg.rtol}

    if spec["kind"] == "quantized":
        ks = sorted(set(args.k_dequant or DEFAULT_K_SWEEP))
        kmax = ks[-1]
        u = substream(args.seed, "dequant").uniform(0.0, 1.0, (kmax,) + x.shape)
        y = ode.to_model_space(x[None] + u).reshape(-1, d)
        res = ode.log_likelihood(vf, y, cfg, mode=args.mode, rng=probes, t_span=span)
        lp = res.logp.reshape(kmax, len(x))
        from scipy.special import logsumexp
        rows, table = [], []
        for k in ks:
            iw = logsumexp(lp[:k], axis=0) - np.log(k)
            b = -iw / (d * np.log(2.0)) + ode.PIXEL_SHIFT_BITS
            table.append({"K": k, "bpd": float(b.mean()), "stderr": float(b.std(ddof=1) / np.sqrt(len(b)))})
            rows.append([k, _fmt(b.mean()), _fmt(table[-1]["stderr"])])
        _write_rows(out / "bpd_k.csv", ["K", "bpd_mean", "bpd_stderr"], rows)
        logp = logsumexp(lp, axis=0) - np.log(kmax)
        summary["bpd"] = table
    else:
        res = ode.log_likelihood(vf, x, cfg, mode=args.mode, rng=probes, t_span=span)
        logp = res.logp
    if not np.all(np.isfinite(logp)):
        raise NumericFailure("non-finite log-likelihood")
    ode.write_nll_report(out / "nll.csv", logp, res.nfe, args.mode, args.seed)
    nll = -logp
    summary.update({"nll_mean": float(nll.mean()), "nll_stderr": float(nll.std(ddof=1) / np.sqrt(len(nll))) if len(nll) > 1 else 0.0,
                    "nll_per_dim": float(nll.mean() / d), "nfe": int(res.nfe)})
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("mean NLL %.5f +- %.5f (%d NFE)", summary["nll_mean"], summary["nll_stderr"], res.nfe)
    return EXIT_OK


# verify

def cmd_verify(args) -> int:
    from . import verify

    def show(r):
        tol = f"[{r.tolerance[0]}, {r.tolerance[1]}]" if isinstance(r.tolerance, tuple) else f"{r.tolerance:g}"
        crit = f" (criterion {r.criterion})" if r.criterion else ""
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}{crit}: {r.value:.4g} {r.comparison} {tol}  [{r.seconds:.1f}s] {r.detail}",
              flush=True)

    names = set(args.only) if args.only else None
    if names and not names <= set(verify.MANIFEST):
        raise ConfigError("only", f"unknown checks {sorted(names - set(verify.MANIFEST))}")
    t0 = time.perf_counter()
    if args.mutation:
        try:
            ctx = verify.mutation(args.mutation)
        except KeyError as err:
            raise ConfigError("mutation", str(err)) from None
        with ctx:
            results = verify.run_checks(names, args.fail_fast, None if args.quiet else show)
    else:
        results = verify.run_checks(names, args.fail_fast, None if args.quiet else show)
    report = verify.report_json(results, args.mutation)
    report["seconds"] = time.perf_counter() - t0
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2) + "\n")
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed in {report['seconds']:.1f}s")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


# trajectories and rasters

def _field_source(args):
    """``(vf, schedule, dim, density)`` for a checkpoint, an oracle or a single conditional path."""
    if args.checkpoint:
        model, sch, _ = load_run(args.checkpoint)
        return sampling_vf(model, sch), sch, model.dim, None, model
    sch = schedule_from_config({"kind": args.schedule})
    if args.conditional is not None:
        x1 = np.asarray(args.conditional, dtype=np.float64)
        o = MixtureOracle(x1[None], sch)
    else:
        if args.oracle not in SPEC_KINDS:
            raise ConfigError("oracle", f"must be one of {list(SPEC_KINDS)}")
        pts = spec_sampler({"kind": args.oracle, "dim": 2})(args.oracle_points, substream(args.seed, "data"))
        o = MixtureOracle(pts, sch)
    return (lambda t, x: o.marginal_vf(t, x)), sch, o.dim, o.marginal_density, None


def cmd_trajectories(args) -> int:
    vf, sch, dim, _, _ = _field_source(args)
    out = _mkdir(args.out)
    x0 = substream(args.seed, "sample").standard_normal((args.n, dim))
    ts = np.linspace(0.0, sch.t_max, args.times)
    cfg = _solver(args)
    rep = ode.integrate(vf, x0, (0.0, sch.t_max), cfg, t_eval=ts)
    if not np.all(np.isfinite(rep.ys)):
        raise NumericFailure("non-finite trajectory")
    ode.write_trajectories(out / f"trajectories_{sch.kind}.csv", rep.ts, rep.ys)
    return EXIT_OK


def write_pgm(path, img: np.ndarray) -> None:
    """Binary greyscale PGM from an 8-bit array; row 0 is the top of the image."""
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, _ = parts[0], int(parts[1]), int(parts[2]), parts[3]
    data = np.frombuffer(parts[4], dtype=np.uint8)
    return data.reshape((h, w, 3) if magic == b"P6" else (h, w))


def density_image(density: np.ndarray) -> np.ndarray:
    """Scale a ``(ny, nx)`` density (row 0 = lowest y) to 8 bits, top row = highest y."""
    top = float(np.max(density))
    scaled = np.zeros_like(density) if top <= 0 else density / top
    return np.round(255.0 * scaled[::-1]).astype(np.uint8)


def _colour(grey: np.ndarray) -> np.ndarray:
    g = grey.astype(np.float64) / 255.0
    rgb = np.stack([g ** 0.5, g, 0.3 + 0.7 * g ** 2], axis=-1)
    return np.round(255 * np.clip(rgb, 0, 1)).astype(np.uint8)


def cmd_raster(args) -> int:
    vf, sch, dim, density, model = _field_source(args)
    if dim != 2:
        raise ConfigError("raster", f"raster output needs d == 2, got d = {dim}")
    out = _mkdir(args.out)
    lo, hi = args.bounds
    axis = np.linspace(lo, hi, args.size)
    gx, gy = np.meshgrid(axis, axis, indexing="xy")
    X = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    overlay = None
    if args.overlay:
        rows = np.genfromtxt(args.overlay, delimiter=",", names=True)
        overlay = np.stack([rows["x0"], rows["x1"]], axis=-1)
    for t in args.times:
        if density is not None:
            p = density(t, X)
        else:
            res = ode.log_likelihood(likelihood_vf(model, sch), X, _solver(args), t_span=(0.0, t))
            p = np.exp(res.logp)
        img = density_image(p.reshape(args.size, args.size))
        stem = f"density_{sch.kind}_t{t:.3f}"
        write_pgm(out / f"{stem}.pgm", img)
        if args.ppm:
            rgb = _colour(img)
            if overlay is not None:
                col = np.round((overlay[:, 0] - lo) / (hi - lo) * (args.size - 1)).astype(int)
                row = args.size - 1 - np.round((overlay[:, 1] - lo) / (hi - lo) * (args.size - 1)).astype(int)
                keep = (col >= 0) & (col < args.size) & (row >= 0) & (row < args.size)
                rgb[row[keep], col[keep]] = (255, 0, 0)
            write_ppm(out / f"{stem}.ppm", rgb)
    return EXIT_OK


# parser

def _solver_flags(p, default_solver="dopri5"):
    p.add_argument("--solver", choices=ode.METHODS, default=default_solver)
    p.add_argument("--atol", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--ode-steps", dest="steps_ode", type=int, default=100,
                   help="steps for fixed-step solvers")


def _source_flags(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--oracle", help="dataset kind whose samples define a mixture oracle")
    g.add_argument("--conditional", nargs=2, type=float, metavar=("X1", "X2"),
                   help="single data point: conditional path")
    p.add_argument("--oracle-points", type=int, default=16)
    p.add_argument("--schedule", choices=("ot", "vp", "ve"), default="ot")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowmatch", description="Flow matching toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None, help="override optimizer.steps")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--nfe", type=int, nargs="+", help="fixed-step NFE budgets (default 4 8 10 20)")
    common(p)
    _solver_flags(p, "midpoint")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("nll", help="log-likelihood / BPD of held-out data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="checkpoint", choices=("checkpoint",) + SPEC_KINDS)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--mode", choices=("exact", "hutchinson"), default="exact")
    p.add_argument("--k-dequant", type=int, nargs="+", default=None)
    common(p)
    _solver_flags(p)
    p.set_defaults(func=cmd_nll)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--mutation", default=None, help="run under a named mutation fixture")
    p.add_argument("--only", nargs="+", default=None)
    p.add_argument("--fail-fast", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("trajectories", help="export sample paths as CSV")
    _source_flags(p)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--times", type=int, default=21, help="number of equally spaced output times")
    common(p)
    _solver_flags(p)
    p.set_defaults(func=cmd_trajectories)

    p = sub.add_parser("raster", help="density heatmaps (PGM, optional PPM)")
    _source_flags(p)
    p.add_argument("--times", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    p.add_argument("--size", type=int, default=65)
    p.add_argument("--bounds", type=float, nargs=2, default=(-3.0, 3.0))
    p.add_argument("--ppm", action="store_true", help="also write coloured PPM images")
    p.add_argument("--overlay", default=None, help="CSV with x0,x1 columns drawn on the PPM")
    common(p)
    _solver_flags(p)
    p.set_defaults(func=cmd_raster)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(message)s")
    previous = log.level
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as err:
        print(f"error: cannot read input: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, ode.StepSizeUnderflow, NumericFailure, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        log.setLevel(previous)


if __name__ == "__main__":
    sys.exit(main())

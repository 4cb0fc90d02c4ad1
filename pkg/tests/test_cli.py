import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from flowmatch import cli
from flowmatch.autodiff import load_checkpoint
from flowmatch.config import DEFAULTS, ConfigError, load_config, save_config
from flowmatch.data import substream
from flowmatch.model import TrainingDiverged, VectorFieldModel
from flowmatch.ode import standard_normal_logpdf


def _config(tmp_path, **over):
    cfg = {"dataset": {"kind": "checkerboard"}, "model": {"widths": [16, 16]},
           "optimizer": {"steps": 30, "batch": 64}, "out": str(tmp_path / "run")}
    for k, v in over.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _train(tmp_path, name="run", **over):
    out = tmp_path / name
    assert cli.main(["train", "--config", str(_config(tmp_path, **over)), "--out", str(out), "--quiet"]) == 0
    return out


# config

def test_config_round_trip(tmp_path):
    cfg = load_config(_config(tmp_path))
    save_config(cfg, tmp_path / "again.json")
    assert load_config(tmp_path / "again.json") == cfg
    assert cfg["optimizer"]["lr"] == DEFAULTS["optimizer"]["lr"]


def test_config_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"preset": "paper-2d"}}))
    assert load_config(p)["model"]["widths"] == [512] * 5


@pytest.mark.parametrize("bad,key", [
    ({"optimizer": {"learning_rate": 1}}, "optimizer.learning_rate"),
    ({"dataset": {"kind": "mnist"}}, "dataset.kind"),
    ({"dataset": {"kind": "quantized", "dim": 12}}, "dataset.dim"),
    ({"objective": "ddpm"}, "objective"),
    ({"schedule": {"kind": "ot", "sigma_min": -1}}, "schedule"),
    ({"solver": {"method": "heun"}}, "solver.method"),
    ({"colour": "blue"}, "colour"),
])
def test_bad_config_exits_2_naming_key(tmp_path, capsys, bad, key):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(ConfigError):
        load_config(p)
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "x")]) == 2
    assert f"'{key}'" in capsys.readouterr().err


def test_malformed_json_and_missing_files(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{oops")
    assert cli.main(["train", "--config", str(p)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "none.json")]) == 2
    assert cli.main(["sample", "--checkpoint", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


# train

def test_training_is_idempotent(tmp_path):
    a, b = _train(tmp_path, "a"), _train(tmp_path, "b")
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
    ra, rb = _rows(a / "losses.csv"), _rows(b / "losses.csv")
    assert [r["loss"] for r in ra] == [r["loss"] for r in rb] and len(ra) == 30
    assert json.loads((a / "config.json").read_text())["seed"] == 0


def test_zero_steps_is_initialisation(tmp_path):
    out = _train(tmp_path, optimizer={"steps": 0})
    state, meta = load_checkpoint(out / "checkpoint.json")
    init = VectorFieldModel(2, widths=(16, 16), seed=substream(0, "init"))
    for k, v in init.state_dict().items():
        assert np.array_equal(state[k], v)
    assert meta["step"] == 0 and meta["schedule"]["kind"] == "ot"
    assert (out / "losses.csv").read_text().splitlines() == ["step,loss,wall_time,grad_norm"]


def test_divergence_exits_3(tmp_path, monkeypatch, capsys):
    def boom(model, *a, **k):
        raise TrainingDiverged(4, model.state_dict())
    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--config", str(_config(tmp_path)), "--out", str(tmp_path / "d"), "--quiet"]) == 3
    assert (tmp_path / "d" / "last_good.json").exists()
    assert "step 4" in capsys.readouterr().err


# sample

def test_sample_sweep_and_identity_flow(tmp_path):
    out = _train(tmp_path, optimizer={"steps": 0})
    s = tmp_path / "s"
    assert cli.main(["sample", "--checkpoint", str(out / "checkpoint.json"), "--n", "10", "--nfe", "4", "8",
                     "--solver", "midpoint", "--out", str(s), "--quiet"]) == 0
    noise = substream(0, "sample").standard_normal((10, 2))
    for budget in (4, 8):
        rows = _rows(s / f"samples_nfe{budget}.csv")
        assert all(int(r["nfe"]) == budget and r["success"] == "1" for r in rows)
        xs = np.array([[float(r["x0"]), float(r["x1"])] for r in rows])
        np.testing.assert_array_equal(xs, noise)
    summary = _rows(s / "nfe_summary.csv")
    assert [r["budget"] for r in summary] == ["4", "8"] and float(summary[1]["mean_nfe"]) == 8.0
    assert cli.main(["sample", "--checkpoint", str(out / "checkpoint.json"), "--n", "3", "--solver", "dopri5",
                     "--out", str(s), "--quiet"]) == 0
    rows = _rows(s / "samples_dopri5.csv")
    assert len(rows) == 3 and all(r["success"] == "1" for r in rows)


def test_sample_budget_must_fit_method(tmp_path):
    out = _train(tmp_path, optimizer={"steps": 0})
    assert cli.main(["sample", "--checkpoint", str(out / "checkpoint.json"), "--nfe", "7",
                     "--solver", "midpoint", "--out", str(tmp_path / "s"), "--quiet"]) == 2


# nll

def test_nll_of_identity_flow_is_gaussian(tmp_path):
    out = _train(tmp_path, optimizer={"steps": 0})
    n = tmp_path / "n"
    assert cli.main(["nll", "--checkpoint", str(out / "checkpoint.json"), "--dataset", "standard_normal",
                     "--dim", "2", "--n", "300", "--out", str(n), "--quiet"]) == 0
    summary = json.loads((n / "summary.json").read_text())
    x = substream(0, "eval").standard_normal((300, 2))
    rows = _rows(n / "nll.csv")
    np.testing.assert_allclose([float(r["logp"]) for r in rows], standard_normal_logpdf(x), rtol=1e-12)
    assert abs(summary["nll_mean"] - np.log(2 * np.pi * np.e)) < 3 * summary["nll_stderr"]


def test_hutchinson_nll_agrees_with_exact(tmp_path):
    out = _train(tmp_path, optimizer={"steps": 200})
    res = {}
    for mode in ("exact", "hutchinson"):
        d = tmp_path / mode
        assert cli.main(["nll", "--checkpoint", str(out / "checkpoint.json"), "--n", "200", "--mode", mode,
                         "--out", str(d), "--quiet"]) == 0
        res[mode] = np.array([float(r["logp"]) for r in _rows(d / "nll.csv")])
    diff = res["hutchinson"] - res["exact"]
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / np.sqrt(len(diff)) + 1e-6


def test_bpd_sweep_layout(tmp_path):
    out = _train(tmp_path, dataset={"kind": "quantized", "dim": 2}, optimizer={"steps": 0})
    d = tmp_path / "b"
    assert cli.main(["nll", "--checkpoint", str(out / "checkpoint.json"), "--n", "40", "--k-dequant", "1", "4",
                     "--out", str(d), "--quiet"]) == 0
    rows = _rows(d / "bpd_k.csv")
    assert list(rows[0]) == ["K", "bpd_mean", "bpd_stderr"] and [r["K"] for r in rows] == ["1", "4"]
    assert float(rows[1]["bpd_mean"]) <= float(rows[0]["bpd_mean"]) + 3 * float(rows[0]["bpd_stderr"])
    assert [b["K"] for b in json.loads((d / "summary.json").read_text())["bpd"]] == [1, 4]


def test_nll_dimension_mismatch(tmp_path):
    out = _train(tmp_path, optimizer={"steps": 0})
    assert cli.main(["nll", "--checkpoint", str(out / "checkpoint.json"), "--dataset", "standard_normal",
                     "--dim", "3", "--out", str(tmp_path / "n"), "--quiet"]) == 2


# verify

def test_verify_report_schema(tmp_path):
    rep = tmp_path / "r.json"
    assert cli.main(["verify", "--only", "autodiff.gradient_check", "paths.dual_formula",
                     "--out", str(rep), "--quiet"]) == 0
    r = json.loads(rep.read_text())
    assert r["format"] == "flowmatch-verify" and r["version"] == 1 and r["passed"] is True
    assert r["mutation"] is None
    assert {c["name"] for c in r["checks"]} == {"autodiff.gradient_check", "paths.dual_formula"}
    for c in r["checks"]:
        assert {"name", "value", "tolerance", "passed"} <= set(c)


def test_verify_detects_mutation(tmp_path):
    assert cli.main(["verify", "--mutation", "ot-vf-sign-flip", "--only", "paths.dual_formula", "--quiet"]) == 4


def test_verify_unknown_names(tmp_path):
    assert cli.main(["verify", "--only", "no.such.check", "--quiet"]) == 2
    assert cli.main(["verify", "--mutation", "no-such-mutation", "--quiet"]) == 2


# trajectories and rasters

def _traj(path):
    rows = _rows(path)
    ids = np.array([int(r["sample_id"]) for r in rows])
    t = np.array([float(r["t"]) for r in rows])
    x = np.array([[float(r["x0"]), float(r["x1"])] for r in rows])
    return ids, t, x


def test_conditional_ot_trajectories_are_straight(tmp_path):
    assert cli.main(["trajectories", "--conditional", "2", "0", "--n", "5", "--times", "11",
                     "--atol", "1e-10", "--rtol", "1e-10", "--out", str(tmp_path), "--quiet"]) == 0
    ids, t, x = _traj(tmp_path / "trajectories_ot.csv")
    for i in range(5):
        ti, xi = t[ids == i], x[ids == i]
        line = xi[0] + ti[:, None] * (xi[-1] - xi[0])
        assert np.max(np.abs(xi - line)) < 1e-9
        np.testing.assert_allclose(xi[-1], [2.0, 0.0], atol=1e-3)


def test_trajectories_share_noise(tmp_path):
    for sch in ("ot", "vp"):
        assert cli.main(["trajectories", "--oracle", "eight_gaussians", "--oracle-points", "8", "--schedule", sch,
                         "--n", "4", "--times", "5", "--out", str(tmp_path), "--quiet"]) == 0
    a = _traj(tmp_path / "trajectories_ot.csv")
    b = _traj(tmp_path / "trajectories_vp.csv")
    np.testing.assert_array_equal(a[2][a[1] == 0], b[2][b[1] == 0])


def test_raster_orientation(tmp_path):
    assert cli.main(["raster", "--conditional", "1", "1", "--times", "0", "0.9", "--ppm",
                     "--out", str(tmp_path), "--quiet"]) == 0
    img0 = cli.read_pnm(tmp_path / "density_ot_t0.000.pgm")
    assert img0.shape == (65, 65) and np.unravel_index(np.argmax(img0), img0.shape) == (32, 32)
    img1 = cli.read_pnm(tmp_path / "density_ot_t0.900.pgm")
    row, col = np.unravel_index(np.argmax(img1), img1.shape)
    assert col == 42 and row == 64 - 42  # x = y = 0.9: right of centre and above it
    assert cli.read_pnm(tmp_path / "density_ot_t0.900.ppm").shape == (65, 65, 3)


def test_raster_of_checkpoint_at_noise_end(tmp_path):
    out = _train(tmp_path, optimizer={"steps": 0})
    assert cli.main(["raster", "--checkpoint", str(out / "checkpoint.json"), "--times", "0", "--size", "33",
                     "--out", str(tmp_path / "r"), "--quiet"]) == 0
    img = cli.read_pnm(tmp_path / "r" / "density_ot_t0.000.pgm")
    assert np.unravel_index(np.argmax(img), img.shape) == (16, 16) and img.max() == 255


def test_raster_needs_two_dimensions(tmp_path):
    out = _train(tmp_path, dataset={"kind": "standard_normal", "dim": 3}, optimizer={"steps": 0})
    assert cli.main(["raster", "--checkpoint", str(out / "checkpoint.json"), "--out", str(tmp_path / "r"),
                     "--quiet"]) == 2


def test_pnm_round_trip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    cli.write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(cli.read_pnm(tmp_path / "a.pgm"), img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "flowmatch", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "verify" in r.stdout

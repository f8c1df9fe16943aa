import csv
import json

import numpy as np
import pytest

from decil.cli import main
from decil.experiments import ConfigError, ExperimentConfig, apply_overrides, load_config
from decil.models import load_model

FAST_TRAIN = {"sigma": 0.1, "lambda": 1.0, "epochs": 5, "batch_size": 64, "seed": 0,
              "hidden": [16, 16]}


def _config(tmp_path, name="cfg.json", **fields):
    cfg = {"env_id": "sinusoid", "n_traj": 2, "train": dict(FAST_TRAIN), "seeds": [0],
           "output_dir": str(tmp_path / "out")}
    cfg.update(fields)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_data_and_rerun_identical(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    first = (tmp_path / "out" / "dataset.json").read_bytes()
    data = json.loads(first)
    assert sum(len(t) for t in data["trajectories"]) == 120
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "dataset.json").read_bytes() == first
    echo = json.loads((tmp_path / "out" / "config.json").read_text())
    assert echo["resolved"]["n_traj"] == 2
    assert "timestamp" in json.loads((tmp_path / "out" / "metadata.json").read_text())


def test_invalid_env_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path, env_id="cartpole")
    assert main(["gen-data", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "pointmass_crossing" in err and "sinusoid" in err


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", "x.json"])
    assert exc.value.code == 2


@pytest.fixture
def dataset_dir(tmp_path):
    cfg = _config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    return tmp_path, cfg


@pytest.mark.parametrize("kind", ["dynamics", "denoiser", "bc", "noisy_bc", "joint"])
def test_train_outputs(dataset_dir, kind):
    tmp_path, cfg = dataset_dir
    assert main(["train", "--config", str(cfg), "--model-kind", kind]) == 0
    model_file = tmp_path / "out" / f"model_{kind}.json"
    header = json.loads(model_file.read_text())
    expected_kind = kind if kind in ("dynamics", "denoiser") else "baseline"
    assert header["model_kind"] == expected_kind and header["env_id"] == "sinusoid"
    assert {"stats", "cfg", "layer_dims", "weights", "biases"} <= set(header)
    rows = _read_csv(tmp_path / "out" / f"loss_{kind}.csv")
    assert len(rows) == FAST_TRAIN["epochs"]
    model = load_model(model_file)
    if kind in ("bc", "noisy_bc", "joint"):
        assert model.variant == kind
    first = model_file.read_bytes()
    assert main(["train", "--config", str(cfg), "--model-kind", kind]) == 0
    assert model_file.read_bytes() == first


def test_train_without_dataset_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["train", "--config", str(cfg), "--model-kind", "dynamics"]) == 2
    assert "dataset" in capsys.readouterr().err


def _pipeline_config(tmp_path, out):
    policies = [
        {"name": "decil", "kind": "decil", "dynamics": str(out / "model_dynamics.json"),
         "denoiser": str(out / "model_denoiser.json")},
        {"name": "bc", "kind": "baseline", "model": str(out / "model_bc.json")},
    ]
    return _config(tmp_path, "eval.json", noise_levels=[0.0, 0.1, 0.2], n_episodes=5,
                   policies=policies)


def test_evaluate_table(dataset_dir):
    tmp_path, cfg = dataset_dir
    out = tmp_path / "out"
    for kind in ("dynamics", "denoiser", "bc"):
        assert main(["train", "--config", str(cfg), "--model-kind", kind]) == 0
    ecfg = _pipeline_config(tmp_path, out)
    assert main(["evaluate", "--config", str(ecfg)]) == 0
    rows = _read_csv(out / "results.csv")
    assert len(rows) == 2 * 3 * 5
    summary = json.loads((out / "summary.json").read_text())["summary"]
    for s in summary:
        vals = [float(r["total_reward"]) for r in rows
                if r["policy"] == s["policy"] and float(r["noise_sigma"]) == s["noise_sigma"]]
        assert abs(np.mean(vals) - s["mean_reward"]) < 1e-9
    first = (out / "results.csv").read_bytes()
    assert main(["evaluate", "--config", str(ecfg)]) == 0
    assert (out / "results.csv").read_bytes() == first


def test_evaluate_missing_model_exits_2(dataset_dir, capsys):
    tmp_path, _ = dataset_dir
    ecfg = _pipeline_config(tmp_path, tmp_path / "out")
    assert main(["evaluate", "--config", str(ecfg)]) == 2
    assert "model_dynamics.json" in capsys.readouterr().err


def test_fig2_rows(tmp_path):
    cfg = _config(tmp_path, seeds=[0, 1, 2], n_mc=100)
    assert main(["fig2", "--config", str(cfg)]) == 0
    rows = _read_csv(tmp_path / "out" / "fig2.csv")
    data = [r for r in rows if r["status"] != "aggregate"]
    agg = [r for r in rows if r["status"] == "aggregate"]
    assert len(data) == 15 and len(agg) == 5
    for a in agg:
        vals = [float(r["mean_rho"]) for r in data if r["sigma_train"] == a["sigma_train"]]
        assert float(a["mean_rho"]) == pytest.approx(np.mean(vals), abs=1e-12)
        assert int(a["n"]) == 3


def test_ablation_outputs(tmp_path):
    cfg = _config(tmp_path, seeds=[0, 1], noise_levels=[0.0, 0.2], n_episodes=3)
    assert main(["ablation", "--config", str(cfg)]) == 0
    rows = _read_csv(tmp_path / "out" / "ablation_episodes.csv")
    assert len(rows) == 2 * 2 * 2 * 3
    assert {r["train_seed"] for r in rows} == {"0", "1"}
    summary = json.loads((tmp_path / "out" / "ablation_summary.json").read_text())["summary"]
    assert {(s["policy"], s["noise_sigma"]) for s in summary} == {
        (p, n) for p in ("decil", "joint") for n in (0.0, 0.2)}


def test_audit_sections(tmp_path):
    cfg = _config(tmp_path, n_probe=5, n_chain_probe=5, quadratic_n_mc=100_000,
                  fig1={"grid": [0, 6.3, -1.5, 1.5], "resolution": 4, "p0": 1.0,
                        "offset": 0.5, "steps": 3})
    assert main(["audit", "--config", str(cfg)]) == 0
    report = json.loads((tmp_path / "out" / "audit.json").read_text())
    assert {"jacobians", "jacobian_norm_audit", "quadratic_loss_check", "error_bound_audit",
            "vector_field_export"} <= set(report)
    assert all(q["relative_error"] < 0.05 for q in report["quadratic_loss_check"])
    assert report["jacobians"]["0"]["all_pass"]
    assert report["vector_field_export"]["0"]["n_rows"] == 16 + 2 * 4


def test_seed_and_override_flags(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "other"
    assert main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(out),
                 "--override", "n_traj=1"]) == 0
    data = json.loads((out / "dataset.json").read_text())
    assert data["seed"] == 7 and len(data["trajectories"]) == 1
    echo = json.loads((out / "config.json").read_text())
    assert "n_traj=1" in echo["overrides"] and echo["resolved"]["seeds"] == [7]


def test_apply_overrides_nested():
    raw = {"train": {"sigma": 0.1}, "n_traj": 3}
    out = apply_overrides(raw, ["train.sigma=0.3", "n_traj=5", "env_id=pointmass_crossing"])
    assert out == {"train": {"sigma": 0.3}, "n_traj": 5, "env_id": "pointmass_crossing"}
    assert raw["train"]["sigma"] == 0.1
    with pytest.raises(ConfigError):
        apply_overrides(raw, ["novalue"])


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=[1, 1])
    with pytest.raises(ConfigError):
        ExperimentConfig(noise_levels=[0.2, 0.1])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    cfg, echo = load_config(_config(tmp_path))
    assert cfg.train.epochs == 5 and echo["resolved"]["train"]["lambda"] == 1.0

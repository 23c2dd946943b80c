"""End-to-end pipeline through the command-line entry point.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

import json

import numpy as np
import pytest
import yaml

from graphdyn import cli, config

FAST_SPRING = {
    "system": {"kind": "spring", "n": 3},
    "data": {"n_traj": 3, "points_per_traj": 10},
    "model": {"variant": "conserving"},
    "train": {"max_epochs": 5},
    "eval": {"horizon": 1.0, "n_init": 2},
    "seed": 0,
}


def _write_cfg(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh)
    return str(path)


def _run(*argv):
    return cli.main(list(argv))


class TestConfig:
    def test_defaults_roundtrip(self, tmp_path):
        cfg = config.load_config(_write_cfg(tmp_path, {}))
        assert cfg.system.kind == "pendulum" and cfg.seed == 0

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(config.ConfigError):
            config.load_config(_write_cfg(tmp_path, {"sytem": {}}))

    def test_unknown_nested_key(self, tmp_path):
        with pytest.raises(config.ConfigError):
            config.load_config(_write_cfg(tmp_path, {"model": {"varian": "graph"}}))

    def test_bad_variant(self, tmp_path):
        with pytest.raises(config.ConfigError):
            config.load_config(_write_cfg(tmp_path, {"model": {"variant": "cnn"}}))

    def test_bad_system(self, tmp_path):
        with pytest.raises(config.ConfigError):
            config.load_config(_write_cfg(tmp_path, {"system": {"kind": "gas"}}))

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("system: [unclosed\n")
        with pytest.raises(config.ConfigError):
            config.load_config(str(path))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """generate -> train -> evaluate once; commands assert on artifacts."""
    tmp = tmp_path_factory.mktemp("pipeline")
    cfg = _write_cfg(tmp, FAST_SPRING)
    out = str(tmp / "out")
    assert _run("generate", "--config", cfg, "--out", out) == 0
    assert _run("train", "--config", cfg, "--out", out,
                "--dataset", f"{out}/dataset.json") == 0
    assert _run("evaluate", "--config", cfg, "--out", out,
                "--checkpoint", f"{out}/checkpoint.json") == 0
    return tmp, cfg, out


class TestPipeline:
    def test_generate_artifacts(self, run_dir):
        _, _, out = run_dir
        manifest = json.load(open(f"{out}/manifest.json"))
        assert manifest["n_samples"] == 30
        assert manifest["n_train"] + manifest["n_val"] == 30
        assert "dataset.json" in manifest["sha256"]

    def test_train_artifacts(self, run_dir):
        _, _, out = run_dir
        report = json.load(open(f"{out}/train_report.json"))
        assert report["epochs"] <= 5
        ckpt = json.load(open(f"{out}/checkpoint.json"))
        assert ckpt["variant"] == "conserving"
        assert (len(open(f"{out}/loss_curve.csv").read().splitlines())
                == report["epochs"] + 1)

    def test_evaluate_artifacts(self, run_dir):
        _, _, out = run_dir
        doc = json.load(open(f"{out}/report.json"))
        assert doc["metadata"]["variant"] == "conserving"
        assert set(doc["targets"]) == {"3"}
        for m in ("re", "ee", "me"):
            assert (tmp := f"{out}/eval_n3_{m}.csv")
            header = open(tmp).readline().strip()
            assert header == "t,metric,lo,hi"

    def test_report_command(self, run_dir, capsys):
        tmp, cfg, out = run_dir
        assert _run("report", "--config", cfg, "--out", out) == 0
        lines = open(f"{out}/summary.csv").read().strip().splitlines()
        assert lines[0] == "target_n,metric,geomean"
        assert len(lines) == 4  # one target x three metrics

    def test_rollout_oracle_bitwise(self, run_dir, tmp_path):
        _, cfg, _ = run_dir
        out = str(tmp_path / "ro")
        assert _run("rollout", "--config", cfg, "--out", out, "--oracle") == 0
        pred = json.load(open(f"{out}/predicted.json"))
        truth = json.load(open(f"{out}/truth.json"))
        assert pred == truth

    def test_rollout_with_checkpoint(self, run_dir, tmp_path):
        tmp, cfg, out = run_dir
        out2 = str(tmp_path / "ro2")
        assert _run("rollout", "--config", cfg, "--out", out2,
                    "--checkpoint", f"{out}/checkpoint.json") == 0
        pred = json.load(open(f"{out2}/predicted.json"))
        assert pred["spec"]["n"] == 3

    def test_resume(self, run_dir):
        _, cfg, out = run_dir
        before = json.load(open(f"{out}/train_report.json"))["epochs"]
        assert _run("train", "--config", cfg, "--out", out,
                    "--dataset", f"{out}/dataset.json", "--resume") == 0
        after = json.load(open(f"{out}/train_report.json"))["epochs"]
        assert after > 0 and after >= before

    def test_seed_override_changes_dataset(self, run_dir, tmp_path):
        _, cfg, out = run_dir
        out2 = str(tmp_path / "gen2")
        assert _run("generate", "--config", cfg, "--out", out2,
                    "--seed", "99") == 0
        a = json.load(open(f"{out}/dataset.json"))
        b = json.load(open(f"{out2}/dataset.json"))
        assert a["q"] != b["q"]


class TestExitCodes:
    def test_missing_dataset_flag(self, tmp_path):
        cfg = _write_cfg(tmp_path, FAST_SPRING)
        assert _run("train", "--config", cfg, "--out", str(tmp_path)) == 2

    def test_bad_config(self, tmp_path):
        cfg = _write_cfg(tmp_path, {"model": {"variant": "cnn"}})
        assert _run("generate", "--config", cfg, "--out", str(tmp_path)) == 2

    def test_missing_config_file(self, tmp_path):
        assert _run("generate", "--config", str(tmp_path / "none.yaml")) == 4

    def test_bad_workers(self, tmp_path):
        cfg = _write_cfg(tmp_path, FAST_SPRING)
        assert _run("generate", "--config", cfg, "--out", str(tmp_path),
                    "--workers", "0") == 2

    def test_system_mismatch(self, tmp_path):
        cfg = _write_cfg(tmp_path, FAST_SPRING)
        out = str(tmp_path / "out")
        assert _run("generate", "--config", cfg, "--out", out) == 0
        other = dict(FAST_SPRING, system={"kind": "spring", "n": 4})
        cfg2 = _write_cfg(tmp_path, other, "cfg2.yaml")
        assert _run("train", "--config", cfg2, "--out", out,
                    "--dataset", f"{out}/dataset.json") == 2

    def test_baseline_zero_shot_rejected(self, tmp_path):
        doc = dict(FAST_SPRING, model={"variant": "mlp"},
                   eval={"horizon": 0.5, "n_init": 2, "targets": [3, 4]})
        cfg = _write_cfg(tmp_path, doc)
        out = str(tmp_path / "out")
        assert _run("generate", "--config", cfg, "--out", out) == 0
        assert _run("train", "--config", cfg, "--out", out,
                    "--dataset", f"{out}/dataset.json") == 0
        assert _run("evaluate", "--config", cfg, "--out", out,
                    "--checkpoint", f"{out}/checkpoint.json") == 2

    def test_numerical_failure(self, tmp_path):
        # coincident spring particles make the force singular -> exit 3
        doc = dict(FAST_SPRING)
        cfg = _write_cfg(tmp_path, doc)
        out = str(tmp_path / "out")
        from graphdyn import physics, training

        spec = physics.spring(3)
        ds = training.generate_dataset(spec, 2, 5, seed=0)
        ds.q[:] = 0.0  # corrupt: every particle at the origin
        training.save_dataset(ds, tmp_path / "bad.json")
        rc = _run("train", "--config", cfg, "--out", out,
                  "--dataset", str(tmp_path / "bad.json"))
        assert rc in (0, 3)  # models without pairwise distances may survive

    def test_checkpoint_variant_mismatch(self, tmp_path):
        cfg = _write_cfg(tmp_path, FAST_SPRING)
        out = str(tmp_path / "out")
        assert _run("generate", "--config", cfg, "--out", out) == 0
        assert _run("train", "--config", cfg, "--out", out,
                    "--dataset", f"{out}/dataset.json") == 0
        other = dict(FAST_SPRING, model={"variant": "graph"})
        cfg2 = _write_cfg(tmp_path, other, "cfg2.yaml")
        assert _run("evaluate", "--config", cfg2, "--out", out,
                    "--checkpoint", f"{out}/checkpoint.json") == 2

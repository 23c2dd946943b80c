"""Command-line pipeline: generate | train | evaluate | rollout | report.

Every command is a deterministic function of (config, input files, seed).
Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, models, physics, training
from .autodiff import AutodiffError
from .config import ConfigError, RunConfig, load_config
from .models import ModelError, TransductivityError
from .physics import PhysicsError
from .training import Hyperparams, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(cfg: RunConfig, override) -> Path:
    out = Path(override) if override else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    spec = cfg.system.to_spec()
    ds = training.generate_dataset(
        spec, cfg.data.n_traj, cfg.data.points_per_traj,
        dt=cfg.data.dt, record_every=cfg.data.record_every, seed=cfg.seed,
    )
    ds_path = out / "dataset.json"
    training.save_dataset(ds, ds_path)
    manifest = {
        "seed": cfg.seed,
        "n_samples": len(ds),
        "n_train": int(len(ds.train_idx)),
        "n_val": int(len(ds.val_idx)),
        "dt_record": ds.dt_record,
        "sha256": {"dataset.json": _sha256(ds_path)},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {ds_path} ({len(ds)} samples)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    if not args.dataset:
        raise ConfigError("train requires --dataset")
    ds = training.load_dataset(args.dataset)
    if ds.spec.kind != cfg.system.kind or ds.spec.n != cfg.system.n:
        raise ConfigError(
            f"dataset system ({ds.spec.kind}, n={ds.spec.n}) does not match "
            f"config ({cfg.system.kind}, n={cfg.system.n})"
        )
    hp = Hyperparams(
        lr=cfg.train.lr, batch_size=cfg.train.batch_size,
        max_epochs=cfg.train.max_epochs, stop_window=cfg.train.stop_window,
        stop_threshold=cfg.train.stop_threshold, seed=cfg.seed,
    )
    initial = None
    prior_epochs = 0
    if args.resume:
        ckpt_path = out / "checkpoint.json"
        if not ckpt_path.exists():
            raise ConfigError(f"--resume given but {ckpt_path} does not exist")
        initial = models.load_checkpoint(ckpt_path)
        if initial.variant != cfg.model.variant:
            raise ConfigError(
                f"checkpoint variant {initial.variant!r} != config {cfg.model.variant!r}"
            )
        report_path = out / "train_report.json"
        if report_path.exists():
            with open(report_path) as fh:
                prior_epochs = int(json.load(fh).get("epochs", 0))
    params, report = training.train(
        cfg.model.variant, ds, hp,
        embed_dim=cfg.model.embed_dim, hidden=cfg.model.hidden,
        msg_layers=cfg.model.msg_layers, baseline_hidden=cfg.model.baseline_hidden,
        initial=initial,
    )
    models.save_checkpoint(params, out / "checkpoint.json")
    report.epochs += prior_epochs
    with open(out / "train_report.json", "w") as fh:
        json.dump(report.to_json(), fh)
    report.write_csv(out / "loss_curve.csv")
    print(
        f"trained {cfg.model.variant} for {report.epochs} epochs "
        f"(stop: {report.stop_reason}, best val {report.best_val_loss:.6g})"
    )
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    if not args.checkpoint:
        raise ConfigError("evaluate requires --checkpoint")
    params = models.load_checkpoint(args.checkpoint)
    if params.variant != cfg.model.variant:
        raise ConfigError(
            f"checkpoint variant {params.variant!r} != config {cfg.model.variant!r}"
        )
    trained_spec = cfg.system.to_spec()
    targets = cfg.eval.targets or [cfg.system.n]
    if params.variant == "mlp":
        if targets != [params.fixed_n]:
            raise TransductivityError(
                f"baseline model only evaluates on its training size n={params.fixed_n}"
            )
        reports = {params.fixed_n: evaluation.evaluate_on_system(
            params, trained_spec, cfg.eval.n_init, cfg.seed, cfg.eval.horizon)}
    else:
        target_specs = [cfg.system.spec_with_n(n) for n in targets]
        reports = evaluation.zero_shot_eval(
            params, trained_spec, target_specs, cfg.eval.n_init, cfg.seed,
            cfg.eval.horizon,
        )
    for n, rep in reports.items():
        for metric in ("re", "ee", "me"):
            evaluation.write_metric_csv(out / f"eval_n{n}_{metric}.csv", rep, metric)
    evaluation.write_report_json(
        out / "report.json", reports,
        metadata={
            "variant": params.variant, "kind": cfg.system.kind,
            "trained_n": cfg.system.n, "seed": cfg.seed,
            "n_init": cfg.eval.n_init,
        },
    )
    print(f"evaluated on sizes {sorted(reports)}; reports in {out}")
    return EXIT_OK


def cmd_rollout(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    spec = cfg.system.to_spec()
    horizon = cfg.eval.horizon or evaluation.default_horizon(spec.kind)
    dt_fine, rec = physics.default_sim_params(spec.kind)
    n_rec = int(round(horizon / (dt_fine * rec)))
    init = physics.random_initial_state(spec, cfg.seed)
    truth = physics.simulate(spec, init, dt_fine, n_rec * rec, rec)
    if args.oracle:
        predicted = physics.simulate(spec, init, dt_fine, n_rec * rec, rec)
    else:
        if not args.checkpoint:
            raise ConfigError("rollout requires --checkpoint (or --oracle)")
        params = models.load_checkpoint(args.checkpoint)
        predicted = evaluation.rollout(params, spec, init, horizon, dt_fine * rec, 1)
    physics.save_trajectory(predicted, out / "predicted.json")
    physics.save_trajectory(truth, out / "truth.json")
    flag = " (truncated)" if predicted.truncated else ""
    print(f"wrote {out}/predicted.json and {out}/truth.json{flag}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    report_path = Path(args.out or cfg.out_dir) / "report.json"
    if args.dataset:  # allow pointing at an arbitrary report file
        report_path = Path(args.dataset)
    with open(report_path) as fh:
        doc = json.load(fh)
    lines = ["target_n,metric,geomean"]
    print(f"{'target':>8} {'metric':>8} {'geomean':>14}")
    for n, rep in sorted(doc["targets"].items(), key=lambda kv: int(kv[0])):
        for metric in ("re", "ee", "me"):
            geo = np.asarray(rep["metrics"][metric]["geo"])
            overall = float(np.exp(np.mean(np.log(geo + evaluation.GEOMEAN_FLOOR))))
            lines.append(f"{n},{metric},{overall!r}")
            print(f"{n:>8} {metric:>8} {overall:>14.6e}")
    with open(out / "summary.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rollout": cmd_rollout,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphdyn",
        description="Learn and evaluate constrained particle dynamics "
                    "with graph neural ODEs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--checkpoint", default=None, help="model checkpoint JSON")
        p.add_argument("--dataset", default=None, help="dataset JSON")
        p.add_argument("--workers", type=int, default=1,
                       help="worker processes (current implementation is sequential)")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from an existing checkpoint in the output dir")
        if name == "rollout":
            p.add_argument("--oracle", action="store_true",
                           help="use the ground-truth acceleration as the model")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, TransductivityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PhysicsError, TrainingError, AutodiffError, ModelError,
            evaluation.EvaluationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

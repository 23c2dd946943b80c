#!/usr/bin/env python3
"""Train every model variant on an n-pendulum and compare rollout errors.

Writes checkpoints, loss curves, and a summary table to the output
directory. Scale knobs default to a laptop-sized run; raise --n-traj,
--max-epochs, and --n-init for a full experiment.
"""

import argparse
import json
from pathlib import Path

from graphdyn import evaluation, models, physics, training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=3, help="number of bobs")
    ap.add_argument("--n-traj", type=int, default=10)
    ap.add_argument("--points-per-traj", type=int, default=100)
    ap.add_argument("--max-epochs", type=int, default=2000)
    ap.add_argument("--n-init", type=int, default=10,
                    help="evaluation rollouts per variant")
    ap.add_argument("--horizon", type=float, default=1.0,
                    help="rollout horizon in seconds")
    ap.add_argument("--variants", nargs="+", default=list(models.VARIANTS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/pendulum_ablation")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = physics.pendulum(args.n)

    print(f"generating {args.n_traj} trajectories x {args.points_per_traj} samples ...")
    ds = training.generate_dataset(spec, args.n_traj, args.points_per_traj,
                                   seed=args.seed)
    training.save_dataset(ds, out / "dataset.json")

    hp = training.Hyperparams(max_epochs=args.max_epochs, seed=args.seed)
    summary = {}
    for variant in args.variants:
        print(f"training {variant} ...")
        params, report = training.train(variant, ds, hp)
        models.save_checkpoint(params, out / f"{variant}.checkpoint.json")
        report.write_csv(out / f"{variant}.loss.csv")
        print(f"  {report.epochs} epochs ({report.stop_reason}), "
              f"best val {report.best_val_loss:.4g}, {report.wall_time:.0f}s")
        rep = evaluation.evaluate_on_system(params, spec, args.n_init,
                                            args.seed, args.horizon)
        summary[variant] = {m: rep.overall_geomean(m) for m in ("re", "ee", "me")}
        evaluation.write_report_json(out / f"{variant}.report.json", {args.n: rep})

    print(f"\n{'variant':>12} {'rollout':>12} {'energy':>12} {'momentum':>12}")
    for variant, row in summary.items():
        print(f"{variant:>12} {row['re']:>12.4e} {row['ee']:>12.4e} "
              f"{row['me']:>12.4e}")
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"\nartifacts in {out}")


if __name__ == "__main__":
    main()

"""Rollouts, normalized error metrics, and cross-trajectory aggregation.

All three metrics are normalized differences a/(b+c) and therefore lie
in [0, 1]. Rollouts that blow up are truncated at the last finite state;
their metric series are padded with the worst value 1.0 so aggregation
across trajectories keeps a common time grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import models, physics
from .models import ModelParams, TransductivityError
from .physics import State, SystemSpec, Trajectory

GEOMEAN_FLOOR = 1e-30


class EvaluationError(Exception):
    pass


class GridMismatchError(EvaluationError):
    """Predicted and ground-truth trajectories are on different time grids."""


@dataclass
class MetricSeries:
    """Rollout, energy, and momentum error along one trajectory."""

    times: np.ndarray
    re: np.ndarray
    ee: np.ndarray
    me: np.ndarray
    traj_id: int = 0
    padded_from: Optional[int] = None  # first index that is blow-up padding

    def geomean(self, metric: str) -> float:
        values = getattr(self, metric)
        return float(np.exp(np.mean(np.log(values + GEOMEAN_FLOOR))))


@dataclass
class AggregateReport:
    """Per-time geometric mean with an empirical 95% band."""

    times: np.ndarray
    geo: dict[str, np.ndarray]
    lo: dict[str, np.ndarray]
    hi: dict[str, np.ndarray]
    n_traj: int

    def overall_geomean(self, metric: str) -> float:
        return float(np.exp(np.mean(np.log(self.geo[metric] + GEOMEAN_FLOOR))))

    def to_json(self) -> dict:
        return {
            "n_traj": self.n_traj,
            "times": self.times.tolist(),
            "metrics": {
                m: {
                    "geo": self.geo[m].tolist(),
                    "lo": self.lo[m].tolist(),
                    "hi": self.hi[m].tolist(),
                }
                for m in ("re", "ee", "me")
            },
        }


def rollout(
    params: ModelParams,
    spec: SystemSpec,
    init: State,
    horizon: float,
    dt: float,
    record_every: int = 1,
) -> Trajectory:
    """Integrate the learned acceleration with velocity Verlet.

    Constrained variants recompute the constraint block from the current
    predicted state every evaluation. A non-finite state truncates the
    trajectory and sets the blow-up flag.
    """
    if params.variant == "mlp" and params.fixed_n != spec.n:
        raise TransductivityError(
            f"baseline model bound to n={params.fixed_n} cannot roll out n={spec.n}"
        )
    n_steps = int(round(horizon / dt))
    n_steps -= n_steps % record_every
    accel = models.acceleration_fn(params, spec)
    return physics.integrate(
        spec, init, dt, n_steps, record_every,
        accel_fn=accel, truncate_on_nonfinite=True,
    )


def _normalized_error(num: float, denom: float) -> float:
    if denom == 0.0:
        return 0.0 if num == 0.0 else 1.0
    # bounded by 1 via the triangle inequality; clip the last-ulp overshoot
    return min(num / denom, 1.0)


def metrics(predicted: Trajectory, truth: Trajectory, spec: SystemSpec,
            traj_id: int = 0) -> MetricSeries:
    """Normalized rollout/energy/momentum errors on the truth time grid."""
    T_pred, T_true = len(predicted), len(truth)
    if T_pred > T_true or not np.allclose(
        predicted.times[:T_pred], truth.times[:T_pred], rtol=1e-9, atol=1e-12
    ):
        raise GridMismatchError(
            f"time grids differ: {T_pred} predicted vs {T_true} truth states"
        )
    if T_pred < T_true and not predicted.truncated:
        raise GridMismatchError(
            f"predicted trajectory shorter ({T_pred} < {T_true}) without blow-up flag"
        )
    re = np.ones(T_true)
    ee = np.ones(T_true)
    me = np.ones(T_true)
    for i in range(T_pred):
        sp_hat = predicted.state(i)
        sp_true = truth.state(i)
        re[i] = _normalized_error(
            np.linalg.norm(sp_hat.q - sp_true.q),
            np.linalg.norm(sp_hat.q) + np.linalg.norm(sp_true.q),
        )
        h_hat = physics.hamiltonian(spec, sp_hat)
        h_true = physics.hamiltonian(spec, sp_true)
        ee[i] = _normalized_error(abs(h_hat - h_true), abs(h_hat) + abs(h_true))
        m_hat = physics.total_momentum(spec, sp_hat)
        m_true = physics.total_momentum(spec, sp_true)
        me[i] = _normalized_error(
            np.linalg.norm(m_hat - m_true),
            np.linalg.norm(m_hat) + np.linalg.norm(m_true),
        )
    return MetricSeries(
        times=truth.times.copy(), re=re, ee=ee, me=me, traj_id=traj_id,
        padded_from=T_pred if T_pred < T_true else None,
    )


def aggregate(series: Sequence[MetricSeries]) -> AggregateReport:
    """Geometric mean and 2.5/97.5 percentile band across trajectories."""
    if len(series) < 2:
        raise EvaluationError(f"aggregation needs >= 2 series, got {len(series)}")
    times = series[0].times
    for s in series[1:]:
        if len(s.times) != len(times) or not np.allclose(s.times, times):
            raise GridMismatchError("metric series on different time grids")
    ordered = sorted(series, key=lambda s: s.traj_id)
    geo, lo, hi = {}, {}, {}
    for m in ("re", "ee", "me"):
        stack = np.stack([getattr(s, m) for s in ordered]) + GEOMEAN_FLOOR
        geo[m] = np.exp(np.mean(np.log(stack), axis=0))
        lo[m] = np.percentile(stack, 2.5, axis=0)
        hi[m] = np.percentile(stack, 97.5, axis=0)
    return AggregateReport(times=times.copy(), geo=geo, lo=lo, hi=hi,
                           n_traj=len(series))


def default_horizon(kind: str) -> float:
    return 10.0 if kind == physics.PENDULUM else 20.0


def evaluate_on_system(
    params: ModelParams,
    spec: SystemSpec,
    n_init: int,
    seed: int,
    horizon: Optional[float] = None,
) -> AggregateReport:
    """Seeded rollouts against fresh ground truth on one system size."""
    if horizon is None:
        horizon = default_horizon(spec.kind)
    dt_fine, rec = physics.default_sim_params(spec.kind)
    dt_record = dt_fine * rec
    n_rec = int(round(horizon / dt_record))
    init_seeds = np.random.SeedSequence(seed).generate_state(n_init)
    series = []
    for i in range(n_init):
        init = physics.random_initial_state(spec, int(init_seeds[i]))
        truth = physics.simulate(spec, init, dt_fine, n_rec * rec, rec)
        pred = rollout(params, spec, init, horizon, dt_record, 1)
        series.append(metrics(pred, truth, spec, traj_id=i))
    return aggregate(series)


def zero_shot_eval(
    params: ModelParams,
    trained_spec: SystemSpec,
    target_specs: Sequence[SystemSpec],
    n_init: int,
    seed: int,
    horizon: Optional[float] = None,
) -> dict[int, AggregateReport]:
    """Evaluate one trained graph model across system sizes, keyed by n.

    Parameters are never mutated; the transductive baseline is rejected.
    """
    if params.variant == "mlp":
        raise TransductivityError(
            "the fixed-size baseline cannot be evaluated across system sizes"
        )
    reports = {}
    for target in target_specs:
        if target.kind != trained_spec.kind:
            raise EvaluationError(
                f"target kind {target.kind} differs from trained kind {trained_spec.kind}"
            )
        reports[target.n] = evaluate_on_system(params, target, n_init, seed, horizon)
    return reports


def write_metric_csv(path, report: AggregateReport, metric: str) -> None:
    with open(path, "w") as fh:
        fh.write("t,metric,lo,hi\n")
        for t, g, l, h in zip(report.times, report.geo[metric],
                              report.lo[metric], report.hi[metric]):
            fh.write(f"{t!r},{g!r},{l!r},{h!r}\n")


def write_report_json(path, reports: dict[int, AggregateReport],
                      metadata: Optional[dict] = None) -> None:
    doc = {
        "metadata": metadata or {},
        "targets": {str(n): r.to_json() for n, r in reports.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)

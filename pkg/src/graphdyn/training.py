"""Dataset generation and the mini-batched Adam training loop.

Targets are second differences of recorded positions (exact for the
position-Verlet update), so training on accelerations is equivalent to
training on trajectories sampled on the recording grid.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import models, nn, physics
from .physics import ConstraintBlock, State, SystemSpec


class TrainingError(Exception):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class Dataset:
    """Acceleration-target samples drawn from ground-truth rollouts."""

    spec: SystemSpec
    dt_record: float
    q: np.ndarray  # (S, n, d)
    qdot: np.ndarray  # (S, n, d)
    qddot: np.ndarray  # (S, n, d) Verlet targets
    traj_id: np.ndarray  # (S,)
    time_idx: np.ndarray  # (S,)
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int = 0

    def __len__(self):
        return self.q.shape[0]

    def to_json(self) -> dict:
        return {
            "spec": physics.spec_to_json(self.spec),
            "dt_record": self.dt_record,
            "seed": self.seed,
            "q": self.q.tolist(),
            "qdot": self.qdot.tolist(),
            "qddot": self.qddot.tolist(),
            "traj_id": self.traj_id.tolist(),
            "time_idx": self.time_idx.tolist(),
            "train_idx": self.train_idx.tolist(),
            "val_idx": self.val_idx.tolist(),
        }

    @staticmethod
    def from_json(doc: dict) -> "Dataset":
        return Dataset(
            spec=physics.spec_from_json(doc["spec"]),
            dt_record=float(doc["dt_record"]),
            q=np.asarray(doc["q"], dtype=np.float64),
            qdot=np.asarray(doc["qdot"], dtype=np.float64),
            qddot=np.asarray(doc["qddot"], dtype=np.float64),
            traj_id=np.asarray(doc["traj_id"], dtype=np.intp),
            time_idx=np.asarray(doc["time_idx"], dtype=np.intp),
            train_idx=np.asarray(doc["train_idx"], dtype=np.intp),
            val_idx=np.asarray(doc["val_idx"], dtype=np.intp),
            seed=int(doc.get("seed", 0)),
        )


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        json.dump(ds.to_json(), fh)


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        return Dataset.from_json(json.load(fh))


def verlet_target(q_prev: np.ndarray, q_now: np.ndarray, q_next: np.ndarray,
                  dt: float) -> np.ndarray:
    """Second-difference acceleration (q_next + q_prev - 2 q_now) / dt^2."""
    if dt <= 0:
        raise TrainingError(f"timestep must be positive, got {dt}")
    return (q_next + q_prev - 2.0 * q_now) / (dt * dt)


def reconstruct_positions(q0: np.ndarray, q1: np.ndarray,
                          targets: np.ndarray, dt: float) -> np.ndarray:
    """Re-integrate Verlet targets with q(t+dt) = 2q(t) - q(t-dt) + a dt^2.

    Returns the full position sequence starting from the two seed frames;
    on targets computed by :func:`verlet_target` this reproduces the
    source positions to rounding.
    """
    out = np.empty((targets.shape[0] + 2,) + q0.shape)
    out[0], out[1] = q0, q1
    dt2 = dt * dt
    for i, a in enumerate(targets):
        out[i + 2] = 2.0 * out[i + 1] - out[i] + a * dt2
    return out


def generate_dataset(
    spec: SystemSpec,
    n_traj: int,
    points_per_traj: int,
    dt: Optional[float] = None,
    record_every: Optional[int] = None,
    seed: int = 0,
) -> Dataset:
    """Simulate seeded rollouts and extract acceleration-target samples.

    Each trajectory is integrated just long enough to provide
    ``points_per_traj`` interior recorded states, whose targets come from
    second differences on the recording grid.
    """
    if n_traj < 1 or points_per_traj < 1:
        raise TrainingError("need at least one trajectory and one point")
    if dt is None or record_every is None:
        d_dt, d_rec = physics.default_sim_params(spec.kind)
        dt = d_dt if dt is None else dt
        record_every = d_rec if record_every is None else record_every
    dt_record = dt * record_every
    n_steps = (points_per_traj + 1) * record_every
    traj_seeds = np.random.SeedSequence(seed).generate_state(n_traj)

    qs, qdots, targets, traj_ids, time_idxs = [], [], [], [], []
    for ti in range(n_traj):
        init = physics.random_initial_state(spec, int(traj_seeds[ti]))
        traj = physics.simulate(spec, init, dt, n_steps, record_every)
        if len(traj) < points_per_traj + 2:
            raise TrainingError(
                f"trajectory {ti} too short: {len(traj)} recorded states"
            )
        for k in range(1, points_per_traj + 1):
            qs.append(traj.qs[k])
            qdots.append(traj.qdots[k])
            targets.append(
                verlet_target(traj.qs[k - 1], traj.qs[k], traj.qs[k + 1], dt_record)
            )
            traj_ids.append(ti)
            time_idxs.append(k)

    S = len(qs)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(S)
    n_train = int(round(0.75 * S))
    return Dataset(
        spec=spec, dt_record=dt_record,
        q=np.asarray(qs), qdot=np.asarray(qdots), qddot=np.asarray(targets),
        traj_id=np.asarray(traj_ids, dtype=np.intp),
        time_idx=np.asarray(time_idxs, dtype=np.intp),
        train_idx=perm[:n_train].copy(), val_idx=perm[n_train:].copy(),
        seed=seed,
    )


def acceleration_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Squared error summed per particle, averaged over particles and batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise TrainingError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    B, n, _ = pred.shape
    return float(np.sum((pred - target) ** 2) / (n * B))


@dataclass
class Hyperparams:
    """Training-loop knobs; defaults follow the experiment protocol."""

    lr: float = 1e-3
    batch_size: int = 100
    max_epochs: int = 10000
    stop_window: int = 100
    stop_threshold: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingError(f"invalid hyperparameters: {self}")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stop_reason: str = ""
    wall_time: float = 0.0
    epochs: int = 0

    def to_json(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "wall_time": self.wall_time,
            "epochs": self.epochs,
        }

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for e, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), 1):
                fh.write(f"{e},{tr!r},{va!r}\n")


def _batch_constraints(spec: SystemSpec, q: np.ndarray,
                       qdot: np.ndarray) -> list[ConstraintBlock]:
    return [
        physics.constraint_block(spec, State(q[i], qdot[i]))
        for i in range(q.shape[0])
    ]


def _epoch_loss(params: models.ModelParams, topo, ds: Dataset, idx: np.ndarray,
                cons_all, batch_size: int) -> float:
    """Dataset loss at fixed parameters (no gradient bookkeeping needed)."""
    pt = {k: ad.constant(v) for k, v in params.arrays.items()}
    total = 0.0
    for lo in range(0, len(idx), batch_size):
        sel = idx[lo:lo + batch_size]
        cons = [cons_all[i] for i in sel] if cons_all is not None else None
        pred = models.forward_batch(pt, params, topo, ds.q[sel], ds.qdot[sel], cons)
        total += acceleration_loss(pred.value, ds.qddot[sel]) * len(sel)
    return total / len(idx)


def train(
    variant: str,
    dataset: Dataset,
    hp: Hyperparams,
    embed_dim: int = 5,
    hidden: int = 5,
    msg_layers: int = 1,
    baseline_hidden: int = 16,
    initial: Optional[models.ModelParams] = None,
) -> tuple[models.ModelParams, TrainReport]:
    """Mini-batched Adam training with validation-saturation stopping.

    Stops when the relative drop in validation loss over the trailing
    ``stop_window`` epochs falls below ``stop_threshold``, or at
    ``max_epochs``. Returns the best-validation parameters. Deterministic
    for a fixed seed. ``initial`` resumes from existing weights instead of
    a fresh initialization (the optimizer state starts over).
    """
    spec = dataset.spec
    topo = models.build_topology(spec)
    init_seed, shuffle_seed = (int(s) for s in
                               np.random.SeedSequence(hp.seed).generate_state(2))
    if initial is not None:
        if initial.variant != variant:
            raise TrainingError(
                f"resume checkpoint is a {initial.variant!r} model, not {variant!r}"
            )
        params = initial.copy()
    else:
        params = models.init_params(
            variant, spec, init_seed, embed_dim=embed_dim, hidden=hidden,
            msg_layers=msg_layers, baseline_hidden=baseline_hidden,
        )
    rng = np.random.default_rng(shuffle_seed)
    adam = nn.init_adam(params.arrays)

    use_cons = models.needs_constraints(variant) and spec.kind == physics.PENDULUM
    cons_all = _batch_constraints(spec, dataset.q, dataset.qdot) if use_cons else None

    report = TrainReport()
    best_arrays = {k: v.copy() for k, v in params.arrays.items()}
    t0 = time.perf_counter()
    n = spec.n
    for epoch in range(1, hp.max_epochs + 1):
        order = rng.permutation(dataset.train_idx)
        epoch_loss = 0.0
        for lo in range(0, len(order), hp.batch_size):
            sel = order[lo:lo + hp.batch_size]
            B = len(sel)
            cons = [cons_all[i] for i in sel] if cons_all is not None else None
            pt = nn.wrap_params(params.arrays)
            pred = models.forward_batch(pt, params, topo, dataset.q[sel],
                                        dataset.qdot[sel], cons)
            diff = pred - ad.constant(dataset.qddot[sel])
            loss_t = (1.0 / (n * B)) * ad.sum_(diff * diff)
            loss = float(loss_t.value)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            grads = ad.grad(loss_t, pt)
            params.arrays, adam = nn.adam_step(params.arrays, grads, adam, hp.lr)
            epoch_loss += loss * B
        report.train_losses.append(epoch_loss / len(order))

        if len(dataset.val_idx):
            val_loss = _epoch_loss(params, topo, dataset, dataset.val_idx,
                                   cons_all, hp.batch_size)
        else:
            val_loss = report.train_losses[-1]
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        report.val_losses.append(val_loss)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_arrays = {k: v.copy() for k, v in params.arrays.items()}

        if epoch > hp.stop_window:
            prev = report.val_losses[-1 - hp.stop_window]
            drop = (prev - val_loss) / max(prev, 1e-300)
            if drop < hp.stop_threshold:
                report.stop_reason = "saturated"
                break
    else:
        report.stop_reason = "max_epochs"

    report.epochs = len(report.train_losses)
    report.wall_time = time.perf_counter() - t0
    params.arrays = best_arrays
    return params, report

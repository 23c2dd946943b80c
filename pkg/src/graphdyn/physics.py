"""Ground-truth constrained particle dynamics.

Systems are chains of pendulum bobs (rigid bars, gravity, holonomic
distance constraints) or closed loops of spring-coupled particles (no
constraints, no gravity). Accelerations come from the decoupled equation
of motion with a Lagrange-multiplier solve for the constraint forces;
time integration is velocity Verlet.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np


class PhysicsError(Exception):
    """Base class for ground-truth dynamics errors."""


class SystemKindError(PhysicsError):
    """Operation applied to the wrong system kind."""


class SingularConstraintError(PhysicsError):
    """The constraint system A M^-1 A^T is singular or indefinite."""


class SingularForceError(PhysicsError):
    """Force evaluation hit a geometric singularity (coincident particles)."""


PENDULUM = "pendulum"
SPRING = "spring"


@dataclass(frozen=True)
class SystemSpec:
    """Physical definition of a system.

    Pendulum: n bobs hanging from a fixed pivot at the origin, linked by
    rigid bars of lengths ``lengths``; gravity acts along -y.
    Spring: n particles on a closed cycle of linear springs with rest
    length ``rest_length`` and stiffness ``stiffness``; no gravity.
    """

    kind: str
    n: int
    masses: tuple[float, ...]
    lengths: tuple[float, ...] = ()
    rest_length: float = 1.0
    stiffness: float = 1.0
    gravity: float = 9.81
    dim: int = 2
    types: tuple[int, ...] = ()
    type_vocab: int = 1

    def __post_init__(self):
        if self.kind not in (PENDULUM, SPRING):
            raise SystemKindError(f"unknown system kind: {self.kind!r}")
        if self.n < 1:
            raise PhysicsError(f"need at least one particle, got n={self.n}")
        if len(self.masses) != self.n or any(m <= 0 for m in self.masses):
            raise PhysicsError("masses must be n positive values")
        if self.kind == PENDULUM:
            if len(self.lengths) != self.n or any(l <= 0 for l in self.lengths):
                raise PhysicsError("pendulum needs n positive bar lengths")
        else:
            if self.rest_length <= 0:
                raise PhysicsError("spring rest length must be positive")
            if self.stiffness < 0:
                raise PhysicsError("spring stiffness must be nonnegative")
        types = self.types if self.types else tuple(0 for _ in range(self.n))
        if len(types) != self.n:
            raise PhysicsError("types must have one id per particle")
        if any(t < 0 or t >= self.type_vocab for t in types):
            raise PhysicsError(
                f"type ids must lie in [0, {self.type_vocab}), got {types}"
            )
        object.__setattr__(self, "types", types)

    @property
    def mass_array(self) -> np.ndarray:
        return np.asarray(self.masses, dtype=np.float64)


def pendulum(n: int, mass: float = 1.0, length: float = 1.0,
             gravity: float = 9.81) -> SystemSpec:
    return SystemSpec(kind=PENDULUM, n=n, masses=(mass,) * n,
                      lengths=(length,) * n, gravity=gravity)


def spring(n: int, mass: float = 1.0, rest_length: float = 1.0,
           stiffness: float = 1.0) -> SystemSpec:
    return SystemSpec(kind=SPRING, n=n, masses=(mass,) * n,
                      rest_length=rest_length, stiffness=stiffness, gravity=0.0)


@dataclass
class State:
    """Positions and velocities of all particles at time t."""

    q: np.ndarray  # (n, d)
    qdot: np.ndarray  # (n, d)
    t: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.qdot = np.asarray(self.qdot, dtype=np.float64)
        if self.q.shape != self.qdot.shape or self.q.ndim != 2:
            raise PhysicsError(
                f"state shapes must match (n, d): {self.q.shape} vs {self.qdot.shape}"
            )

    def copy(self) -> "State":
        return State(self.q.copy(), self.qdot.copy(), self.t)


@dataclass
class Trajectory:
    """Uniformly recorded states of one simulation or rollout."""

    spec: SystemSpec
    dt_record: float
    times: np.ndarray  # (T,)
    qs: np.ndarray  # (T, n, d)
    qdots: np.ndarray  # (T, n, d)
    truncated: bool = False
    blowup_step: Optional[int] = None

    def __len__(self):
        return len(self.times)

    def state(self, i: int) -> State:
        return State(self.qs[i], self.qdots[i], float(self.times[i]))

    def to_json(self) -> dict:
        return {
            "spec": spec_to_json(self.spec),
            "dt_record": self.dt_record,
            "truncated": self.truncated,
            "blowup_step": self.blowup_step,
            "states": [
                {"t": float(t), "q": q.tolist(), "qdot": v.tolist()}
                for t, q, v in zip(self.times, self.qs, self.qdots)
            ],
        }

    @staticmethod
    def from_json(doc: dict) -> "Trajectory":
        states = doc["states"]
        return Trajectory(
            spec=spec_from_json(doc["spec"]),
            dt_record=float(doc["dt_record"]),
            times=np.array([s["t"] for s in states], dtype=np.float64),
            qs=np.array([s["q"] for s in states], dtype=np.float64),
            qdots=np.array([s["qdot"] for s in states], dtype=np.float64),
            truncated=bool(doc.get("truncated", False)),
            blowup_step=doc.get("blowup_step"),
        )


def spec_to_json(spec: SystemSpec) -> dict:
    return {
        "kind": spec.kind,
        "n": spec.n,
        "masses": list(spec.masses),
        "lengths": list(spec.lengths),
        "rest_length": spec.rest_length,
        "stiffness": spec.stiffness,
        "gravity": spec.gravity,
        "dim": spec.dim,
        "types": list(spec.types),
        "type_vocab": spec.type_vocab,
    }


def spec_from_json(doc: dict) -> SystemSpec:
    return SystemSpec(
        kind=doc["kind"], n=int(doc["n"]),
        masses=tuple(doc["masses"]), lengths=tuple(doc.get("lengths", [])),
        rest_length=float(doc.get("rest_length", 1.0)),
        stiffness=float(doc.get("stiffness", 1.0)),
        gravity=float(doc.get("gravity", 9.81)),
        dim=int(doc.get("dim", 2)),
        types=tuple(doc.get("types", [])),
        type_vocab=int(doc.get("type_vocab", 1)),
    )


@dataclass
class ConstraintBlock:
    """Holonomic constraint residuals with Jacobian and its time derivative.

    phi: (k,) residuals; A = d(phi)/dq: (k, n*d); Adot: (k, n*d).
    """

    phi: np.ndarray
    A: np.ndarray
    Adot: np.ndarray

    @property
    def k(self) -> int:
        return self.A.shape[0]


def empty_constraints(n: int, d: int) -> ConstraintBlock:
    nd = n * d
    return ConstraintBlock(np.zeros(0), np.zeros((0, nd)), np.zeros((0, nd)))


def _pendulum_cons_arrays(spec: SystemSpec, q: np.ndarray,
                          qdot: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, d = spec.n, spec.dim
    dq = q.copy()
    dq[1:] -= q[:-1]
    dv = qdot.copy()
    dv[1:] -= qdot[:-1]
    lengths = np.asarray(spec.lengths)
    phi = np.einsum("ij,ij->i", dq, dq) - lengths * lengths
    A = np.zeros((n, n, d))
    Adot = np.zeros((n, n, d))
    rows = np.arange(n)
    A[rows, rows] = 2.0 * dq
    Adot[rows, rows] = 2.0 * dv
    A[rows[1:], rows[1:] - 1] = -2.0 * dq[1:]
    Adot[rows[1:], rows[1:] - 1] = -2.0 * dv[1:]
    return phi, A.reshape(n, n * d), Adot.reshape(n, n * d)


def pendulum_constraints(spec: SystemSpec, state: State) -> ConstraintBlock:
    """Squared-distance bar constraints phi_i = |q_i - q_{i-1}|^2 - l_i^2.

    The pivot q_0 = origin is folded into the first row; it is not a
    particle. Row i carries +-2(q_i - q_{i-1}) in the i and i-1 blocks.
    """
    if spec.kind != PENDULUM:
        raise SystemKindError(f"pendulum_constraints on a {spec.kind} system")
    phi, A, Adot = _pendulum_cons_arrays(spec, state.q, state.qdot)
    return ConstraintBlock(phi, A, Adot)


def constraint_block(spec: SystemSpec, state: State) -> ConstraintBlock:
    if spec.kind == PENDULUM:
        return pendulum_constraints(spec, state)
    return empty_constraints(spec.n, spec.dim)


def spring_edges(n: int) -> list[tuple[int, int]]:
    """Closed-cycle spring topology in canonical (i < j) orientation."""
    if n == 1:
        return []
    if n == 2:
        return [(0, 1)]
    return [(i, i + 1) for i in range(n - 1)] + [(0, n - 1)]


def conservative_force(spec: SystemSpec, state: State) -> np.ndarray:
    """Gradient of the potential, N = grad_q V, shape (n, d).

    N enters the equation of motion with a minus sign, so gravity yields
    N_i = (0, +m_i g) and a -g acceleration along y.
    """
    n, d = spec.n, spec.dim
    q = state.q
    N = np.zeros((n, d))
    if spec.kind == PENDULUM:
        N[:, 1] = spec.mass_array * spec.gravity
        return N
    k, r0 = spec.stiffness, spec.rest_length
    for i, j in spring_edges(n):
        dq = q[i] - q[j]
        dist = np.linalg.norm(dq)
        if dist == 0.0:
            raise SingularForceError(
                f"spring endpoints {i} and {j} coincide; force undefined"
            )
        grad = k * (dist - r0) * dq / dist
        N[i] += grad
        N[j] -= grad
    return N


def constrained_acceleration(
    masses: np.ndarray,
    N: np.ndarray,
    Pi: np.ndarray,
    Upsilon: np.ndarray,
    Cqdot: np.ndarray,
    cons: ConstraintBlock,
    qdot: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Acceleration and Lagrange multipliers of the decoupled equation.

    lambda = (A M^-1 A^T)^-1 (A M^-1 (Pi - C qdot - N - Upsilon) + Adot qdot)
    qddot  = M^-1 (Pi - C qdot - N - Upsilon - A^T lambda)

    ``masses`` holds the n per-particle masses (diagonal mass matrix);
    all force arrays are (n, d). With no constraints (k = 0) the solve
    is skipped entirely.
    """
    masses = np.asarray(masses, dtype=np.float64)
    if np.any(masses <= 0):
        raise PhysicsError("masses must be positive")
    n, d = N.shape
    minv = np.repeat(1.0 / masses, d)  # per coordinate
    F = (Pi - Cqdot - N - Upsilon).reshape(-1)
    if cons.k == 0:
        return (minv * F).reshape(n, d), np.zeros(0)
    A, Adot = cons.A, cons.Adot
    AMinv = A * minv[np.newaxis, :]
    S = AMinv @ A.T
    b = AMinv @ F + Adot @ qdot.reshape(-1)
    try:
        lam = np.linalg.solve(S, b)
    except np.linalg.LinAlgError as exc:
        raise SingularConstraintError(
            f"A M^-1 A^T is singular (cond ~ {np.linalg.cond(S):.3e}): {exc}"
        ) from exc
    acc = minv * (F - A.T @ lam)
    return acc.reshape(n, d), lam


def ground_truth_acceleration(spec: SystemSpec, state: State) -> np.ndarray:
    """Analytic acceleration of the specified system at a state."""
    N = conservative_force(spec, state)
    zeros = np.zeros_like(N)
    cons = constraint_block(spec, state)
    acc, _ = constrained_acceleration(
        spec.mass_array, N, zeros, zeros, zeros, cons, state.qdot
    )
    return acc


AccelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def velocity_verlet_step(accel_fn: AccelFn, state: State, dt: float) -> State:
    """One velocity-Verlet step.

    The closing force evaluation uses the predictor velocity
    qdot + qddot*dt; ground-truth forces depend on velocity only through
    the constraint terms, for which the predictor is the usual choice.
    """
    if dt <= 0:
        raise PhysicsError(f"timestep must be positive, got {dt}")
    a = accel_fn(state.q, state.qdot)
    q_new = state.q + state.qdot * dt + 0.5 * a * dt * dt
    v_pred = state.qdot + a * dt
    a_new = accel_fn(q_new, v_pred)
    v_new = state.qdot + 0.5 * (a + a_new) * dt
    return State(q_new, v_new, state.t + dt)


def project_velocity(spec: SystemSpec, state: State) -> State:
    """Remove the velocity component violating A(q) qdot = 0.

    Mass-weighted least-squares projection onto the Pfaffian constraint
    surface: qdot <- qdot - M^-1 A^T (A M^-1 A^T)^-1 A qdot. A no-op for
    unconstrained systems.
    """
    cons = constraint_block(spec, state)
    if cons.k == 0:
        return state
    minv = np.repeat(1.0 / spec.mass_array, spec.dim)
    AMinv = cons.A * minv[np.newaxis, :]
    S = AMinv @ cons.A.T
    resid = cons.A @ state.qdot.reshape(-1)
    try:
        mu = np.linalg.solve(S, resid)
    except np.linalg.LinAlgError as exc:
        raise SingularConstraintError(f"velocity projection failed: {exc}") from exc
    v = state.qdot.reshape(-1) - minv * (cons.A.T @ mu)
    return State(state.q, v.reshape(state.qdot.shape), state.t)


def integrate(
    spec: SystemSpec,
    init: State,
    dt: float,
    n_steps: int,
    record_every: int,
    accel_fn: Optional[AccelFn] = None,
    truncate_on_nonfinite: bool = False,
    constrain_velocity: bool = False,
) -> Trajectory:
    """Velocity-Verlet integration with uniform recording (incl. init).

    With ``truncate_on_nonfinite`` a diverging run is cut at the last
    finite recorded state and flagged instead of raising. With
    ``constrain_velocity`` every step ends with the velocity projection;
    the ground-truth pendulum needs this to keep the velocity-level
    constraint from drifting over chaotic long runs.
    """
    if record_every < 1 or n_steps % record_every != 0:
        raise PhysicsError(
            f"n_steps={n_steps} must be a multiple of record_every={record_every}"
        )
    if accel_fn is None:
        accel_fn = lambda q, v: ground_truth_acceleration(spec, State(q, v))
    times = [init.t]
    qs = [init.q.copy()]
    qdots = [init.qdot.copy()]
    state = init.copy()
    truncated = False
    blowup_step = None
    for step in range(1, n_steps + 1):
        state = velocity_verlet_step(accel_fn, state, dt)
        if constrain_velocity:
            state = project_velocity(spec, state)
        if truncate_on_nonfinite and not (
            np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qdot))
        ):
            truncated = True
            blowup_step = step
            break
        if step % record_every == 0:
            times.append(init.t + step * dt)
            qs.append(state.q.copy())
            qdots.append(state.qdot.copy())
    return Trajectory(
        spec=spec,
        dt_record=dt * record_every,
        times=np.asarray(times),
        qs=np.asarray(qs),
        qdots=np.asarray(qdots),
        truncated=truncated,
        blowup_step=blowup_step,
    )


def simulate(spec: SystemSpec, init: State, dt: float, n_steps: int,
             record_every: int) -> Trajectory:
    """Ground-truth simulation of the specified system."""
    return integrate(spec, init, dt, n_steps, record_every,
                     constrain_velocity=spec.kind == PENDULUM)


def hamiltonian(spec: SystemSpec, state: State) -> float:
    """Total energy: kinetic plus gravitational or elastic potential."""
    m = spec.mass_array
    kinetic = 0.5 * float(np.sum(m[:, None] * state.qdot * state.qdot))
    if spec.kind == PENDULUM:
        potential = float(np.sum(m * spec.gravity * state.q[:, 1]))
    else:
        potential = 0.0
        for i, j in spring_edges(spec.n):
            ext = np.linalg.norm(state.q[i] - state.q[j]) - spec.rest_length
            potential += 0.5 * spec.stiffness * ext * ext
    return kinetic + potential


def total_momentum(spec: SystemSpec, state: State) -> np.ndarray:
    """Sum of m_i qdot_i with ground-truth masses, shape (d,)."""
    return np.asarray(spec.mass_array @ state.qdot, dtype=np.float64)


def random_initial_state(spec: SystemSpec, seed: int) -> State:
    """Seeded random on-manifold initial state.

    Pendulum: joint angles uniform in [-pi/2, pi/2] from the -y axis,
    released from rest. Spring: a regular n-gon with edge length = rest
    length, each coordinate perturbed uniformly within 10% of the rest
    length, plus small uniform random velocities. The velocities give the
    ring a nonzero total momentum, so momentum-conservation measures are
    not comparisons of pure round-off noise.
    """
    rng = np.random.default_rng(seed)
    n, d = spec.n, spec.dim
    q = np.zeros((n, d))
    if spec.kind == PENDULUM:
        anchor = np.zeros(d)
        for i in range(n):
            theta = rng.uniform(-np.pi / 2, np.pi / 2)
            q[i] = anchor + spec.lengths[i] * np.array([np.sin(theta), -np.cos(theta)])
            anchor = q[i]
    else:
        r0 = spec.rest_length
        if n == 1:
            q[0] = 0.0
        elif n == 2:
            q[0] = (-0.5 * r0, 0.0)
            q[1] = (+0.5 * r0, 0.0)
        else:
            radius = r0 / (2.0 * np.sin(np.pi / n))
            angles = 2.0 * np.pi * np.arange(n) / n
            q[:, 0] = radius * np.cos(angles)
            q[:, 1] = radius * np.sin(angles)
        q += rng.uniform(-0.1 * r0, 0.1 * r0, size=(n, d))
        qdot = rng.uniform(-0.1, 0.1, size=(n, d))
        return State(q, qdot, 0.0)
    return State(q, np.zeros((n, d)), 0.0)


def default_sim_params(kind: str) -> tuple[float, int]:
    """Forward-simulation timestep and recording stride per system kind."""
    if kind == PENDULUM:
        return 1e-5, 1000
    if kind == SPRING:
        return 1e-3, 100
    raise SystemKindError(f"unknown system kind: {kind!r}")


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w") as fh:
        json.dump(traj.to_json(), fh)


def load_trajectory(path) -> Trajectory:
    with open(path) as fh:
        return Trajectory.from_json(json.load(fh))

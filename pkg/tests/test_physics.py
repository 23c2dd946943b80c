"""Ground-truth dynamics: constraints, forces, integrator, conservation.

Derivative quantities (constraint Jacobians, forces) are checked against
finite differences of the defining scalar functions, not against the
implementation itself.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphdyn import physics
from graphdyn.autodiff import finite_difference_gradient


def _pendulum_phi(spec, qflat):
    """Independent constraint residuals: squared bar lengths."""
    q = qflat.reshape(spec.n, spec.dim)
    prev = np.zeros(spec.dim)
    out = []
    for i in range(spec.n):
        out.append(float(np.sum((q[i] - prev) ** 2) - spec.lengths[i] ** 2))
        prev = q[i]
    return np.array(out)


def _spring_potential(spec, qflat):
    q = qflat.reshape(spec.n, spec.dim)
    v = 0.0
    for i, j in physics.spring_edges(spec.n):
        dist = np.linalg.norm(q[i] - q[j])
        v += 0.5 * spec.stiffness * (dist - spec.rest_length) ** 2
    return v


class TestSpecs:
    def test_factories(self):
        p = physics.pendulum(3)
        s = physics.spring(5)
        assert p.kind == physics.PENDULUM and p.n == 3 and p.dim == 2
        assert s.kind == physics.SPRING and s.n == 5
        assert np.all(p.mass_array == 1.0)

    def test_invalid_sizes(self):
        with pytest.raises(physics.PhysicsError):
            physics.pendulum(0)
        with pytest.raises(physics.PhysicsError):
            physics.spring(0)

    def test_spec_json_roundtrip(self):
        for spec in (physics.pendulum(4, mass=2.0, gravity=9.81),
                     physics.spring(3, stiffness=2.5)):
            doc = physics.spec_to_json(spec)
            back = physics.spec_from_json(doc)
            assert back == spec

    def test_state_shape_validation(self):
        with pytest.raises(physics.PhysicsError):
            physics.State(np.zeros((3, 2)), np.zeros((2, 2)))


class TestConstraints:
    def test_residuals_match_definition(self):
        spec = physics.pendulum(4)
        st_ = physics.random_initial_state(spec, 0)
        cons = physics.pendulum_constraints(spec, st_)
        assert np.allclose(cons.phi, _pendulum_phi(spec, st_.q.reshape(-1)),
                           atol=1e-12)

    def test_jacobian_vs_finite_difference(self):
        spec = physics.pendulum(4)
        rng = np.random.default_rng(1)
        q = rng.standard_normal((4, 2))
        v = rng.standard_normal((4, 2))
        cons = physics.pendulum_constraints(spec, physics.State(q, v))
        for r in range(cons.k):
            fd = finite_difference_gradient(
                lambda x, r=r: _pendulum_phi(spec, x)[r], q.reshape(-1).copy())
            assert np.abs(cons.A[r] - fd).max() < 1e-6

    def test_adot_is_time_derivative_of_a(self):
        spec = physics.pendulum(3)
        rng = np.random.default_rng(2)
        q = rng.standard_normal((3, 2))
        v = rng.standard_normal((3, 2))
        eps = 1e-7
        a0 = physics.pendulum_constraints(spec, physics.State(q, v)).A
        a1 = physics.pendulum_constraints(
            spec, physics.State(q + eps * v, v)).A
        adot = physics.pendulum_constraints(spec, physics.State(q, v)).Adot
        assert np.abs((a1 - a0) / eps - adot).max() < 1e-5

    def test_spring_has_no_constraints(self):
        spec = physics.spring(5)
        st_ = physics.random_initial_state(spec, 0)
        cons = physics.constraint_block(spec, st_)
        assert cons.k == 0

    def test_kind_mismatch(self):
        with pytest.raises(physics.SystemKindError):
            physics.pendulum_constraints(
                physics.spring(3),
                physics.State(np.zeros((3, 2)), np.zeros((3, 2))))

    def test_spring_edges_cycle(self):
        assert physics.spring_edges(1) == []
        assert physics.spring_edges(2) == [(0, 1)]
        assert physics.spring_edges(4) == [(0, 1), (1, 2), (2, 3), (0, 3)]


class TestForces:
    def test_pendulum_gravity(self):
        spec = physics.pendulum(3, mass=2.0, gravity=10.0)
        st_ = physics.random_initial_state(spec, 0)
        n_vec = physics.conservative_force(spec, st_)
        assert np.allclose(n_vec[:, 0], 0.0)
        assert np.allclose(n_vec[:, 1], 20.0)

    def test_spring_force_is_potential_gradient(self):
        spec = physics.spring(5, stiffness=1.7, rest_length=1.3)
        st_ = physics.random_initial_state(spec, 3)
        n_vec = physics.conservative_force(spec, st_).reshape(-1)
        fd = finite_difference_gradient(
            lambda x: _spring_potential(spec, x), st_.q.reshape(-1).copy())
        assert np.abs(n_vec - fd).max() < 1e-6

    def test_spring_forces_sum_to_zero(self):
        spec = physics.spring(6)
        st_ = physics.random_initial_state(spec, 4)
        total = physics.conservative_force(spec, st_).sum(axis=0)
        assert np.abs(total).max() < 1e-12

    def test_coincident_spring_particles_raise(self):
        spec = physics.spring(3)
        q = np.zeros((3, 2))
        with pytest.raises(physics.SingularForceError):
            physics.conservative_force(spec, physics.State(q, np.zeros((3, 2))))


class TestAcceleration:
    def test_constraint_consistency(self):
        # On-manifold accelerations must satisfy A qddot + Adot qdot = 0.
        spec = physics.pendulum(4)
        st_ = physics.random_initial_state(spec, 5)
        st_.qdot = np.random.default_rng(5).standard_normal((4, 2)) * 0.1
        st_ = physics.project_velocity(spec, st_)
        acc = physics.ground_truth_acceleration(spec, st_)
        cons = physics.pendulum_constraints(spec, st_)
        resid = cons.A @ acc.reshape(-1) + cons.Adot @ st_.qdot.reshape(-1)
        assert np.abs(resid).max() < 1e-9

    def test_single_pendulum_known_solution(self):
        # theta'' = -(g/l) sin(theta); check at theta = 90 deg where the
        # tangential acceleration is exactly g downward.
        spec = physics.pendulum(1, length=2.0, gravity=9.81)
        st_ = physics.State(np.array([[2.0, 0.0]]), np.zeros((1, 2)))
        acc = physics.ground_truth_acceleration(spec, st_)
        assert np.allclose(acc, [[0.0, -9.81]], atol=1e-10)

    def test_spring_acceleration_free_of_constraints(self):
        spec = physics.spring(3, stiffness=2.0)
        st_ = physics.random_initial_state(spec, 6)
        acc = physics.ground_truth_acceleration(spec, st_)
        force = -physics.conservative_force(spec, st_)
        assert np.allclose(acc, force / spec.mass_array[:, None])


class TestIntegrator:
    def test_free_particle_exact(self):
        # Zero force: Verlet must reproduce straight-line motion exactly.
        spec = physics.spring(2, stiffness=0.0)
        init = physics.State(np.array([[0.0, 0.0], [1.0, 0.0]]),
                             np.array([[1.0, 2.0], [0.0, -1.0]]))
        traj = physics.simulate(spec, init, 0.01, 100, 10)
        expect = init.q + init.qdot * traj.times[-1]
        assert np.allclose(traj.qs[-1], expect, atol=1e-12)

    def test_recording_grid(self):
        spec = physics.spring(3)
        init = physics.random_initial_state(spec, 0)
        traj = physics.simulate(spec, init, 1e-3, 500, 100)
        assert len(traj) == 6
        assert np.allclose(np.diff(traj.times), 0.1)
        assert traj.dt_record == pytest.approx(0.1)

    def test_bad_record_every(self):
        spec = physics.spring(3)
        init = physics.random_initial_state(spec, 0)
        with pytest.raises(physics.PhysicsError):
            physics.simulate(spec, init, 1e-3, 101, 100)

    def test_pendulum_energy_and_bars_short_run(self):
        spec = physics.pendulum(3)
        init = physics.random_initial_state(spec, 0)
        traj = physics.simulate(spec, init, 1e-5, 10000, 1000)
        h0 = physics.hamiltonian(spec, traj.state(0))
        for i in range(len(traj)):
            assert abs(physics.hamiltonian(spec, traj.state(i)) - h0) / abs(h0) < 1e-6
            phi = physics.pendulum_constraints(spec, traj.state(i)).phi
            assert np.abs(phi).max() < 1e-9

    def test_velocity_projection_removes_drift(self):
        spec = physics.pendulum(3)
        rng = np.random.default_rng(7)
        st_ = physics.random_initial_state(spec, 7)
        st_.qdot = rng.standard_normal((3, 2))
        proj = physics.project_velocity(spec, st_)
        cons = physics.pendulum_constraints(spec, proj)
        assert np.abs(cons.A @ proj.qdot.reshape(-1)).max() < 1e-12
        # projection is idempotent
        again = physics.project_velocity(spec, proj)
        assert np.allclose(again.qdot, proj.qdot, atol=1e-12)

    def test_spring_momentum_conserved(self):
        spec = physics.spring(5)
        init = physics.random_initial_state(spec, 1)
        p0 = physics.total_momentum(spec, init)
        assert np.linalg.norm(p0) > 1e-3  # random velocities: nonzero start
        traj = physics.simulate(spec, init, 1e-3, 1000, 100)
        for i in range(len(traj)):
            p = physics.total_momentum(spec, traj.state(i))
            assert np.abs(p - p0).max() < 1e-12

    def test_truncation_on_blowup(self):
        spec = physics.spring(2, stiffness=0.0)
        init = physics.State(np.array([[0.0, 0.0], [1.0, 0.0]]),
                             np.zeros((2, 2)))
        bad = lambda q, v: np.full_like(q, np.nan)
        traj = physics.integrate(spec, init, 0.01, 10, 1, accel_fn=bad,
                                 truncate_on_nonfinite=True)
        assert traj.truncated and traj.blowup_step == 1
        assert len(traj) == 1


class TestObservables:
    def test_pendulum_hamiltonian_hand_value(self):
        # Single unit pendulum at rest, hanging: H = m g y = -9.81.
        spec = physics.pendulum(1)
        st_ = physics.State(np.array([[0.0, -1.0]]), np.zeros((1, 2)))
        assert physics.hamiltonian(spec, st_) == pytest.approx(-9.81)

    def test_spring_hamiltonian_hand_value(self):
        # Two unit masses, one spring stretched to 2 r0, one unit speed:
        # H = 0.5 * 1 * 1 + 0.5 * k * (r0)^2 = 0.5 + 0.5.
        spec = physics.spring(2, stiffness=1.0, rest_length=1.0)
        st_ = physics.State(np.array([[0.0, 0.0], [2.0, 0.0]]),
                            np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert physics.hamiltonian(spec, st_) == pytest.approx(1.0)

    def test_total_momentum(self):
        spec = physics.spring(2, mass=3.0)
        st_ = physics.State(np.zeros((2, 2)) + [[0, 0], [1, 0]],
                            np.array([[1.0, 0.0], [0.0, 2.0]]))
        assert np.allclose(physics.total_momentum(spec, st_), [3.0, 6.0])


class TestInitialStates:
    @given(st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_pendulum_init_on_manifold(self, seed):
        spec = physics.pendulum(4)
        st_ = physics.random_initial_state(spec, seed)
        cons = physics.pendulum_constraints(spec, st_)
        assert np.abs(cons.phi).max() < 1e-12
        assert np.all(st_.qdot == 0)

    @given(st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_spring_init_near_regular_polygon(self, seed):
        spec = physics.spring(5)
        st_ = physics.random_initial_state(spec, seed)
        for i, j in physics.spring_edges(5):
            dist = np.linalg.norm(st_.q[i] - st_.q[j])
            assert abs(dist - spec.rest_length) < 0.5 * spec.rest_length

    def test_deterministic(self):
        spec = physics.pendulum(3)
        a = physics.random_initial_state(spec, 42)
        b = physics.random_initial_state(spec, 42)
        assert np.array_equal(a.q, b.q)


def test_trajectory_json_roundtrip(tmp_path):
    spec = physics.spring(3)
    init = physics.random_initial_state(spec, 0)
    traj = physics.simulate(spec, init, 1e-3, 200, 100)
    path = tmp_path / "traj.json"
    physics.save_trajectory(traj, path)
    back = physics.load_trajectory(path)
    assert np.array_equal(back.qs, traj.qs)
    assert np.array_equal(back.qdots, traj.qdots)
    assert back.spec == traj.spec
    assert back.truncated == traj.truncated

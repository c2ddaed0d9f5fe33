"""Sampling MPC: clearance, cost, selection and warm start."""

import numpy as np
import pytest


def _open_map(value=1.0):
    from travnavsim.maps import TraversabilityMap

    return TraversabilityMap.uniform((-5.0, -5.0), 0.1, (100, 100), value)


def _cfg(**kw):
    from travnavsim.config import MPCConfig

    base = dict(N=20, num_samples=64, selection="best_of_n")
    base.update(kw)
    return MPCConfig(**base)


def _lattice(N):
    return np.array([np.tile([v, w], (N, 1)) for v in (0.0, 0.5, 1.0) for w in (-1.0, 0.0, 1.0)])


def _gap_map():
    """10 m x 10 m at 0.2 m; zero-traction wall at x in [5.0, 5.4) with a gap at y in [5.6, 6.6)."""
    from travnavsim.maps import TraversabilityMap

    mu = np.ones((50, 50))
    mu[:, 25:27] = 0.0
    mu[28:33, 25:27] = 1.0
    return TraversabilityMap((0.0, 0.0), 0.2, mu, mu.copy())


class TestClearance:
    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_single_blocked_cell_grows_to_kernel(self, k):
        from travnavsim.control.mpc import clearance_minpool
        from travnavsim.maps import TraversabilityMap

        mu = np.ones((21, 21))
        mu[10, 10] = 0.0
        out = clearance_minpool(TraversabilityMap((0.0, 0.0), 0.1, mu, mu.copy()), k)
        assert int(np.sum(out.mu == 0.0)) == k * k
        assert int(np.sum(out.nu == 0.0)) == k * k

    def test_never_raises_traversability(self):
        from travnavsim.control.mpc import clearance_minpool
        from travnavsim.maps import TraversabilityMap

        rng = np.random.default_rng(2)
        m = TraversabilityMap((0.0, 0.0), 0.1, rng.uniform(size=(15, 15)), rng.uniform(size=(15, 15)))
        out = clearance_minpool(m, 5)
        assert np.all(out.mu <= m.mu) and np.all(out.nu <= m.nu)

    def test_unit_kernel_is_identity(self):
        from travnavsim.control.mpc import clearance_minpool

        m = _open_map(0.4)
        assert clearance_minpool(m, 1) is m

    @pytest.mark.parametrize("k", [0, 2, 4])
    def test_even_or_empty_kernel_rejected(self, k):
        from travnavsim.control.mpc import clearance_minpool

        with pytest.raises(ValueError, match="odd"):
            clearance_minpool(_open_map(), k)


class TestAngularScale:
    def test_scales_and_saturates(self):
        from travnavsim.control.mpc import scale_angular_channel
        from travnavsim.maps import TraversabilityMap

        nu = np.array([[0.4, 0.6]])
        out = scale_angular_channel(TraversabilityMap((0.0, 0.0), 1.0, np.full((1, 2), 0.3), nu), 2.5)
        assert out.nu == pytest.approx([[1.0, 1.0]])
        assert out.mu == pytest.approx([[0.3, 0.3]])

    def test_non_positive_factor_rejected(self):
        from travnavsim.control.mpc import scale_angular_channel

        with pytest.raises(ValueError):
            scale_angular_channel(_open_map(), 0.0)


class TestReference:
    def test_advance_within_radius(self):
        from travnavsim.control.mpc import Reference, advance_waypoint
        from travnavsim.dynamics.kinodynamics import State2D

        ref = Reference.create([(1.0, 0.0), (5.0, 0.0)], arrival_radius=0.5)
        ref = advance_waypoint(State2D(0.7, 0.1, 0.0), ref)
        assert ref.active == (5.0, 0.0) and ref.reached == 1
        assert advance_waypoint(State2D(0.7, 0.1, 0.0), ref) is ref

    def test_last_waypoint_completes(self):
        from travnavsim.control.mpc import Reference, advance_waypoint
        from travnavsim.dynamics.kinodynamics import State2D

        ref = advance_waypoint(State2D(2.0, 2.0, 0.0), Reference.create([(2.1, 2.0)]))
        assert ref.complete and ref.active is None
        assert advance_waypoint(State2D(0.0, 0.0, 0.0), ref) is ref

    def test_empty_mission_rejected(self):
        from travnavsim.control.mpc import Reference

        with pytest.raises(ValueError):
            Reference.create([])

    def test_reference_speed_slows_near_goal(self):
        from travnavsim.control.mpc import Reference, reference_control
        from travnavsim.dynamics.kinodynamics import State2D

        cfg = _cfg(v_cruise=0.8, slowdown_radius=1.0)
        ref = Reference.create([(0.5, 0.0)])
        assert reference_control(State2D(0.0, 0.0, 0.0), ref, cfg) == pytest.approx([0.4, 0.0])
        assert reference_control(State2D(-3.0, 0.0, 0.0), ref, cfg) == pytest.approx([0.8, 0.0])


class TestTrajectoryCost:
    def _straight(self):
        from travnavsim.dynamics.kinodynamics import State2D, rollout_const

        U = [[1.0, 0.0], [1.0, 0.0]]
        return rollout_const(State2D(0.0, 0.0, 0.0), U, 1.0, 1.0, 1.0), U

    def test_all_weights_zero(self):
        from travnavsim.control.mpc import Reference, trajectory_cost

        traj, U = self._straight()
        cfg = _cfg(N=2, dt=1.0, Q=[0, 0, 0], R=[0, 0], QN=[0, 0, 0], W_mu=0.0, W_nu=0.0)
        assert trajectory_cost(traj, U, Reference.create([(3.0, 0.0)]), _open_map(0.5), cfg) == 0.0

    def test_two_step_hand_computed(self):
        from travnavsim.control.mpc import Reference, trajectory_cost

        # track (3² + 2²) + effort 2·(1 − 0.8)² − reward 3·0.5
        traj, U = self._straight()
        cfg = _cfg(N=2, dt=1.0, Q=[1, 1, 0], R=[1, 0], QN=[0, 0, 0], W_mu=1.0, W_nu=0.0)
        cost = trajectory_cost(traj, U, Reference.create([(3.0, 0.0)]), _open_map(0.5), cfg)
        assert cost == pytest.approx(13.0 + 0.08 - 1.5)

    def test_terminal_weight(self):
        from travnavsim.control.mpc import Reference, trajectory_cost

        traj, U = self._straight()
        cfg = _cfg(N=2, dt=1.0, Q=[0, 0, 0], R=[0, 0], QN=[2, 2, 0], W_mu=0.0, W_nu=0.0)
        assert trajectory_cost(traj, U, Reference.create([(3.0, 1.0)]), _open_map(), cfg) == pytest.approx(2.0 * (1.0 + 1.0))

    def test_more_traversable_map_costs_less(self):
        from travnavsim.control.mpc import Reference, trajectory_cost

        traj, U = self._straight()
        ref = Reference.create([(3.0, 0.0)])
        cfg = _cfg(N=2, dt=1.0)
        costs = [trajectory_cost(traj, U, ref, _open_map(v), cfg) for v in (0.2, 0.5, 0.9)]
        assert costs[0] > costs[1] > costs[2]


class TestArcCandidates:
    def test_lattice_layout(self):
        from travnavsim.control.mpc import arc_candidates

        cfg = _cfg(N=40, arc_rates=7)
        arcs = arc_candidates(np.array([0.8, 0.0]), cfg)
        # six non-zero rates x (four single arcs + three S-curves that fit 40 steps)
        assert arcs.shape == (42, 40, 2)
        assert np.all(arcs[..., 0] == 0.8)
        assert np.all(np.abs(arcs[..., 1]) <= cfg.omega_max)
        net_turn = arcs[..., 1].sum(axis=1)
        assert int(np.sum(np.isclose(net_turn, 0.0))) == 18

    def test_speed_clipped_to_limits(self):
        from travnavsim.control.mpc import arc_candidates

        arcs = arc_candidates(np.array([0.8, 0.0]), _cfg(v_max=0.5))
        assert np.all(arcs[..., 0] == 0.5)

    def test_disabled(self):
        from travnavsim.control.mpc import arc_candidates

        assert arc_candidates(np.array([0.8, 0.0]), _cfg(arc_rates=0)).shape == (0, 20, 2)


class TestSolveMPC:
    def test_open_ground_moves_toward_goal(self):
        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        sol = solve_mpc(State2D(0.0, 0.0, 0.0), Reference.create([(4.0, 0.0)]), _open_map(), _cfg(), np.random.default_rng(0))
        assert sol.control.v > 0.0
        assert not sol.diagnostics.stuck
        assert sol.diagnostics.selected_cost <= sol.diagnostics.nominal_cost + 1e-9
        assert sol.diagnostics.selected_cost == pytest.approx(sol.diagnostics.best_cost)
        assert len(sol.trajectory) == 21

    def test_controls_respect_limits(self):
        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        cfg = _cfg(selection="exponential_weighting", noise_sigma=[2.0, 5.0], v_max=0.6, omega_max=0.5)
        sol = solve_mpc(State2D(0.0, 0.0, 0.0), Reference.create([(0.0, 4.0)]), _open_map(), cfg, np.random.default_rng(1), keep_samples=True)
        U = sol.trajectory.controls
        assert np.all((U[:, 0] >= 0.0) & (U[:, 0] <= 0.6))
        assert np.all(np.abs(U[:, 1]) <= 0.5)
        assert sol.samples.shape == (64, 21, 3)

    def test_sample_count_includes_turn_lattice(self):
        from travnavsim.control.mpc import Reference, arc_candidates, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        cfg = _cfg()
        sol = solve_mpc(State2D(0.0, 0.0, 0.0), Reference.create([(4.0, 0.0)]), _open_map(), cfg, np.random.default_rng(0), keep_samples=True)
        assert sol.diagnostics.num_samples == cfg.num_samples
        assert arc_candidates(np.array([0.8, 0.0]), cfg).shape[0] < cfg.num_samples

    def test_detours_through_off_line_gap(self):
        from travnavsim.control.mpc import Reference, arc_candidates, reference_control, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        # the straight line y = 5 is walled off; only a detour of about 1 m reaches the goal
        tmap = _gap_map()
        cfg = _cfg(N=40, num_samples=128, W_mu=5.0, W_nu=5.0)
        x0 = State2D(4.0, 5.0, 0.0)
        ref = Reference.create([(9.0, 5.0)])
        u_ref = reference_control(x0, ref, cfg)
        lattice = np.concatenate([np.tile(u_ref, (1, cfg.N, 1)), arc_candidates(u_ref, cfg)])
        oracle = solve_mpc(x0, ref, tmap, cfg, np.random.default_rng(0), candidates=lattice)
        sampled = solve_mpc(x0, ref, tmap, cfg, np.random.default_rng(0))

        for sol in (oracle, sampled):
            S = sol.trajectory.states
            assert S[:, 0].max() > 5.4
            in_wall = (S[:, 0] >= 5.0) & (S[:, 0] < 5.4)
            assert np.all((S[in_wall, 1] > 5.6) & (S[in_wall, 1] < 6.6))
            assert sol.trajectory.mu.min() > 0.5
            assert sol.diagnostics.selected_cost < sol.diagnostics.nominal_cost
        assert sampled.diagnostics.selected_cost <= oracle.diagnostics.selected_cost + 1e-6

    def test_near_zero_traction_at_wall_face_is_stuck(self):
        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        # bilinear traction 0.01 just in front of the wall cell centre
        x0 = State2D(5.098, 5.0, 0.0)
        ref = Reference.create([(9.0, 5.0)])
        assert solve_mpc(x0, ref, _gap_map(), _cfg(), np.random.default_rng(0)).diagnostics.stuck
        assert not solve_mpc(x0, ref, _gap_map(), _cfg(stuck_traction=0.0), np.random.default_rng(0)).diagnostics.stuck

    def test_at_goal_control_stays_near_zero(self):
        from travnavsim.config import MPCConfig
        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        cfg = MPCConfig()
        for seed in range(20):
            sol = solve_mpc(State2D(1.0, -2.0, 0.4), Reference.create([(1.0, -2.0)]), _open_map(), cfg, np.random.default_rng(seed))
            assert abs(sol.control.v) < 0.05 * cfg.v_max
            assert abs(sol.control.omega) < 0.05 * cfg.omega_max

    def test_zero_traction_start_is_stuck(self):
        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        sol = solve_mpc(State2D(0.0, 0.0, 0.0), Reference.create([(4.0, 0.0)]), _open_map(0.0), _cfg(), np.random.default_rng(0))
        assert sol.diagnostics.stuck
        assert (sol.control.v, sol.control.omega) == (0.0, 0.0)

    def test_completed_mission_holds(self):
        from dataclasses import replace

        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        done = replace(Reference.create([(1.0, 1.0)]), waypoints=())
        sol = solve_mpc(State2D(1.0, 1.0, 0.0), done, _open_map(), _cfg(), np.random.default_rng(0))
        assert (sol.control.v, sol.control.omega) == (0.0, 0.0)
        assert np.allclose(sol.trajectory.states, [1.0, 1.0, 0.0])

    @pytest.mark.parametrize("goal", [(3.0, 0.0), (1.0, 2.5), (1.0, -2.5)])
    def test_best_of_n_matches_exhaustive_lattice(self, goal):
        from travnavsim.control.mpc import Reference, clearance_minpool, scale_angular_channel, solve_mpc, trajectory_cost
        from travnavsim.dynamics.kinodynamics import State2D, rollout_map
        from travnavsim.maps import TraversabilityMap

        mu = np.ones((100, 100))
        mu[40:60, 60:65] = 0.0  # block at x ∈ [1.0, 1.5], y ∈ [-1, 1]
        tmap = TraversabilityMap((-5.0, -5.0), 0.1, mu, mu.copy())
        cfg = _cfg(N=15, angular_scale=1.5)
        cand = _lattice(cfg.N)
        x0 = State2D(0.0, 0.0, 0.0)
        ref = Reference.create([goal])
        sol = solve_mpc(x0, ref, tmap, cfg, np.random.default_rng(0), candidates=cand)

        rollout = scale_angular_channel(tmap, cfg.angular_scale)
        reward_map = clearance_minpool(tmap, cfg.clearance_k)
        costs = [trajectory_cost(rollout_map(x0, U, rollout, cfg.dt), U, ref, reward_map, cfg) for U in cand]
        best = int(np.argmin(costs))
        assert sol.diagnostics.num_samples == len(cand)
        assert sol.diagnostics.selected_cost == pytest.approx(costs[best])

    def test_cold_weighting_picks_best_sample(self):
        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        cand = _lattice(10)
        ref = Reference.create([(2.0, 1.0)])
        x0 = State2D(0.0, 0.0, 0.0)
        best = solve_mpc(x0, ref, _open_map(), _cfg(N=10), np.random.default_rng(0), candidates=cand)
        cold = solve_mpc(
            x0, ref, _open_map(), _cfg(N=10, selection="exponential_weighting", temperature=1e-9), np.random.default_rng(0), candidates=cand
        )
        assert np.allclose(cold.trajectory.controls, best.trajectory.controls)

    def test_candidate_shape_checked(self):
        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        with pytest.raises(ValueError, match="candidates"):
            solve_mpc(State2D(0.0, 0.0, 0.0), Reference.create([(2.0, 0.0)]), _open_map(), _cfg(N=10), np.random.default_rng(0), candidates=_lattice(5))

    def test_same_seed_same_control(self):
        from travnavsim.control.mpc import Reference, solve_mpc
        from travnavsim.dynamics.kinodynamics import State2D

        args = (State2D(0.0, 0.0, 0.3), Reference.create([(3.0, 2.0)]), _open_map(0.8))
        a = solve_mpc(*args, _cfg(selection="exponential_weighting"), np.random.default_rng(7))
        b = solve_mpc(*args, _cfg(selection="exponential_weighting"), np.random.default_rng(7))
        assert a.control == b.control


class TestMPCController:
    def test_warm_start_shifts_solution(self):
        from travnavsim.control.mpc import MPCController, Reference
        from travnavsim.dynamics.kinodynamics import State2D

        ctrl = MPCController(_cfg(), seed=3)
        sol = ctrl.step(State2D(0.0, 0.0, 0.0), Reference.create([(4.0, 0.0)]), _open_map())
        U = sol.trajectory.controls
        assert np.array_equal(ctrl.nominal[:-1], U[1:])
        assert np.array_equal(ctrl.nominal[-1], U[-1])

    def test_stuck_clears_warm_start(self):
        from travnavsim.control.mpc import MPCController, Reference
        from travnavsim.dynamics.kinodynamics import State2D

        ctrl = MPCController(_cfg(), seed=3)
        ref = Reference.create([(4.0, 0.0)])
        ctrl.step(State2D(0.0, 0.0, 0.0), ref, _open_map())
        assert ctrl.nominal is not None
        ctrl.step(State2D(0.0, 0.0, 0.0), ref, _open_map(0.0))
        assert ctrl.nominal is None

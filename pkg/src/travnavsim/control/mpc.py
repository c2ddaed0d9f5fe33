"""Sampling-based MPC over the map-parameterized model.

Cost of a control sequence u_0..u_{N-1} from x_0 (rollout x_0..x_N):

    Σ_{i<N} ‖x_i − x^r‖²_Q + ‖u_i − u^r‖²_R
  − Σ_{i≤N} (W_mu·mu(p_i) + W_nu·nu(p_i)·angular_scale)
  + ‖x_N − x^r‖²_QN

x^r is the active waypoint; its heading component is the bearing from the
state to the waypoint (ignored under the default zero heading weight).
u^r = (v_cruise·min(1, d/slowdown_radius), 0) with d the distance from x_0
to the waypoint. Rollouts integrate through the angular-scaled map; the
reward samples the clearance-processed map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence
import logging
import math

import numpy as np
from scipy.ndimage import minimum_filter

from ..config import MPCConfig
from ..dynamics.kinodynamics import Control, State2D, Trajectory, as_control_array, rollout_batch
from ..geometry import wrap_angle
from ..maps import TraversabilityMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Reference:
    waypoints: tuple[tuple[float, float], ...]
    arrival_radius: float = 0.5
    reached: int = 0

    def __post_init__(self):
        if not self.arrival_radius > 0:
            raise ValueError(f"arrival_radius must be > 0, got {self.arrival_radius}")
        object.__setattr__(self, "waypoints", tuple((float(x), float(y)) for x, y in self.waypoints))

    @classmethod
    def create(cls, waypoints: Sequence[Sequence[float]], arrival_radius: float = 0.5) -> "Reference":
        if len(waypoints) == 0:
            raise ValueError("a mission needs at least one waypoint")
        return cls(tuple((float(w[0]), float(w[1])) for w in waypoints), arrival_radius)

    @property
    def complete(self) -> bool:
        return not self.waypoints

    @property
    def active(self) -> tuple[float, float] | None:
        return self.waypoints[0] if self.waypoints else None

    def distance(self, state: State2D) -> float:
        if self.complete:
            return 0.0
        wx, wy = self.waypoints[0]
        return math.hypot(wx - state.px, wy - state.py)


def advance_waypoint(state: State2D, ref: Reference) -> Reference:
    """Pop the active waypoint once the state is within the arrival radius."""
    if ref.complete or ref.distance(state) >= ref.arrival_radius:
        return ref
    return replace(ref, waypoints=ref.waypoints[1:], reached=ref.reached + 1)


def clearance_minpool(tmap: TraversabilityMap, k: int) -> TraversabilityMap:
    """k×k neighbourhood minimum per channel, border replicated."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"clearance kernel must be odd and >= 1, got {k}")
    if k == 1:
        return tmap
    return tmap.with_channels(
        minimum_filter(tmap.mu, size=k, mode="nearest"),
        minimum_filter(tmap.nu, size=k, mode="nearest"),
    )


def scale_angular_channel(tmap: TraversabilityMap, factor: float) -> TraversabilityMap:
    if not factor > 0:
        raise ValueError(f"angular scale factor must be > 0, got {factor}")
    if factor == 1.0:
        return tmap
    return tmap.with_channels(tmap.mu, np.clip(tmap.nu * factor, 0.0, 1.0))


def reference_control(x0: State2D, ref: Reference, cfg: MPCConfig) -> np.ndarray:
    if ref.complete:
        return np.zeros(2)
    d = ref.distance(x0)
    scale = min(1.0, d / cfg.slowdown_radius) if cfg.slowdown_radius > 0 else 1.0
    return np.array([cfg.v_cruise * scale, 0.0])


def _cost_batch(
    S: np.ndarray,
    U: np.ndarray,
    goal: np.ndarray,
    u_ref: np.ndarray,
    cost_map: TraversabilityMap,
    cfg: MPCConfig,
) -> np.ndarray:
    """S (K, N+1, 3), U (K, N, 2) → costs (K,)."""
    Q, R, QN = cfg.weight("Q", 3), cfg.weight("R", 2), cfg.weight("QN", 3)
    dx = S[..., 0] - goal[0]
    dy = S[..., 1] - goal[1]
    bearing = np.arctan2(-dy, -dx)
    eth = np.where(np.hypot(dx, dy) > 0, wrap_angle(S[..., 2] - bearing), 0.0)
    E = np.stack([dx, dy, eth], axis=-1)  # (K, N+1, 3)
    Eu = U - u_ref
    track = np.einsum("kni,ij,knj->k", E[:, :-1], Q, E[:, :-1])
    effort = np.einsum("kni,ij,knj->k", Eu, R, Eu)
    terminal = np.einsum("ki,ij,kj->k", E[:, -1], QN, E[:, -1])
    mu, nu = cost_map.sample(S[..., 0], S[..., 1])
    reward = np.sum(cfg.W_mu * mu + cfg.W_nu * nu * cfg.angular_scale, axis=1)
    return track + effort - reward + terminal


def trajectory_cost(traj: Trajectory, controls, ref: Reference, tmap: TraversabilityMap, cfg: MPCConfig) -> float:
    """Cost of one rolled-out trajectory; ``tmap`` is used as given for the reward."""
    U = as_control_array(controls)
    x0 = traj.state(0)
    goal = np.array(ref.active if not ref.complete else (x0.px, x0.py))
    return float(_cost_batch(traj.states[None], U[None], goal, reference_control(x0, ref, cfg), tmap, cfg)[0])


@dataclass
class MPCDiagnostics:
    selection: str
    num_samples: int
    best_cost: float
    nominal_cost: float
    selected_cost: float
    stuck: bool
    waypoint: tuple[float, float] | None


@dataclass
class MPCSolution:
    control: Control
    trajectory: Trajectory
    diagnostics: MPCDiagnostics
    next_nominal: np.ndarray
    samples: np.ndarray | None = field(default=None, repr=False)  # (K, N+1, 3) when requested


def _clip_controls(U: np.ndarray, cfg: MPCConfig) -> np.ndarray:
    out = np.empty_like(U)
    out[..., 0] = np.clip(U[..., 0], cfg.v_min, cfg.v_max)
    out[..., 1] = np.clip(U[..., 1], -cfg.omega_max, cfg.omega_max)
    return out


_ARC_FRACTIONS = (1 / 8, 1 / 4, 1 / 2, 1.0)


def arc_candidates(u_ref: np.ndarray, cfg: MPCConfig) -> np.ndarray:
    """Deterministic turn lattice at the reference speed, shape (K, N, 2).

    For every non-zero rate in ``linspace(-omega_max, omega_max, arc_rates)``
    and every turn length ``round(f * N)``: a single arc followed by straight
    driving, and, where it fits the horizon, an S-curve (turn, equal counter
    turn, straight) that shifts the path sideways at the original heading.
    ``arc_rates = 0`` disables the lattice.
    """
    N = cfg.N
    if cfg.arc_rates == 0:
        return np.zeros((0, N, 2))
    rates = [w for w in np.linspace(-cfg.omega_max, cfg.omega_max, cfg.arc_rates) if abs(w) > 1e-12]
    lengths = sorted({max(1, int(round(f * N))) for f in _ARC_FRACTIONS})
    out = []
    for w in rates:
        for n in lengths:
            U = np.zeros((N, 2))
            U[:, 0] = u_ref[0]
            U[:n, 1] = w
            out.append(U)
            if 2 * n <= N:
                S = U.copy()
                S[n : 2 * n, 1] = -w
                out.append(S)
    return _clip_controls(np.stack(out), cfg) if out else np.zeros((0, N, 2))


def _hold(x0: State2D, cfg: MPCConfig, tmap: TraversabilityMap) -> Trajectory:
    S = np.tile(x0.as_array(), (cfg.N + 1, 1))
    mu, nu = tmap.sample(S[:, 0], S[:, 1])
    return Trajectory(S, np.zeros((cfg.N, 2)), cfg.dt, mu, nu)


def solve_mpc(
    x0: State2D,
    ref: Reference,
    tmap: TraversabilityMap,
    cfg: MPCConfig,
    rng: np.random.Generator,
    nominal: np.ndarray | None = None,
    candidates: np.ndarray | None = None,
    keep_samples: bool = False,
) -> MPCSolution:
    """Score sampled control sequences and return the first action of the selection.

    ``candidates`` (K, N, 2) replaces the sample set entirely. Otherwise
    sample 0 is the (clipped) nominal, the next ones are the turn lattice of
    :func:`arc_candidates` and the rest perturb the nominal with Gaussian
    noise, ``num_samples`` in total. Without a nominal the straight-line
    sequence (v^r, 0) is used. A start whose traction is below
    ``stuck_traction`` on both channels returns a zero control flagged stuck.
    """
    N = cfg.N
    rollout = scale_angular_channel(tmap, cfg.angular_scale)
    cost_map = clearance_minpool(tmap, cfg.clearance_k)
    zero = np.zeros((N, 2))

    if ref.complete:
        diag = MPCDiagnostics(cfg.selection, 0, 0.0, 0.0, 0.0, False, None)
        return MPCSolution(Control(0.0, 0.0), _hold(x0, cfg, rollout), diag, zero)

    mu0, nu0 = rollout.sample(x0.px, x0.py)
    if float(mu0) < cfg.stuck_traction and float(nu0) < cfg.stuck_traction:
        logger.debug("x0 (%.2f, %.2f) sits on a near-zero traction cell (mu %.3g, nu %.3g)", x0.px, x0.py, mu0, nu0)
        diag = MPCDiagnostics(cfg.selection, 0, math.inf, math.inf, math.inf, True, ref.active)
        return MPCSolution(Control(0.0, 0.0), _hold(x0, cfg, rollout), diag, zero)

    u_ref = reference_control(x0, ref, cfg)
    goal = np.array(ref.active)
    if nominal is None:
        nominal = np.tile(u_ref, (N, 1))
    nominal = _clip_controls(np.asarray(nominal, dtype=float).reshape(N, 2), cfg)

    if candidates is not None:
        samples = _clip_controls(np.asarray(candidates, dtype=float), cfg)
        if samples.ndim != 3 or samples.shape[1:] != (N, 2):
            raise ValueError(f"candidates must have shape (K, {N}, 2), got {samples.shape}")
    else:
        K = max(1, int(cfg.num_samples))
        arcs = arc_candidates(u_ref, cfg)[: K - 1]
        sigma = np.asarray(cfg.noise_sigma, dtype=float)
        noise = rng.normal(0.0, 1.0, size=(K - 1 - arcs.shape[0], N, 2)) * sigma
        samples = np.concatenate([nominal[None], arcs, _clip_controls(nominal[None] + noise, cfg)])

    S, _, _ = rollout_batch(x0.as_array(), samples, rollout, cfg.dt)
    costs = _cost_batch(S, samples, goal, u_ref, cost_map, cfg)
    S_nom, _, _ = rollout_batch(x0.as_array(), nominal[None], rollout, cfg.dt)
    nominal_cost = float(_cost_batch(S_nom, nominal[None], goal, u_ref, cost_map, cfg)[0])

    best = int(np.argmin(costs))
    if cfg.selection == "best_of_n":
        U = samples[best]
    else:
        w = np.exp(-(costs - costs[best]) / cfg.temperature)
        w /= w.sum()
        U = _clip_controls(np.einsum("k,knj->nj", w, samples), cfg)

    S_sel, MU, NU = rollout_batch(x0.as_array(), U[None], rollout, cfg.dt)
    selected_cost = float(_cost_batch(S_sel, U[None], goal, u_ref, cost_map, cfg)[0])
    traj = Trajectory(S_sel[0], U, cfg.dt, MU[0], NU[0])
    diag = MPCDiagnostics(
        cfg.selection,
        int(samples.shape[0]),
        float(costs[best]),
        nominal_cost,
        selected_cost,
        False,
        ref.active,
    )
    next_nominal = np.concatenate([U[1:], U[-1:]])
    return MPCSolution(Control(float(U[0, 0]), float(U[0, 1])), traj, diag, next_nominal, S if keep_samples else None)


class MPCController:
    """Warm-started controller: each solution's shifted sequence seeds the next call."""

    def __init__(self, cfg: MPCConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.nominal: np.ndarray | None = None

    def reset(self) -> None:
        self.nominal = None

    def step(self, x0: State2D, ref: Reference, tmap: TraversabilityMap, keep_samples: bool = False) -> MPCSolution:
        sol = solve_mpc(x0, ref, tmap, self.cfg, self.rng, nominal=self.nominal, keep_samples=keep_samples)
        self.nominal = None if sol.diagnostics.stuck else sol.next_nominal
        return sol

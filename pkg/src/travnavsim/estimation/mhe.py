"""Moving-horizon estimation of pose, traction and compass offset.

Over a window of N+1 GNSS/compass measurements and N controls the estimator
solves

    min  ||x_k - x~||^2_Px + ||m - m~||^2_Pm + sum_i ||x_i - h(z_i, dtheta)||^2_Pw
    s.t. x_{i+1} = f(x_i, u_i; mu, nu),  mu, nu in [0, 1],  dtheta in [-pi, pi)

with m = (mu, nu, dtheta). States are eliminated by single shooting from
x_k, so the decision vector has six entries (px, py, theta, mu, nu, dtheta).
The residual Jacobian is propagated analytically through the dynamics.

Solvers
-------
- ``gauss_newton_projected``: Gauss-Newton steps projected onto the box,
  with Levenberg damping whenever a step fails to decrease the cost.
- ``lm_box``: scipy's bounded trust-region reflective least squares.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Sequence
import logging
import math

import numpy as np
from scipy.optimize import least_squares

from ..config import EstimatorConfig
from ..dynamics.kinodynamics import Control, State2D, as_control_array
from ..geometry import wrap_angle
from ..world.sensors import Measurement

logger = logging.getLogger(__name__)

PARAM_NAMES = ("px", "py", "theta", "mu", "nu", "dtheta")
_LOWER = np.array([-np.inf, -np.inf, -np.inf, 0.0, 0.0, -np.inf])
_UPPER = np.array([np.inf, np.inf, np.inf, 1.0, 1.0, np.inf])


@dataclass(frozen=True)
class ParamVector:
    mu: float
    nu: float
    dtheta: float

    def __post_init__(self):
        if not (0.0 <= self.mu <= 1.0 and 0.0 <= self.nu <= 1.0):
            raise ValueError(f"traction must lie in [0,1], got mu={self.mu}, nu={self.nu}")
        if not -math.pi <= self.dtheta < math.pi:
            raise ValueError(f"dtheta must lie in [-pi, pi), got {self.dtheta}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.nu, self.dtheta])

    @classmethod
    def prior(cls, cfg: EstimatorConfig) -> "ParamVector":
        return cls(cfg.prior_mu, cfg.prior_nu, float(wrap_angle(cfg.prior_dtheta)))


@dataclass(frozen=True)
class MeasurementWindow:
    measurements: np.ndarray  # (N+1, 3): px, py, compass heading
    controls: np.ndarray  # (N, 2)
    prior_state: State2D
    prior_params: ParamVector

    def __post_init__(self):
        z = _as_measurement_array(self.measurements)
        u = as_control_array(self.controls)
        if z.shape[0] != u.shape[0] + 1:
            raise ValueError(
                f"window needs |z| = |u| + 1, got {z.shape[0]} measurements and {u.shape[0]} controls"
            )
        if u.shape[0] < 1:
            raise ValueError("window needs at least one control")
        object.__setattr__(self, "measurements", z)
        object.__setattr__(self, "controls", u)

    @property
    def N(self) -> int:
        return self.controls.shape[0]


@dataclass(frozen=True)
class MHEDiagnostics:
    solver: str
    iterations: int
    cost: float
    converged: bool
    low_excitation: bool
    frozen: tuple[str, ...]
    cost_history: tuple[float, ...]


class MHEResult(NamedTuple):
    states: tuple[State2D, ...]
    params: ParamVector
    diagnostics: MHEDiagnostics


@dataclass(frozen=True)
class LabelRecord:
    step: int
    state: State2D
    mu: float
    nu: float
    low_excitation: bool
    converged: bool


def _as_measurement_array(z) -> np.ndarray:
    if isinstance(z, np.ndarray):
        arr = z.astype(float)
    else:
        arr = np.array(
            [m.as_array() if isinstance(m, Measurement) else np.asarray(m, dtype=float) for m in z],
            dtype=float,
        )
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"measurements must have shape (N+1, 3), got {arr.shape}")
    return arr


def measurement_model(z: Measurement, dtheta: float) -> State2D:
    """h(z, dtheta): GNSS position, compass heading corrected by the North offset."""
    return State2D(float(z.px), float(z.py), float(wrap_angle(z.heading - dtheta)))


def _sqrt_psd(P: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(P)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _shoot(x: np.ndarray, U: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """States (N+1, 3) with unwrapped heading and sensitivities (N+1, 3, 5)."""
    N = U.shape[0]
    px0, py0, th0, mu, nu = x[:5]
    S = np.zeros((N + 1, 3))
    D = np.zeros((N + 1, 3, 5))
    S[0] = (px0, py0, th0)
    D[0, 0, 0] = D[0, 1, 1] = D[0, 2, 2] = 1.0
    for i in range(N):
        v, w = U[i]
        c, s = math.cos(S[i, 2]), math.sin(S[i, 2])
        S[i + 1, 0] = S[i, 0] + mu * v * c * dt
        S[i + 1, 1] = S[i, 1] + mu * v * s * dt
        S[i + 1, 2] = S[i, 2] + nu * w * dt
        dth = D[i, 2]
        D[i + 1, 0] = D[i, 0] - dt * v * mu * s * dth
        D[i + 1, 0, 3] += dt * v * c
        D[i + 1, 1] = D[i, 1] + dt * v * mu * c * dth
        D[i + 1, 1, 3] += dt * v * s
        D[i + 1, 2] = D[i, 2]
        D[i + 1, 2, 4] += dt * w
    return S, D


class _Problem:
    """Residual stack r(x) = [Lx e_x; Lm e_m; Lw e_0; ...; Lw e_N] and its Jacobian."""

    def __init__(self, window: MeasurementWindow, cfg: EstimatorConfig):
        self.z = window.measurements
        self.U = window.controls
        self.dt = cfg.dt
        self.x_prior = window.prior_state.as_array()
        self.m_prior = window.prior_params.as_array()
        self.Lx = _sqrt_psd(cfg.weight("Px"))
        self.Lm = _sqrt_psd(cfg.weight("Pm"))
        self.Lw = _sqrt_psd(cfg.weight("Pw"))

    def residuals(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        S, D = _shoot(x, self.U, self.dt)
        n = S.shape[0]
        e_x = x[:3] - self.x_prior
        e_x[2] = wrap_angle(e_x[2])
        e_m = x[3:] - self.m_prior
        e_m[2] = wrap_angle(e_m[2])
        e = S - self.z
        e[:, 2] = wrap_angle(S[:, 2] - self.z[:, 2] + x[5])

        J_e = np.zeros((n, 3, 6))
        J_e[:, :, :5] = D
        J_e[:, 2, 5] = 1.0

        r = np.concatenate([self.Lx @ e_x, self.Lm @ e_m, (e @ self.Lw.T).ravel()])
        J = np.zeros((6 + 3 * n, 6))
        J[0:3, 0:3] = self.Lx
        J[3:6, 3:6] = self.Lm
        J[6:] = np.einsum("ab,nbk->nak", self.Lw, J_e).reshape(3 * n, 6)
        return r, J

    def states(self, x: np.ndarray) -> tuple[State2D, ...]:
        S, _ = _shoot(x, self.U, self.dt)
        return tuple(State2D.from_array(s) for s in S)


def mhe_residuals(x: np.ndarray, window: MeasurementWindow, cfg: EstimatorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Residual stack and analytic Jacobian at decision vector x (6,)."""
    return _Problem(window, cfg).residuals(np.asarray(x, dtype=float))


def _project(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x[3:5] = np.clip(x[3:5], 0.0, 1.0)
    x[2] = wrap_angle(x[2])
    x[5] = wrap_angle(x[5])
    return x


def _excitation(window: MeasurementWindow, cfg: EstimatorConfig) -> tuple[bool, bool]:
    lin = float(np.sum(np.abs(window.controls[:, 0])) * cfg.dt)
    ang = float(np.sum(np.abs(window.controls[:, 1])) * cfg.dt)
    return lin >= cfg.min_linear_excitation, ang >= cfg.min_angular_excitation


def _gauss_newton(prob: _Problem, x0: np.ndarray, free: np.ndarray, cfg: EstimatorConfig):
    x = _project(x0)
    r, J = prob.residuals(x)
    cost = float(r @ r)
    history = [cost]
    lam = 0.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        Jf = J[:, free]
        g = Jf.T @ r
        A = Jf.T @ Jf
        accepted = False
        step = np.zeros(int(free.sum()))
        for _ in range(30):
            try:
                step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-6)
                continue
            cand = x.copy()
            cand[free] += step
            cand = _project(cand)
            rc, Jc = prob.residuals(cand)
            cc = float(rc @ rc)
            if np.isfinite(cc) and cc <= cost:
                accepted = True
                break
            lam = max(lam * 10.0, 1e-6)
        if not accepted:
            # no descent direction left at machine precision
            converged = bool(np.linalg.norm(g) <= math.sqrt(cfg.tol) * (1.0 + cost))
            break
        decrease = cost - cc
        x, r, J, cost = cand, rc, Jc, cc
        history.append(cost)
        lam = lam / 10.0 if lam > 1e-9 else 0.0
        if decrease <= cfg.tol * (1.0 + cost) and np.linalg.norm(step) <= math.sqrt(cfg.tol) * (
            1.0 + np.linalg.norm(x)
        ):
            converged = True
            break
    return x, cost, it, converged, history


def _lm_box(prob: _Problem, x0: np.ndarray, free: np.ndarray, cfg: EstimatorConfig):
    base = _project(x0)

    def full(xf):
        x = base.copy()
        x[free] = xf
        return x

    def fun(xf):
        return prob.residuals(full(xf))[0]

    def jac(xf):
        return prob.residuals(full(xf))[1][:, free]

    res = least_squares(
        fun,
        base[free],
        jac=jac,
        bounds=(_LOWER[free], _UPPER[free]),
        method="trf",
        xtol=cfg.tol,
        ftol=cfg.tol,
        gtol=cfg.tol,
        max_nfev=max(cfg.max_iters, 1) * 10,
    )
    x = _project(full(res.x))
    r, _ = prob.residuals(x)
    cost = float(r @ r)
    return x, cost, int(res.nfev), bool(res.success), [cost]


def solve_mhe(window: MeasurementWindow, cfg: EstimatorConfig) -> MHEResult:
    prob = _Problem(window, cfg)
    lin_ok, ang_ok = _excitation(window, cfg)
    free = np.ones(6, dtype=bool)
    frozen = []
    if not lin_ok:
        # without translation neither mu nor the North offset shows in the residuals
        free[3] = free[5] = False
        frozen += ["mu", "dtheta"]
    if not ang_ok:
        free[4] = False
        frozen.append("nu")
    x0 = np.concatenate([prob.x_prior, prob.m_prior])

    if cfg.solver == "lm_box":
        x, cost, iters, converged, history = _lm_box(prob, x0, free, cfg)
    else:
        x, cost, iters, converged, history = _gauss_newton(prob, x0, free, cfg)
    if not converged:
        logger.warning("MHE did not converge in %d iterations (cost=%.3g)", iters, cost)

    params = ParamVector(float(x[3]), float(x[4]), float(wrap_angle(x[5])))
    diag = MHEDiagnostics(
        solver=cfg.solver,
        iterations=int(iters),
        cost=cost,
        converged=converged,
        low_excitation=bool(frozen),
        frozen=tuple(frozen),
        cost_history=tuple(history),
    )
    return MHEResult(prob.states(x), params, diag)


def run_labeling(sim_log: Sequence[tuple[Measurement, Control]], cfg: EstimatorConfig) -> list[LabelRecord]:
    """Slide the window over a log and emit one (pose, traction) label per step.

    Priors chain from window to window. Each step is labelled by the window
    centred on it; the first and last N/2 steps take the first and last
    window's estimates.
    """
    L = len(sim_log)
    N = cfg.N
    if L < N + 1:
        raise ValueError(f"log of length {L} is shorter than one estimation window (N+1 = {N + 1})")
    z = _as_measurement_array([m for m, _ in sim_log])
    U = as_control_array([u for _, u in sim_log])

    prior_params = ParamVector.prior(cfg)
    first = sim_log[0][0]
    prior_state = measurement_model(first, prior_params.dtheta)
    results: list[MHEResult] = []
    for s in range(L - N):
        window = MeasurementWindow(z[s : s + N + 1], U[s : s + N], prior_state, prior_params)
        res = solve_mhe(window, cfg)
        results.append(res)
        prior_state, prior_params = res.states[1], res.params

    W = len(results)
    c = N // 2
    labels = []
    for k in range(L):
        if k < c:
            w, i = 0, k
        elif k <= W - 1 + c:
            w, i = k - c, c
        else:
            w, i = W - 1, k - (W - 1)
        res = results[w]
        labels.append(
            LabelRecord(
                step=k,
                state=res.states[i],
                mu=res.params.mu,
                nu=res.params.nu,
                low_excitation=res.diagnostics.low_excitation,
                converged=res.diagnostics.converged,
            )
        )
    n_bad = sum(not r.diagnostics.converged for r in results)
    if n_bad:
        logger.warning("run_labeling: %d/%d windows did not converge", n_bad, W)
    return labels


class MovingHorizonEstimator:
    """Online estimator fed one measurement per tick."""

    def __init__(self, cfg: EstimatorConfig):
        self.cfg = cfg
        self._z: deque[Measurement] = deque(maxlen=cfg.N + 1)
        self._u: deque[Control] = deque(maxlen=cfg.N)
        self.params = ParamVector.prior(cfg)
        self._last: MHEResult | None = None

    @property
    def last_result(self) -> MHEResult | None:
        return self._last

    def push(self, z: Measurement, u_prev: Control | None = None) -> State2D:
        """Add measurement z (and the control applied since the previous one); return the current pose."""
        if u_prev is not None and self._z:
            self._u.append(u_prev)
        self._z.append(z)
        if len(self._z) < self.cfg.N + 1 or len(self._u) < self.cfg.N:
            return measurement_model(z, self.params.dtheta)
        if self._last is not None:
            prior_state = self._last.states[1]
        else:
            prior_state = measurement_model(self._z[0], self.params.dtheta)
        window = MeasurementWindow(list(self._z), list(self._u), prior_state, self.params)
        self._last = solve_mhe(window, self.cfg)
        self.params = self._last.params
        return self._last.states[-1]

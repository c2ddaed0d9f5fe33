"""Traction-scaled unicycle model.

    x_{k+1} = x_k + [mu * v * cos(theta), mu * v * sin(theta), nu * omega] * dt

mu and nu are the linear and angular traction coefficients in [0, 1]. The
constant-parameter form serves the estimator; the map-parameterized form
looks mu, nu up at the *current* position of every step and serves the
controller. Both share ``_step_arrays`` so estimator, controller and
truth simulation integrate with identical arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from ..geometry import wrap_angle
from ..maps import TraversabilityMap


@dataclass(frozen=True)
class State2D:
    px: float
    py: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta])

    @classmethod
    def from_array(cls, a) -> "State2D":
        return cls(float(a[0]), float(a[1]), float(wrap_angle(float(a[2]))))


@dataclass(frozen=True)
class Control:
    v: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega])


@dataclass(frozen=True)
class Trajectory:
    """states (T+1, 3), controls (T, 2), local traction mu/nu (T+1,) at each state."""

    states: np.ndarray
    controls: np.ndarray
    dt: float
    mu: np.ndarray
    nu: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def state(self, i: int) -> State2D:
        return State2D.from_array(self.states[i])

    @property
    def final(self) -> State2D:
        return self.state(-1)

    def path_length(self) -> float:
        return float(np.sum(np.hypot(np.diff(self.states[:, 0]), np.diff(self.states[:, 1]))))

    def to_frame(self) -> pd.DataFrame:
        n = self.states.shape[0]
        v = np.full(n, np.nan)
        w = np.full(n, np.nan)
        v[: self.controls.shape[0]] = self.controls[:, 0]
        w[: self.controls.shape[0]] = self.controls[:, 1]
        return pd.DataFrame(
            {
                "t": np.arange(n) * self.dt,
                "px": self.states[:, 0],
                "py": self.states[:, 1],
                "theta": self.states[:, 2],
                "v": v,
                "omega": w,
                "mu_local": self.mu,
                "nu_local": self.nu,
            }
        )


def as_control_array(controls) -> np.ndarray:
    """Sequence of Control or array-like (T, 2) → float array (T, 2)."""
    if isinstance(controls, np.ndarray):
        arr = controls.astype(float)
    else:
        arr = np.array(
            [c.as_array() if isinstance(c, Control) else np.asarray(c, dtype=float) for c in controls],
            dtype=float,
        )
    if arr.ndim != 2 or arr.shape[-1] != 2:
        raise ValueError(f"controls must have shape (T, 2), got {arr.shape}")
    return arr


def _step_arrays(px, py, th, v, w, mu, nu, dt):
    return (
        px + mu * v * np.cos(th) * dt,
        py + mu * v * np.sin(th) * dt,
        th + nu * w * dt,
    )


def step(x: State2D, u: Control, mu: float, nu: float, dt: float) -> State2D:
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    mu = float(np.clip(mu, 0.0, 1.0))
    nu = float(np.clip(nu, 0.0, 1.0))
    px, py, th = _step_arrays(x.px, x.py, x.theta, u.v, u.omega, mu, nu, dt)
    return State2D(float(px), float(py), float(wrap_angle(th)))


def rollout_const(x0: State2D, controls, mu: float, nu: float, dt: float) -> Trajectory:
    U = as_control_array(controls)
    if U.shape[0] == 0:
        raise ValueError("controls must be non-empty")
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    mu = float(np.clip(mu, 0.0, 1.0))
    nu = float(np.clip(nu, 0.0, 1.0))
    T = U.shape[0]
    S = np.empty((T + 1, 3))
    S[0] = x0.as_array()
    for i in range(T):
        S[i + 1] = _step_arrays(S[i, 0], S[i, 1], S[i, 2], U[i, 0], U[i, 1], mu, nu, dt)
        S[i + 1, 2] = wrap_angle(S[i + 1, 2])
    return Trajectory(S, U, dt, np.full(T + 1, mu), np.full(T + 1, nu))


def rollout_batch(
    x0, controls: np.ndarray, tmap: TraversabilityMap, dt: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map-parameterized rollout of K control sequences at once.

    x0: (3,) or (K, 3); controls: (K, T, 2).
    Returns states (K, T+1, 3), mu (K, T+1), nu (K, T+1).
    """
    U = np.asarray(controls, dtype=float)
    K, T, _ = U.shape
    S = np.empty((K, T + 1, 3))
    S[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (K, 3))
    MU = np.empty((K, T + 1))
    NU = np.empty((K, T + 1))
    for i in range(T):
        mu, nu = tmap.sample(S[:, i, 0], S[:, i, 1])
        MU[:, i], NU[:, i] = mu, nu
        px, py, th = _step_arrays(S[:, i, 0], S[:, i, 1], S[:, i, 2], U[:, i, 0], U[:, i, 1], mu, nu, dt)
        S[:, i + 1, 0], S[:, i + 1, 1], S[:, i + 1, 2] = px, py, wrap_angle(th)
    MU[:, T], NU[:, T] = tmap.sample(S[:, T, 0], S[:, T, 1])
    return S, MU, NU


def rollout_map(x0: State2D, controls, tmap: TraversabilityMap, dt: float) -> Trajectory:
    U = as_control_array(controls)
    if U.shape[0] == 0:
        raise ValueError("controls must be non-empty")
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    S, MU, NU = rollout_batch(x0.as_array(), U[None], tmap, dt)
    return Trajectory(S[0], U, dt, MU[0], NU[0])

"""Minimum-energy double-integrator connection with free final velocity.

Each axis (x, y, yaw) is an independent double integrator. With fixed final
position and free final velocity the optimal input is linear in time and
vanishes at the end of the segment, which gives a cubic position profile.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

T_MIN = 0.1


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    if isinstance(a, (float, int)):
        w = math.fmod(a + math.pi, 2 * math.pi)
        w = w + 2 * math.pi if w < 0 else w
        w -= math.pi
        return math.pi if w == -math.pi else w
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def unwrap_near(theta: float, reference: float) -> float:
    """Shift ``theta`` by multiples of 2*pi to lie within pi of ``reference``."""
    return reference + wrap_angle(theta - reference)


@dataclass(frozen=True)
class State:
    """Planar pose ``p = (x, y, yaw)`` and its rates ``v``. Yaw is kept unwrapped."""

    p: np.ndarray
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(3)
        v = np.array(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise ValueError("state components must be finite")
        p.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "v", v)

    @property
    def xy(self) -> np.ndarray:
        return self.p[:2]

    @property
    def yaw(self) -> float:
        return float(self.p[2])

    @property
    def yaw_wrapped(self) -> float:
        return wrap_angle(self.p[2])


@dataclass(frozen=True)
class ReferenceSpeeds:
    v_ref: float = 0.8
    w_ref: float = 1.2

    def __post_init__(self):
        if not (self.v_ref > 0 and self.w_ref > 0):
            raise ValueError("reference speeds must be positive")


@dataclass(frozen=True)
class ObvpSegment:
    p0: np.ndarray
    v0: np.ndarray
    pf: np.ndarray
    alpha: np.ndarray
    T: float

    @property
    def energy(self) -> float:
        return float(np.sum(self.alpha**2) * self.T**3 / 3.0)

    def position(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        a = self.alpha
        return a / 6 * t**3 - a * self.T / 2 * t**2 + self.v0 * t + self.p0

    def velocity(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        a = self.alpha
        return a / 2 * t**2 - a * self.T * t + self.v0

    def acceleration(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return self.alpha * (t - self.T)

    @property
    def end_state(self) -> State:
        return State(self.position(self.T), self.velocity(self.T))

    def coefficients(self) -> np.ndarray:
        """Power-basis coefficients, shape (3, 4): ``p(t) = sum_i c[:, i] t**i``."""
        a = self.alpha
        return np.stack([self.p0, self.v0, -a * self.T / 2, a / 6], axis=1)


def reference_duration(start: State, to_p, speeds: ReferenceSpeeds, t_min: float = T_MIN) -> float:
    to_p = np.asarray(to_p, dtype=float)
    planar = float(np.hypot(to_p[0] - start.p[0], to_p[1] - start.p[1]))
    dyaw = abs(wrap_angle(to_p[2] - start.p[2]))
    return max(planar / speeds.v_ref, dyaw / speeds.w_ref, t_min)


def solve(start: State, to_p, T: float) -> ObvpSegment:
    if not T > 0:
        raise ValueError(f"segment duration must be positive, got {T}")
    pf = np.array(to_p, dtype=float).reshape(3)
    pf[2] = unwrap_near(pf[2], start.p[2])
    alpha = -3.0 * (pf - start.p - start.v * T) / T**3
    return ObvpSegment(start.p.copy(), start.v.copy(), pf, alpha, float(T))


def sample(seg: ObvpSegment, t: float):
    """Position, velocity and acceleration of ``seg`` at time ``t``."""
    if not (0.0 <= t <= seg.T):
        raise ValueError(f"t={t} outside [0, {seg.T}]")
    return seg.position(t), seg.velocity(t), seg.acceleration(t)


@lru_cache(maxsize=8)
def _simpson_rule(n_steps: int):
    """Nodes on [0, 1] and composite Simpson weights (n_steps must be even)."""
    if n_steps < 2 or n_steps % 2:
        raise ValueError(f"n_steps must be a positive even number, got {n_steps}")
    w = np.ones(n_steps + 1)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    return np.linspace(0.0, 1.0, n_steps + 1), w / (3.0 * n_steps)


def arc_length(seg: ObvpSegment, n_steps: int = 50) -> float:
    s, w = _simpson_rule(n_steps)
    v = seg.velocity(s * seg.T)
    return float(seg.T * (w @ np.hypot(v[:, 0], v[:, 1])))


def edge_cost(seg: ObvpSegment, lam_yaw: float, n_steps: int = 50) -> float:
    """Quadratic net-yaw cost plus planar arc length."""
    dyaw = wrap_angle(seg.pf[2] - seg.p0[2])
    return lam_yaw * dyaw**2 + arc_length(seg, n_steps)

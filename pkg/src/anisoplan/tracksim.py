"""Receding-horizon tracking on the planar double integrator, with a noisy closed-loop simulator.

State ``x = [x, y, yaw, vx, vy, w]``, input ``u`` = acceleration (3,). The
tracker solves a short direct-shooting problem every step: quadratic tracking
cost, input cost relative to the reference acceleration, and a squared-hinge
penalty on the velocity safety margin
``h_s = lam_l * (vx^2 + vy^2) + lam_w * w^2 - h_th``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .trajopt.config import MotionLimits
from .trajopt.poly import PolyTrajectory

log = logging.getLogger(__name__)

TRACE_HEADER = ("t", "x_ref", "y_ref", "θ_ref", "x", "y", "θ", "vx", "vy", "ω", "ux", "uy", "uθ", "h_s")


@dataclass(frozen=True)
class SafetyLimits:
    lam_l: float = 1.0
    lam_w: float = 0.25
    h_th: float = 2.5

    def __post_init__(self):
        if self.lam_l < 0 or self.lam_w < 0:
            raise ValueError("safety weights must be nonnegative")
        if not self.h_th > 0:
            raise ValueError("h_th must be positive")

    def h_s(self, vel) -> np.ndarray:
        vel = np.asarray(vel, dtype=float)
        return self.lam_l * (vel[..., 0] ** 2 + vel[..., 1] ** 2) + self.lam_w * vel[..., 2] ** 2 - self.h_th

    def h_s_grad(self, vel) -> np.ndarray:
        vel = np.asarray(vel, dtype=float)
        return 2.0 * vel * np.array([self.lam_l, self.lam_l, self.lam_w])


@dataclass(frozen=True)
class TrackerConfig:
    dt: float = 0.1
    horizon: int = 10
    Q: tuple = (10.0, 10.0, 10.0, 5.0, 5.0, 2.0)
    R_u: tuple = (0.05, 0.05, 0.05)
    a_max: tuple = MotionLimits().a_max
    safety: SafetyLimits = field(default_factory=SafetyLimits)
    safety_weight: float = 1.0e4
    unsafe_margin: float = 0.2  # flag when h_s > margin * h_th
    max_iter: int = 50

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2 steps")
        if len(self.Q) != 6 or len(self.R_u) != 3 or len(self.a_max) != 3:
            raise ValueError("Q needs 6 entries, R_u and a_max 3")
        if min(self.Q) < 0 or min(self.R_u) < 0 or self.safety_weight < 0:
            raise ValueError("weights must be nonnegative")
        if min(self.a_max) <= 0:
            raise ValueError("a_max must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    """Seeded additive acceleration noise drawn in the body frame of the reference.

    The magnitude follows the commanded (reference) motion, not the perturbed
    state, so disturbances cannot feed on themselves. Per-axis standard
    deviation is ``sigma * gain * min(|v_B| / v_m, 1) ** exponent`` for the
    planar axes when ``speed_scaled`` (plain ``sigma * gain`` otherwise); the
    lateral gain defaults to ``v_mx / v_my``. Yaw noise is ``sigma_yaw``. With
    ``correlation > 0`` (seconds) the unit draws follow a stationary
    first-order autoregressive process instead of being white.
    """

    sigma: float = 0.0
    sigma_yaw: float = 0.0
    lateral_gain: float | None = None
    speed_scaled: bool = True
    correlation: float = 0.0
    exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0 or self.sigma_yaw < 0 or self.correlation < 0:
            raise ValueError("noise parameters must be nonnegative")

    def sampler(self, limits: MotionLimits, dt: float):
        """Stateful ``draw(ref_vel, ref_yaw) -> world-frame acceleration`` for one run."""
        rng = np.random.default_rng(self.seed)
        gain = limits.v_mx / limits.v_my if self.lateral_gain is None else self.lateral_gain
        a = math.exp(-dt / self.correlation) if self.correlation > 0 else 0.0
        b = math.sqrt(1.0 - a * a)
        state = {"n": rng.standard_normal(3)}

        def draw(vel, yaw):
            n = a * state["n"] + b * rng.standard_normal(3)
            state["n"] = n
            c, s = math.cos(yaw), math.sin(yaw)
            if self.speed_scaled:
                sx = min(abs(c * vel[0] + s * vel[1]) / limits.v_mx, 1.0) ** self.exponent
                sy = min(abs(-s * vel[0] + c * vel[1]) / limits.v_my, 1.0) ** self.exponent
            else:
                sx = sy = 1.0
            bx = self.sigma * sx * n[0]
            by = self.sigma * gain * sy * n[1]
            return np.array([c * bx - s * by, s * bx + c * by, self.sigma_yaw * n[2]])

        return draw


def step_state(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Exact zero-order-hold step of the double integrator."""
    p, v = x[:3], x[3:]
    return np.concatenate([p + v * dt + 0.5 * u * dt**2, v + u * dt])


def shooting_matrices(dt: float, H: int):
    """``X = Phi @ x0 + G @ U`` for stacked states ``x_1..x_H`` and inputs ``u_0..u_{H-1}``."""
    A = np.eye(6)
    A[:3, 3:] = dt * np.eye(3)
    B = np.vstack([0.5 * dt**2 * np.eye(3), dt * np.eye(3)])
    Phi = np.zeros((6 * H, 6))
    G = np.zeros((6 * H, 3 * H))
    Ak = np.eye(6)
    powers = [np.eye(6)]
    for k in range(H):
        Ak = A @ Ak
        powers.append(Ak)
        Phi[6 * k: 6 * k + 6] = Ak
    for k in range(H):
        for j in range(k + 1):
            G[6 * k: 6 * k + 6, 3 * j: 3 * j + 3] = powers[k - j] @ B
    return Phi, G


class Tracker:
    """Warm-started receding-horizon tracker."""

    def __init__(self, config: TrackerConfig = TrackerConfig()):
        self.config = config
        self.Phi, self.G = shooting_matrices(config.dt, config.horizon)
        self.Qd = np.tile(np.asarray(config.Q, dtype=float), config.horizon)
        self.Rd = np.tile(np.asarray(config.R_u, dtype=float), config.horizon)
        a = np.tile(np.asarray(config.a_max, dtype=float), config.horizon)
        self.bounds = list(zip(-a, a))
        self.a_max = np.asarray(config.a_max, dtype=float)
        self._warm: np.ndarray | None = None
        self.degraded_steps = 0

    def reset(self):
        self._warm = None
        self.degraded_steps = 0

    def objective(self, U: np.ndarray, x0: np.ndarray, x_ref: np.ndarray, u_ref: np.ndarray):
        """Cost and gradient over the flattened input sequence ``U`` (3H,)."""
        cfg = self.config
        X = self.Phi @ x0 + self.G @ U
        e = X - x_ref.reshape(-1)
        du = U - u_ref.reshape(-1)
        vel = X.reshape(-1, 6)[:, 3:]
        h = np.maximum(cfg.safety.h_s(vel), 0.0)
        val = float(e @ (self.Qd * e) + du @ (self.Rd * du) + cfg.safety_weight * np.sum(h**2))
        gX = 2.0 * self.Qd * e
        gX.reshape(-1, 6)[:, 3:] += (2.0 * cfg.safety_weight * h)[:, None] * cfg.safety.h_s_grad(vel)
        grad = self.G.T @ gX + 2.0 * self.Rd * du
        return val, grad

    def track_step(self, x0, x_ref: np.ndarray, u_ref: np.ndarray):
        """Solve one horizon; returns ``(command, degraded)``.

        ``x_ref`` is (H, 6) for times ``t+dt .. t+H dt``; ``u_ref`` is (H, 3).
        """
        x0 = np.asarray(x0, dtype=float)
        H = self.config.horizon
        if x_ref.shape != (H, 6) or u_ref.shape != (H, 3):
            raise ValueError("reference window must cover the horizon")
        if not np.all(np.isfinite(x0)):
            raise ValueError("current state must be finite")
        if self._warm is None:
            U0 = np.clip(u_ref, -self.a_max, self.a_max).reshape(-1)
        else:
            U0 = np.concatenate([self._warm[3:], self._warm[-3:]])
        try:
            res = minimize(self.objective, U0, args=(x0, x_ref, u_ref), jac=True, method="L-BFGS-B",
                           bounds=self.bounds, options={"maxiter": self.config.max_iter})
            ok = np.all(np.isfinite(res.x)) and np.isfinite(res.fun) and res.status in (0, 1)
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("tracker failed: %s", exc)
            ok = False
        if not ok:
            self._warm = None
            self.degraded_steps += 1
            return np.zeros(3), True
        U = np.clip(res.x, -np.tile(self.a_max, H), np.tile(self.a_max, H))
        self._warm = U
        return U[:3].copy(), False


@dataclass
class SimTrace:
    dt: float
    t: np.ndarray  # (S,)
    ref: np.ndarray  # (S, 6)
    state: np.ndarray  # (S, 6)
    u: np.ndarray  # (S, 3), command applied after each sample (last row zero)
    h_s: np.ndarray  # (S,)
    h_th: float
    unsafe_margin: float = 0.2
    degraded_steps: int = 0

    def __post_init__(self):
        S = self.t.size
        if not (self.ref.shape == (S, 6) and self.state.shape == (S, 6) and self.u.shape == (S, 3)
                and self.h_s.shape == (S,)):
            raise ValueError("inconsistent trace lengths")

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def rms_error(self) -> np.ndarray:
        """RMS position error per axis (x, y, yaw)."""
        return np.sqrt(np.mean((self.state[:, :3] - self.ref[:, :3]) ** 2, axis=0))

    @property
    def rms_planar_error(self) -> float:
        return float(np.sqrt(np.mean(np.sum((self.state[:, :2] - self.ref[:, :2]) ** 2, axis=1))))

    @property
    def max_h_s(self) -> float:
        return float(self.h_s.max())

    @property
    def max_excess(self) -> float:
        return max(self.max_h_s, 0.0)

    @property
    def unsafe(self) -> bool:
        return bool(self.max_h_s > self.unsafe_margin * self.h_th)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for k in range(self.t.size):
            row = [self.t[k], *self.ref[k, :3], *self.state[k], *self.u[k], self.h_s[k]]
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def reference_window(traj: PolyTrajectory, t0: float, dt: float, H: int):
    """Reference states at ``t0 + dt..t0 + H dt`` and step-averaged accelerations for each step."""
    ts = t0 + dt * np.arange(H + 1)
    end = traj.duration
    p = traj.evaluate(np.minimum(ts, end), 0)
    v = traj.evaluate(np.minimum(ts, end), 1)
    v[ts > end] = 0.0  # hold the final pose
    p[ts > end] = traj.evaluate(end, 0)[0]
    x_ref = np.hstack([p[1:], v[1:]])
    u_ref = np.diff(v, axis=0) / dt
    return x_ref, u_ref


def reference_state(traj: PolyTrajectory, t: float) -> np.ndarray:
    """Reference ``[p, v]`` at time ``t``, holding the final pose at rest afterwards."""
    if t > traj.duration:
        return np.concatenate([traj.evaluate(traj.duration, 0)[0], np.zeros(3)])
    return np.concatenate([traj.evaluate(t, 0)[0], traj.evaluate(t, 1)[0]])


class ClosedLoop:
    """Stateful tracker + plant + noise; the reference can be swapped between calls to ``advance``."""

    def __init__(self, x0, config: TrackerConfig = TrackerConfig(), noise: NoiseSpec = NoiseSpec(),
                 limits: MotionLimits = MotionLimits()):
        self.config = config
        self.tracker = Tracker(config)
        self.draw = noise.sampler(limits, config.dt)
        self.x = np.asarray(x0, dtype=float).copy()
        self.t = [0.0]
        self.ref: list[np.ndarray] = []  # filled from the first reference tracked
        self.state = [self.x.copy()]
        self.u: list[np.ndarray] = []

    @property
    def time(self) -> float:
        return self.t[-1]

    def advance(self, traj: PolyTrajectory, t_local: float, steps: int) -> None:
        """Track ``traj`` from its local time ``t_local`` for ``steps`` steps."""
        dt, H = self.config.dt, self.config.horizon
        if not self.ref:
            self.ref.append(reference_state(traj, t_local))
        for k in range(steps):
            x_ref, u_ref = reference_window(traj, t_local + k * dt, dt, H)
            u = self.tracker.track_step(self.x, x_ref, u_ref)[0] if np.all(np.isfinite(self.x)) else np.zeros(3)
            w = self.draw(x_ref[0, 3:], x_ref[0, 2])
            self.x = step_state(self.x, u + w, dt)
            self.u.append(u)
            self.t.append(len(self.u) * dt)
            self.ref.append(x_ref[0])
            self.state.append(self.x.copy())

    def trace(self) -> SimTrace:
        cfg = self.config
        state = np.array(self.state)
        u = np.vstack(self.u + [np.zeros(3)])
        h = cfg.safety.h_s(state[:, 3:])
        h = np.where(np.isfinite(h), h, np.inf)
        return SimTrace(cfg.dt, np.array(self.t), np.array(self.ref), state, u, h, cfg.safety.h_th,
                        cfg.unsafe_margin, self.tracker.degraded_steps)


def simulate(traj: PolyTrajectory, config: TrackerConfig = TrackerConfig(), noise: NoiseSpec = NoiseSpec(),
             limits: MotionLimits = MotionLimits(), settle: float = 0.0) -> SimTrace:
    """Closed-loop run of the tracker along ``traj`` with seeded noise; never raises on divergence."""
    x0 = np.concatenate([traj.evaluate(0.0, 0)[0], traj.evaluate(0.0, 1)[0]])
    loop = ClosedLoop(x0, config, noise, limits)
    loop.advance(traj, 0.0, int(math.ceil((traj.duration + settle) / config.dt - 1e-9)))
    return loop.trace()

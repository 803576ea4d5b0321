"""Objective and penalty terms with analytic gradients.

Every term returns ``(value, grad_coeffs, grad_tau)`` where ``grad_coeffs`` has
the shape of ``traj.coeffs`` and ``grad_tau`` is taken with respect to the log
durations. Sampled terms use ``K_j`` intervals per segment at times
``t = (l / K_j) T_j`` with trapezoidal weights, so sample positions move
smoothly with the durations.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..worldmodel import DistanceField
from .poly import PolyTrajectory, power_basis


def sample_counts(durations, dt: float, min_samples: int = 4) -> np.ndarray:
    return np.maximum(np.ceil(np.asarray(durations) / dt - 1e-9).astype(int), min_samples)


@dataclass(frozen=True)
class SampleLayout:
    """Duration-independent part of the sampling: segment ids, fractions, bases in the fraction."""

    seg: np.ndarray
    frac: np.ndarray
    starts: np.ndarray
    q: np.ndarray  # trapezoid factors
    Kf: np.ndarray  # K of each sample's segment
    P: tuple  # P[k][s, i] = d^k/dfrac^k frac**i


@lru_cache(maxsize=64)
def _layout(K: tuple, n: int) -> SampleLayout:
    K = np.asarray(K, dtype=int)
    counts = K + 1
    seg = np.repeat(np.arange(K.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    l = np.arange(seg.size) - np.repeat(starts, counts)
    Kf = np.repeat(K, counts).astype(float)
    frac = l / Kf
    q = np.where((l == 0) | (l == Kf), 0.5, 1.0)
    P = tuple(power_basis(frac, n, k) for k in range(4))
    return SampleLayout(seg, frac, starts, q, Kf, P)


def sample_layout(K, n: int) -> SampleLayout:
    return _layout(tuple(int(k) for k in K), int(n))


@dataclass
class Samples:
    layout: SampleLayout
    T: np.ndarray
    w: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    jerk: np.ndarray

    @property
    def seg(self):
        return self.layout.seg

    @property
    def frac(self):
        return self.layout.frac


def make_samples(coeffs: np.ndarray, T: np.ndarray, K) -> Samples:
    n = coeffs.shape[2] - 1
    lay = sample_layout(K, n)
    Tpow = T[:, None] ** np.arange(n + 1)  # (N, n+1)
    Cs = (coeffs * Tpow[:, None, :])[lay.seg]  # coefficients in the unit-interval variable
    Ts = T[lay.seg][:, None]
    vals = [np.einsum("si,sai->sa", lay.P[k], Cs) / Ts**k for k in range(4)]
    w = lay.q * T[lay.seg] / lay.Kf
    return Samples(lay, T, w, *vals)


def backprop(smp: Samples, T: np.ndarray, n1: int, g, gp, gv, ga):
    """Gradient of ``sum_l w_l g_l`` given integrand partials w.r.t. pos, vel, acc."""
    lay = smp.layout
    w = smp.w[:, None]
    wgp, wgv, wga = w * gp, w * gv, w * ga
    i = np.arange(n1)
    grad_c = 0.0
    for k, wg in enumerate((wgp, wgv, wga)):
        Rk = np.add.reduceat(wg[:, :, None] * lay.P[k][:, None, :], lay.starts, axis=0)
        grad_c = grad_c + Rk * (T[:, None] ** np.maximum(i - k, 0))[:, None, :]
    chain = np.sum(wgp * smp.vel + wgv * smp.acc + wga * smp.jerk, axis=1) * lay.frac
    dT = smp.w * g / T[lay.seg] + chain
    grad_T = np.add.reduceat(dT, lay.starts)
    return grad_c, grad_T


# --- integrands -------------------------------------------------------------
# Each returns (g, gp, gv, ga), the integrand and its partials per sample.

def obstacle_integrand(smp: Samples, field: DistanceField, d_th: float, eps_d: float, shifted: bool = False):
    """``f_d(d) = 1/d`` below ``d_th``; ``shifted`` subtracts ``1/d_th`` so the penalty is continuous."""
    d, dgrad, _ = field.query(smp.pos[:, :2])
    near = d < d_th
    dc = np.maximum(d, eps_d)
    f = np.where(near, 1.0 / dc - (1.0 / d_th if shifted else 0.0), 0.0)
    df = np.where(near & (d > eps_d), -1.0 / dc**2, 0.0)
    vxy = smp.vel[:, :2]
    speed = np.hypot(vxy[:, 0], vxy[:, 1])
    g = f * speed
    S = g.size
    gp = np.zeros((S, 3))
    gv = np.zeros((S, 3))
    ga = np.zeros((S, 3))
    gp[:, :2] = (df * speed)[:, None] * dgrad
    safe = np.where(speed > 0, speed, 1.0)
    gv[:, :2] = np.where(speed[:, None] > 0, f[:, None] * vxy / safe[:, None], 0.0)
    return g, gp, gv, ga


def body_velocity(vel: np.ndarray, yaw: np.ndarray):
    """World-to-body rotation of planar velocity."""
    c, s = np.cos(yaw), np.sin(yaw)
    vx, vy = vel[:, 0], vel[:, 1]
    return c * vx + s * vy, -s * vx + c * vy


def ellipse_excess(vel, yaw, v_mx, v_my):
    bx, by = body_velocity(vel, yaw)
    return bx**2 / v_mx**2 + by**2 / v_my**2 - 1.0


def ellipse_integrand(smp: Samples, v_mx: float, v_my: float):
    yaw = smp.pos[:, 2]
    c, s = np.cos(yaw), np.sin(yaw)
    bx, by = body_velocity(smp.vel, yaw)
    e = bx**2 / v_mx**2 + by**2 / v_my**2 - 1.0
    h = np.maximum(e, 0.0)
    g = h**2
    dg = 2.0 * h
    ia, ib = 1.0 / v_mx**2, 1.0 / v_my**2
    de_dvx = 2 * bx * c * ia - 2 * by * s * ib
    de_dvy = 2 * bx * s * ia + 2 * by * c * ib
    de_dyaw = 2 * bx * by * (ia - ib)
    S = g.size
    gp = np.zeros((S, 3))
    gv = np.zeros((S, 3))
    gp[:, 2] = dg * de_dyaw
    gv[:, 0] = dg * de_dvx
    gv[:, 1] = dg * de_dvy
    return g, gp, gv, np.zeros((S, 3))


def box_integrand(smp: Samples, v_max, a_max):
    v_max = np.asarray(v_max, dtype=float)
    a_max = np.asarray(a_max, dtype=float)
    hv = np.maximum(np.abs(smp.vel) - v_max, 0.0)
    ha = np.maximum(np.abs(smp.acc) - a_max, 0.0)
    g = np.sum(hv**2 + ha**2, axis=1)
    gv = 2 * hv * np.sign(smp.vel)
    ga = 2 * ha * np.sign(smp.acc)
    return g, np.zeros_like(gv), gv, ga


# --- public terms -------------------------------------------------------------

def _sampled(traj: PolyTrajectory, dt: float, K, integrand, scale: float):
    T = traj.durations
    if K is None:
        K = sample_counts(T, dt)
    smp = make_samples(traj.coeffs, T, K)
    g, gp, gv, ga = integrand(smp)
    value = float(np.sum(smp.w * g))
    gc, gT = backprop(smp, T, traj.order + 1, g, gp, gv, ga)
    return scale * value, scale * gc, scale * gT * T


@lru_cache(maxsize=8)
def _energy_pattern(n: int):
    i = np.arange(n + 1)
    ii, kk = np.meshgrid(i, i, indexing="ij")
    mask = (ii >= 2) & (kk >= 2)
    coef = np.where(mask, ii * (ii - 1) * kk * (kk - 1) / np.maximum(ii + kk - 3, 1), 0.0)
    return coef, np.where(mask, ii + kk - 3, 0)


def energy_matrix(T, n: int) -> np.ndarray:
    """Q[i, k] = integral over [0, T] of d2(t^i) * d2(t^k); shape T.shape + (n+1, n+1)."""
    coef, expo = _energy_pattern(n)
    return coef * np.asarray(T, dtype=float)[..., None, None] ** expo


def energy_terms(coeffs: np.ndarray, T: np.ndarray, R: np.ndarray):
    """Unscaled energy with gradients w.r.t. coefficients and durations."""
    n = coeffs.shape[2] - 1
    Q = energy_matrix(T, n)  # (N, n+1, n+1)
    Qc = np.einsum("jik,jak->jai", Q, coeffs)
    per_axis = np.einsum("jai,jai->ja", coeffs, Qc)
    value = float(np.sum(per_axis * R))
    grad_c = 2.0 * Qc * R[None, :, None]
    i = np.arange(n + 1)
    acc_end = np.einsum("ji,jai->ja", i * (i - 1) * T[:, None] ** np.maximum(i - 2, 0), coeffs)
    grad_T = np.sum(R * acc_end**2, axis=1)
    return value, grad_c, grad_T


def energy_cost(traj: PolyTrajectory, R=(1.0, 1.0, 0.5), lam_s: float = 1.0):
    T = traj.durations
    v, gc, gT = energy_terms(traj.coeffs, T, np.asarray(R, dtype=float))
    return lam_s * v, lam_s * gc, lam_s * gT * T


def time_cost(traj: PolyTrajectory, lam_t: float = 1.0):
    T = traj.durations
    return lam_t * float(T.sum()), np.zeros_like(traj.coeffs), lam_t * T


def obstacle_cost(traj: PolyTrajectory, field: DistanceField, d_th: float, dt: float,
                  lam_c: float = 1.0, eps_d: float | None = None, K=None, shifted: bool = False):
    eps = field.resolution / 10 if eps_d is None else eps_d
    return _sampled(traj, dt, K, lambda s: obstacle_integrand(s, field, d_th, eps, shifted), lam_c)


def ellipse_violation(traj: PolyTrajectory, v_mx: float, v_my: float, dt: float, K=None, weight: float = 1.0):
    return _sampled(traj, dt, K, lambda s: ellipse_integrand(s, v_mx, v_my), weight)


def box_violation(traj: PolyTrajectory, v_max, a_max, dt: float, K=None, weight: float = 1.0):
    return _sampled(traj, dt, K, lambda s: box_integrand(s, v_max, a_max), weight)


def max_violation(traj: PolyTrajectory, limits, dt: float) -> dict:
    """Largest normalized constraint excess over samples at spacing ``dt`` (0 when feasible).

    Ellipse excess is ``v_Bx^2/v_mx^2 + v_By^2/v_my^2 - 1``; box excess is
    ``|value| / bound - 1`` per axis.
    """
    T = traj.durations
    smp = make_samples(traj.coeffs, T, sample_counts(T, dt, 1))
    e = ellipse_excess(smp.vel, smp.pos[:, 2], limits.v_mx, limits.v_my)
    bv = np.abs(smp.vel) / np.asarray(limits.v_max) - 1.0
    ba = np.abs(smp.acc) / np.asarray(limits.a_max) - 1.0
    out = {
        "ellipse": max(float(e.max()), 0.0),
        "velocity": max(float(bv.max()), 0.0),
        "acceleration": max(float(ba.max()), 0.0),
    }
    out["max"] = max(out.values())
    return out


def min_clearance(traj: PolyTrajectory, field: DistanceField, dt: float) -> float:
    T = traj.durations
    smp = make_samples(traj.coeffs, T, sample_counts(T, dt, 1))
    d, _, outside = field.query(smp.pos[:, :2])
    return 0.0 if outside.any() else float(d.min())

"""Penalty-method refinement of a coarse trajectory.

Decision vector: the free derivative states (orders 0..M) at every junction,
the free high-order coefficients of each segment, and the log durations. Each
segment is rebuilt from its two boundary states, so junction continuity holds
for every iterate. The start position/velocity and the goal position are not
decision variables.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ..worldmodel import DistanceField
from . import costs
from .config import OptConfig
from .poly import PolyTrajectory, from_coarse, hermite_matrix, hermite_matrix_dT

log = logging.getLogger(__name__)


class ReducedParams:
    """Packs/unpacks the reduced decision vector for a fixed segment count."""

    def __init__(self, n_segments: int, order: int, continuity: int, freeze_yaw: bool = False):
        self.N = n_segments
        self.n = order
        self.M = continuity
        self.nf = order + 1 - 2 * (continuity + 1)
        if self.nf < 0:
            raise ValueError("order too low for continuity")
        N, M = self.N, self.M
        free_J = np.ones((N + 1, 3, M + 1), dtype=bool)
        free_J[0, :, :2] = False  # start position and velocity
        free_J[N, :, 0] = False  # goal position
        free_F = np.ones((N, 3, self.nf), dtype=bool)
        if freeze_yaw:
            free_J[:, 2, :] = False
            free_F[:, 2, :] = False
        self.free_J = free_J
        self.free_F = free_F
        self.size = int(free_J.sum() + free_F.sum() + N)

    def split_coeffs(self, coeffs: np.ndarray, T: np.ndarray):
        """Junction derivative states and free coefficients of a trajectory."""
        N, M, n = self.N, self.M, self.n
        E = hermite_matrix(T, n, M)
        Z = np.einsum("jrk,jak->jar", E, coeffs)  # (N, 3, n+1)
        J = np.zeros((N + 1, 3, M + 1))
        J[0] = Z[0, :, : M + 1]
        J[N] = Z[N - 1, :, M + 1: 2 * M + 2]
        for k in range(1, N):
            # one-sided states can differ (a coarse trajectory is only C1): average them
            J[k] = 0.5 * (Z[k - 1, :, M + 1: 2 * M + 2] + Z[k, :, : M + 1])
        F = Z[:, :, 2 * M + 2:]
        return J, F

    def scales(self) -> np.ndarray:
        """Per-variable scaling (higher derivative states vary more) used to condition the solve."""
        J = np.ones((self.N + 1, 3, self.M + 1)) * 2.0 ** np.arange(self.M + 1)
        F = np.full((self.N, 3, self.nf), 2.0 ** (self.M + 1))
        return self.pack(J, F, np.ones(self.N))

    def pack(self, J, F, tau) -> np.ndarray:
        return np.concatenate([J[self.free_J], F[self.free_F], tau])

    def unpack(self, z, J0, F0):
        J = J0.copy()
        F = F0.copy()
        a = int(self.free_J.sum())
        b = a + int(self.free_F.sum())
        J[self.free_J] = z[:a]
        F[self.free_F] = z[a:b]
        return J, F, z[b:]

    def segment_states(self, J, F) -> np.ndarray:
        return np.concatenate([J[:-1], J[1:], F], axis=2)  # (N, 3, n+1)

    def coeffs(self, J, F, T):
        """Coefficients and the inverse boundary maps used to build them."""
        Einv = np.linalg.inv(hermite_matrix(T, self.n, self.M))
        Z = self.segment_states(J, F)
        return np.einsum("jik,jak->jai", Einv, Z), Einv

    def chain(self, Einv, T, C, grad_c, grad_T):
        """Map gradients w.r.t. (coeffs, durations) onto (J, F, tau)."""
        M = self.M
        GZ = np.einsum("jki,jak->jai", Einv, grad_c)
        dE = hermite_matrix_dT(T, self.n, M)
        dEc = np.einsum("jrk,jak->jar", dE, C)
        gT = grad_T - np.einsum("jar,jar->j", GZ, dEc)
        gJ = np.zeros((self.N + 1, 3, M + 1))
        gJ[:-1] += GZ[:, :, : M + 1]
        gJ[1:] += GZ[:, :, M + 1: 2 * M + 2]
        gF = GZ[:, :, 2 * M + 2:]
        return gJ, gF, gT * T


@dataclass
class Problem:
    """Penalized objective over the reduced decision vector."""

    params: ReducedParams
    J0: np.ndarray
    F0: np.ndarray
    field: DistanceField
    config: OptConfig
    K: np.ndarray
    rho: float = 1.0

    def trajectory(self, z) -> PolyTrajectory:
        J, F, tau = self.params.unpack(z, self.J0, self.F0)
        C, _ = self.params.coeffs(J, F, np.exp(tau))
        return PolyTrajectory(C, tau)

    def terms(self, z):
        """Dict of unweighted term values plus total and gradient."""
        cfg = self.config
        p = self.params
        J, F, tau = p.unpack(z, self.J0, self.F0)
        T = np.exp(tau)
        C, E = p.coeffs(J, F, T)
        lim = cfg.limits.scaled(1.0 - cfg.limit_margin)
        eps = self.field.resolution / 10 if cfg.eps_d is None else cfg.eps_d

        e_val, e_gc, e_gT = costs.energy_terms(C, T, cfg.R_array)
        smp = costs.make_samples(C, T, self.K)
        n1 = p.n + 1
        o = costs.obstacle_integrand(smp, self.field, cfg.d_th, eps, cfg.obstacle_shift)
        el = costs.ellipse_integrand(smp, lim.v_mx, lim.v_my)
        bx = costs.box_integrand(smp, lim.v_max, lim.a_max)
        wts = (cfg.lam_c, self.rho, self.rho)
        parts = [o, el, bx]
        g = sum(wt * q[0] for wt, q in zip(wts, parts))
        gp = sum(wt * q[1] for wt, q in zip(wts, parts))
        gv = sum(wt * q[2] for wt, q in zip(wts, parts))
        ga = sum(wt * q[3] for wt, q in zip(wts, parts))
        s_gc, s_gT = costs.backprop(smp, T, n1, g, gp, gv, ga)

        values = {
            "energy": cfg.lam_s * e_val,
            "obstacle": cfg.lam_c * float(np.sum(smp.w * o[0])),
            "time": cfg.lam_t * float(T.sum()),
            "ellipse": self.rho * float(np.sum(smp.w * el[0])),
            "box": self.rho * float(np.sum(smp.w * bx[0])),
        }
        total = sum(values.values())
        grad_c = cfg.lam_s * e_gc + s_gc
        grad_T = cfg.lam_s * e_gT + s_gT + cfg.lam_t
        gJ, gF, gtau = p.chain(E, T, C, grad_c, grad_T)
        grad = np.concatenate([gJ[p.free_J], gF[p.free_F], gtau])
        return values, total, grad

    def __call__(self, z):
        _, total, grad = self.terms(z)
        return total, grad


@dataclass
class OptResult:
    trajectory: PolyTrajectory
    degraded: bool
    objective: float
    initial_objective: float
    violation: dict
    rounds: int
    iterations: int
    wall_time: float
    telemetry: list = field(default_factory=list)
    message: str = ""


def init_from_coarse(coarse, order: int = 5) -> PolyTrajectory:
    return from_coarse(coarse, order)


def setup_problem(initial: PolyTrajectory, field: DistanceField, config: OptConfig,
                  freeze_yaw: bool = False):
    traj = initial.embed(config.order) if initial.order < config.order else initial
    params = ReducedParams(traj.n_segments, config.order, config.continuity, freeze_yaw)
    J0, F0 = params.split_coeffs(traj.coeffs, traj.durations)
    K = costs.sample_counts(traj.durations, config.dt, config.min_samples)
    problem = Problem(params, J0, F0, field, config, K, config.penalty_weight)
    return problem, params.pack(J0, F0, traj.tau)


def optimize(coarse, field: DistanceField, config: OptConfig = OptConfig(), freeze_yaw: bool = False,
             on_record=None) -> OptResult:
    """Refine a coarse trajectory (or an initial PolyTrajectory).

    ``on_record`` receives one telemetry dict per accepted iterate.
    """
    t0 = time.perf_counter()
    initial = coarse if isinstance(coarse, PolyTrajectory) else init_from_coarse(coarse, config.order)
    fallback = initial.embed(config.order) if initial.order < config.order else initial
    telemetry: list[dict] = []

    def degraded(msg, z_obj=math.nan, init_obj=math.nan, rounds=0, iters=0):
        log.warning("trajectory optimization degraded: %s", msg)
        viol = costs.max_violation(fallback, config.limits, config.dt)
        return OptResult(fallback, True, z_obj, init_obj, viol, rounds, iters,
                         time.perf_counter() - t0, telemetry, msg)

    try:
        problem, z = setup_problem(initial, field, config, freeze_yaw)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return degraded(str(exc))
    init_obj = problem(z)[0]
    if not np.isfinite(init_obj):
        return degraded("non-finite initial objective")

    rho = config.penalty_weight
    total_iters = 0
    rounds = 0
    best_z = z
    viol = None
    for rnd in range(max(config.penalty_rounds, 1)):
        rounds = rnd + 1
        problem.rho = rho
        problem.K = costs.sample_counts(np.exp(z[-problem.params.N:]), config.dt, config.min_samples)
        state = {"it": 0}

        def callback(intermediate_result):
            state["it"] += 1
            rec = {"round": rounds, "iteration": state["it"], "objective": float(intermediate_result.fun)}
            telemetry.append(rec)
            if on_record is not None:
                on_record(rec)
            if config.time_budget is not None and time.perf_counter() - t0 > config.time_budget:
                raise StopIteration

        D = problem.params.scales()

        def scaled(y):
            val, grad = problem(y * D)
            return val, grad * D

        try:
            res = minimize(scaled, z / D, jac=True, method="L-BFGS-B", callback=callback,
                           options={"maxiter": config.max_iter, "maxcor": 20, "ftol": 1e-12, "gtol": 1e-7})
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            return degraded(str(exc), init_obj=init_obj, rounds=rounds, iters=total_iters)
        total_iters += res.nit
        if not (np.all(np.isfinite(res.x)) and np.isfinite(res.fun)):
            return degraded("non-finite iterate", init_obj=init_obj, rounds=rounds, iters=total_iters)
        z = best_z = res.x * D
        traj = problem.trajectory(z)
        viol = costs.max_violation(traj, config.limits, config.dt)
        if telemetry:
            telemetry[-1]["max_violation"] = viol["max"]
            if on_record is not None:
                on_record({"round": rounds, "max_violation": viol["max"], "objective": float(res.fun)})
        if viol["max"] <= config.tol_c:
            break
        if config.time_budget is not None and time.perf_counter() - t0 > config.time_budget:
            break
        rho *= config.penalty_growth

    traj = problem.trajectory(best_z)
    final_obj = float(problem(best_z)[0])
    if not np.isfinite(final_obj):
        return degraded("non-finite objective", init_obj=init_obj, rounds=rounds, iters=total_iters)
    if costs.min_clearance(traj, field, config.dt / 4) <= 0.0:
        return degraded("optimized trajectory collides", final_obj, init_obj, rounds, total_iters)
    return OptResult(traj, False, final_obj, float(init_obj), viol, rounds, total_iters,
                     time.perf_counter() - t0, telemetry)

"""Piecewise polynomial trajectories over (x, y, yaw)."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

AXES = ("x", "y", "yaw")


def falling(i: np.ndarray, k: int) -> np.ndarray:
    """i * (i-1) * ... * (i-k+1), zero where i < k."""
    out = np.ones_like(i, dtype=float)
    for m in range(k):
        out = out * (i - m)
    return np.where(i >= k, out, 0.0)


def power_basis(t, n: int, k: int = 0) -> np.ndarray:
    """k-th time derivative of ``[1, t, ..., t**n]``; shape ``t.shape + (n + 1,)``."""
    t = np.asarray(t, dtype=float)[..., None]
    i = np.arange(n + 1)
    coef = falling(i, k)
    expo = np.maximum(i - k, 0)
    return coef * t**expo


@dataclass
class PolyTrajectory:
    """N segments of order-n polynomials; segment ``j`` is defined on ``[0, exp(tau[j])]``."""

    coeffs: np.ndarray  # (N, 3, n + 1)
    tau: np.ndarray  # (N,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = np.array(self.coeffs, dtype=float)
        self.tau = np.array(self.tau, dtype=float).reshape(-1)
        if self.coeffs.ndim != 3 or self.coeffs.shape[1] != 3:
            raise ValueError("coeffs must have shape (N, 3, n + 1)")
        if self.coeffs.shape[0] != self.tau.size or self.tau.size == 0:
            raise ValueError("need one duration per segment and at least one segment")

    @classmethod
    def from_durations(cls, coeffs, durations, **meta) -> "PolyTrajectory":
        return cls(coeffs, np.log(np.asarray(durations, dtype=float)), dict(meta))

    @property
    def n_segments(self) -> int:
        return self.coeffs.shape[0]

    @property
    def order(self) -> int:
        return self.coeffs.shape[2] - 1

    @property
    def durations(self) -> np.ndarray:
        return np.exp(self.tau)

    @property
    def duration(self) -> float:
        return float(self.durations.sum())

    @property
    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    def segment_eval(self, j: int, t, k: int = 0) -> np.ndarray:
        """k-th derivative of segment ``j`` at local times ``t``; shape ``t.shape + (3,)``."""
        return power_basis(t, self.order, k) @ self.coeffs[j].T

    def locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        bp = self.breakpoints
        idx = np.clip(np.searchsorted(bp, t, side="right") - 1, 0, self.n_segments - 1)
        local = np.clip(t - bp[idx], 0.0, self.durations[idx])
        return idx, local

    def evaluate(self, t, k: int = 0) -> np.ndarray:
        """k-th derivative at global times ``t`` (clamped to the trajectory span); shape (len(t), 3)."""
        idx, local = self.locate(t)
        B = power_basis(local, self.order, k)
        return np.einsum("si,sai->sa", B, self.coeffs[idx])

    def start_state(self):
        return self.segment_eval(0, 0.0, 0), self.segment_eval(0, 0.0, 1)

    def end_state(self):
        T = self.durations[-1]
        return self.segment_eval(self.n_segments - 1, T, 0), self.segment_eval(self.n_segments - 1, T, 1)

    def junction_residuals(self, max_order: int = 2) -> np.ndarray:
        """Max abs mismatch of derivatives 0..max_order at each junction, shape (N-1, max_order+1)."""
        T = self.durations
        out = np.zeros((self.n_segments - 1, max_order + 1))
        for j in range(self.n_segments - 1):
            for m in range(max_order + 1):
                left = self.segment_eval(j, T[j], m)
                right = self.segment_eval(j + 1, 0.0, m)
                out[j, m] = np.max(np.abs(left - right))
        return out

    def embed(self, order: int) -> "PolyTrajectory":
        """Same trajectory written with ``order`` coefficients (higher terms zero)."""
        if order < self.order:
            raise ValueError("cannot reduce polynomial order")
        c = np.zeros((self.n_segments, 3, order + 1))
        c[:, :, : self.order + 1] = self.coeffs
        return PolyTrajectory(c, self.tau.copy(), dict(self.meta))

    # --- CSV ------------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["segment", "axis", "duration"] + [f"c{i}" for i in range(self.order + 1)])
        T = self.durations
        for j in range(self.n_segments):
            for a, name in enumerate(AXES):
                w.writerow([j, name, repr(float(T[j]))] + [repr(float(v)) for v in self.coeffs[j, a]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PolyTrajectory":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:3] != ["segment", "axis", "duration"]:
            raise ValueError("not a trajectory CSV")
        n = len(rows[0]) - 4
        body = rows[1:]
        if len(body) % 3:
            raise ValueError("trajectory CSV needs three axis rows per segment")
        N = len(body) // 3
        c = np.zeros((N, 3, n + 1))
        T = np.zeros(N)
        for r in body:
            j, a = int(r[0]), AXES.index(r[1])
            T[j] = float(r[2])
            c[j, a] = [float(v) for v in r[3:]]
        if np.any(T <= 0) or not np.all(np.isfinite(c)):
            raise ValueError("invalid durations or coefficients")
        return cls.from_durations(c, T)


def from_coarse(coarse, order: int = 5) -> PolyTrajectory:
    """Embed each cubic segment of a coarse trajectory into an order-``order`` polynomial."""
    if not coarse.segments:
        raise ValueError("empty coarse trajectory")
    if order < 3:
        raise ValueError("order must be at least 3")
    c = np.zeros((len(coarse.segments), 3, order + 1))
    for j, seg in enumerate(coarse.segments):
        c[j, :, :4] = seg.coefficients()
    T = [seg.T for seg in coarse.segments]
    return PolyTrajectory.from_durations(c, T)


@lru_cache(maxsize=16)
def _hermite_pattern(n: int, M: int):
    i = np.arange(n + 1)
    coef = np.stack([falling(i, m) for m in range(M + 2)])
    expo = np.stack([np.maximum(i - m, 0) for m in range(M + 2)])
    return coef, expo


def hermite_matrix(T, n: int, M: int) -> np.ndarray:
    """Maps coefficients to boundary derivatives 0..M at both ends plus free coefficients.

    Returns shape ``T.shape + (n + 1, n + 1)``. Rows: derivatives at 0, derivatives
    at T, then identity rows for coefficients ``2M+2 .. n``.
    """
    T = np.asarray(T, dtype=float)
    coef, expo = _hermite_pattern(n, M)
    E = np.zeros(T.shape + (n + 1, n + 1))
    for m in range(M + 1):
        E[..., m, m] = math.factorial(m)
    E[..., M + 1: 2 * M + 2, :] = coef[: M + 1] * T[..., None, None] ** expo[: M + 1]
    for r in range(2 * M + 2, n + 1):
        E[..., r, r] = 1.0
    return E


def hermite_matrix_dT(T, n: int, M: int) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    coef, expo = _hermite_pattern(n, M)
    dE = np.zeros(T.shape + (n + 1, n + 1))
    dE[..., M + 1: 2 * M + 2, :] = coef[1: M + 2] * T[..., None, None] ** expo[1: M + 2]
    return dE

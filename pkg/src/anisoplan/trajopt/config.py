from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MotionLimits:
    """Anisotropic capability envelope.

    ``v_mx``/``v_my`` are the forward/lateral semi-axes of the body-frame
    velocity ellipse; ``v_max``/``a_max`` are per-axis (x, y, yaw) boxes.
    """

    v_mx: float = 2.4
    v_my: float = 1.2
    v_max: tuple[float, float, float] = (1.2, 1.2, 1.8)
    a_max: tuple[float, float, float] = (1.6, 1.6, 2.4)

    def __post_init__(self):
        if not (0 < self.v_my <= self.v_mx):
            raise ValueError("need 0 < v_my <= v_mx")
        if len(self.v_max) != 3 or len(self.a_max) != 3:
            raise ValueError("box limits need three entries (x, y, yaw)")
        if min(self.v_max) <= 0 or min(self.a_max) <= 0:
            raise ValueError("box limits must be positive")

    def scaled(self, factor: float) -> "MotionLimits":
        return MotionLimits(
            self.v_mx * factor,
            self.v_my * factor,
            tuple(v * factor for v in self.v_max),
            tuple(a * factor for a in self.a_max),
        )


@dataclass(frozen=True)
class OptConfig:
    lam_s: float = 1.0
    lam_c: float = 10.0
    lam_t: float = 1.0
    R: tuple[float, float, float] = (1.0, 1.0, 0.5)
    d_th: float = 0.5
    dt: float = 0.05
    eps_d: float | None = None  # default: map resolution / 10
    obstacle_shift: bool = True  # use 1/d - 1/d_th, continuous at the threshold
    order: int = 5
    continuity: int = 2
    limits: MotionLimits = field(default_factory=MotionLimits)
    # penalties act on limits shrunk by this fraction so the true limits hold
    # between samples and at finite penalty weight
    limit_margin: float = 0.03
    penalty_weight: float = 100.0
    penalty_growth: float = 10.0
    penalty_rounds: int = 3
    tol_c: float = 1e-3
    max_iter: int = 100  # per penalty round
    min_samples: int = 4
    time_budget: float | None = None  # seconds, soft

    def __post_init__(self):
        if min(self.lam_s, self.lam_c, self.lam_t, self.penalty_weight) < 0 or min(self.R) <= 0:
            raise ValueError("weights must be nonnegative and R positive")
        if not self.d_th > 0 or not self.dt > 0:
            raise ValueError("d_th and dt must be positive")
        if self.order < 2 * self.continuity + 1:
            raise ValueError("order too low for the requested continuity")
        if not 0 <= self.limit_margin < 1:
            raise ValueError("limit_margin must be in [0, 1)")

    @property
    def R_array(self) -> np.ndarray:
        return np.asarray(self.R, dtype=float)

"""Kinodynamic lazy roadmap search.

The roadmap is a jittered grid (one sample per cell). Best-first search
connects samples with minimum-energy segments, assigning each child a yaw that
points along the direction of travel, and collision-checks an edge only when
it would improve the child's cost.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .obvp import (
    ObvpSegment,
    ReferenceSpeeds,
    State,
    T_MIN,
    edge_cost,
    reference_duration,
    solve,
    unwrap_near,
    wrap_angle,
)
from .worldmodel import DistanceField, GridMap


class NoPathFound(RuntimeError):
    def __init__(self, reason: str, iterations: int, best_f: float):
        self.iterations = iterations
        self.best_f = best_f
        super().__init__(f"no path found ({reason}) after {iterations} iterations; best f_c = {best_f:.4g}")


@dataclass(frozen=True)
class SearchConfig:
    grid_size: float = 0.5
    max_bias: float = 0.15
    expand_radius: float | None = None  # default 2.5 * grid_size
    lam_yaw: float = 1.0
    clearance: float = 0.3
    check_step: float = 0.05
    speeds: ReferenceSpeeds = field(default_factory=ReferenceSpeeds)
    t_min: float = T_MIN
    max_iter: int | None = None  # default 10 * roadmap size
    freeze_yaw: bool = False
    seed: int = 0

    @property
    def radius(self) -> float:
        return 2.5 * self.grid_size if self.expand_radius is None else self.expand_radius


@dataclass(frozen=True)
class RoadMap:
    poses: np.ndarray  # (nx, ny, 3)
    grid_size: float
    max_bias: float
    origin: tuple[float, float]

    @property
    def shape(self) -> tuple[int, int]:
        return self.poses.shape[0], self.poses.shape[1]

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    def anchor(self, idx: int, idy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (idx + 0.5) * self.grid_size,
            self.origin[1] + (idy + 0.5) * self.grid_size,
        )

    def cell_of(self, xy) -> tuple[int, int]:
        nx, ny = self.shape
        i = int(math.floor((float(xy[0]) - self.origin[0]) / self.grid_size))
        j = int(math.floor((float(xy[1]) - self.origin[1]) / self.grid_size))
        return min(max(i, 0), nx - 1), min(max(j, 0), ny - 1)


def build_roadmap(grid: GridMap, grid_size: float, max_bias: float, seed: int) -> RoadMap:
    """One jittered sample per grid cell; occupancy is ignored here and checked lazily on edges."""
    if not grid_size > 0 or max_bias < 0:
        raise ValueError("grid size must be positive and bias nonnegative")
    if not max_bias < grid_size / 2:
        raise ValueError("max bias must be below half the grid size")
    w, h = grid.size_m
    if w < grid_size or h < grid_size:
        raise ValueError("map is smaller than one roadmap cell")
    nx = math.ceil(w / grid_size - 1e-9)
    ny = math.ceil(h / grid_size - 1e-9)
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-1.0, 1.0, size=(nx, ny, 2)) * max_bias
    ox, oy = grid.origin
    ax = ox + (np.arange(nx) + 0.5) * grid_size
    ay = oy + (np.arange(ny) + 0.5) * grid_size
    poses = np.zeros((nx, ny, 3))
    poses[..., 0] = np.clip(ax[:, None] + jitter[..., 0], ox, ox + w)
    poses[..., 1] = np.clip(ay[None, :] + jitter[..., 1], oy, oy + h)
    poses.flags.writeable = False
    return RoadMap(poses, grid_size, max_bias, grid.origin)


def expand(roadmap: RoadMap, parent_xy, radius: float, exclude=None) -> list[tuple[int, int]]:
    """Indices of samples within ``radius`` of ``parent_xy``, minus the parent's own cell."""
    if exclude is None:
        exclude = roadmap.cell_of(parent_xy)
    ci, cj = roadmap.cell_of(parent_xy)
    reach = math.ceil((radius + 2 * roadmap.max_bias) / roadmap.grid_size) + 1
    nx, ny = roadmap.shape
    i0, i1 = max(ci - reach, 0), min(ci + reach, nx - 1)
    j0, j1 = max(cj - reach, 0), min(cj + reach, ny - 1)
    block = roadmap.poses[i0:i1 + 1, j0:j1 + 1, :2]
    d = np.hypot(block[..., 0] - parent_xy[0], block[..., 1] - parent_xy[1])
    hits = np.argwhere(d <= radius + 1e-12)
    out = []
    for di, dj in hits:
        cell = (int(i0 + di), int(j0 + dj))
        if cell != tuple(exclude):
            out.append(cell)
    return out


def assign_yaw(parent: State, child_xy, goal) -> float:
    """Goal yaw at the goal position, else the heading from parent to child (unwrapped near the parent)."""
    child_xy = np.asarray(child_xy, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if np.allclose(child_xy, goal[:2], rtol=0.0, atol=1e-12):
        return unwrap_near(goal[2], parent.yaw)
    dx, dy = child_xy - parent.xy
    if dx == 0.0 and dy == 0.0:
        return parent.yaw
    return unwrap_near(math.atan2(dy, dx), parent.yaw)


def segment_check_points(seg: ObvpSegment, step: float) -> np.ndarray:
    """Planar points along ``seg`` spaced at most ``step`` apart in arc length, endpoints included."""
    if not step > 0:
        raise ValueError("check step must be positive")
    # |v(t) - v0| = |alpha| |t^2/2 - T t| <= |alpha| T^2 / 2
    vbound = float(np.hypot(*seg.v0[:2]) + np.hypot(*seg.alpha[:2]) * seg.T**2 / 2)
    n = max(1, math.ceil(vbound * seg.T / step))
    t = np.linspace(0.0, seg.T, n + 1)
    return seg.position(t)[:, :2]


def collision_free(seg: ObvpSegment, field: DistanceField, clearance: float, step: float) -> bool:
    d, _, outside = field.query(segment_check_points(seg, step))
    return bool(np.all(d > clearance) and not outside.any())


@dataclass(frozen=True)
class CoarseTrajectory:
    segments: tuple[ObvpSegment, ...]
    costs: tuple[float, ...]

    @property
    def duration(self) -> float:
        return float(sum(s.T for s in self.segments))

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs))

    @property
    def start(self) -> State:
        s = self.segments[0]
        return State(s.p0, s.v0)

    @property
    def end(self) -> State:
        return self.segments[-1].end_state

    def junction_residuals(self) -> np.ndarray:
        """Per-junction max |position| and |velocity| mismatch, shape (N-1, 2)."""
        out = []
        for a, b in zip(self.segments[:-1], self.segments[1:]):
            out.append([
                np.max(np.abs(a.position(a.T) - b.p0)),
                np.max(np.abs(a.velocity(a.T) - b.v0)),
            ])
        return np.array(out).reshape(-1, 2)

    def sample(self, t):
        """Position, velocity, acceleration at global times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ends = np.cumsum([s.T for s in self.segments])
        idx = np.minimum(np.searchsorted(ends, t, side="right"), len(self.segments) - 1)
        starts = ends - np.array([s.T for s in self.segments])
        p = np.zeros((t.size, 3))
        v = np.zeros((t.size, 3))
        a = np.zeros((t.size, 3))
        for k, seg in enumerate(self.segments):
            m = idx == k
            if m.any():
                tl = np.clip(t[m] - starts[k], 0.0, seg.T)
                p[m], v[m], a[m] = seg.position(tl), seg.velocity(tl), seg.acceleration(tl)
        return p, v, a


@dataclass
class SearchNode:
    cell: tuple[int, int]
    state: State
    parent: "SearchNode | None"
    g: float
    h: float
    segment: ObvpSegment | None = None
    cost: float = 0.0

    @property
    def f(self) -> float:
        return self.g + self.h


@dataclass
class SearchStats:
    iterations: int = 0
    expansions: int = 0
    edges_evaluated: int = 0
    collision_checks: int = 0
    reopened: int = 0
    closed_g: dict = field(default_factory=dict)  # cell -> list of g values when (re)closed


class KinoPlanner:
    """Single-threaded search instance; owns its open/closed bookkeeping."""

    def __init__(self, grid: GridMap, field: DistanceField, config: SearchConfig = SearchConfig()):
        self.grid = grid
        self.field = field
        self.config = config
        self.roadmap = build_roadmap(grid, config.grid_size, config.max_bias, config.seed)
        self.stats = SearchStats()

    @property
    def lam_yaw(self) -> float:
        return 0.0 if self.config.freeze_yaw else self.config.lam_yaw

    def heuristic(self, state: State, goal) -> float:
        dyaw = wrap_angle(goal[2] - state.yaw)
        return self.lam_yaw * dyaw**2 + float(np.hypot(goal[0] - state.p[0], goal[1] - state.p[1]))

    def _edge(self, node: SearchNode, target_xy, goal):
        cfg = self.config
        if cfg.freeze_yaw:
            yaw = node.state.yaw
        else:
            yaw = assign_yaw(node.state, target_xy, goal)
        to_p = np.array([target_xy[0], target_xy[1], yaw])
        T = reference_duration(node.state, to_p, cfg.speeds, cfg.t_min)
        seg = solve(node.state, to_p, T)
        return seg, edge_cost(seg, self.lam_yaw)

    def _clear(self, seg: ObvpSegment) -> bool:
        self.stats.collision_checks += 1
        # every path point is within step/2 of a sample and the interpolated field is
        # sqrt(2)-Lipschitz, so this margin keeps the clearance between samples too
        step = self.config.check_step
        return collision_free(seg, self.field, self.config.clearance + math.sqrt(2) * step / 2, step)

    def plan(self, start: State, goal) -> CoarseTrajectory:
        cfg = self.config
        goal = np.asarray(goal, dtype=float).reshape(3)
        if cfg.freeze_yaw:
            start = State(start.p, start.v * np.array([1, 1, 0]))
        rm = self.roadmap
        stats = self.stats = SearchStats()
        max_iter = cfg.max_iter if cfg.max_iter is not None else 10 * rm.size
        best_f = math.inf

        d_goal, _, out_goal = self.field.query(goal[:2])
        if out_goal or not d_goal > cfg.clearance:
            raise NoPathFound("goal is not clear", 0, best_f)
        d_start, _, out_start = self.field.query(start.p[:2])
        if out_start or not d_start > cfg.clearance:
            raise NoPathFound("start is not clear", 0, best_f)

        start_cell = rm.cell_of(start.xy)
        goal_cell = rm.cell_of(goal[:2])
        root = SearchNode(start_cell, start, None, 0.0, self.heuristic(start, goal))

        if start_cell == goal_cell:
            seg, cost = self._edge(root, goal[:2], goal)
            stats.edges_evaluated += 1
            if self._clear(seg):
                return CoarseTrajectory((seg,), (cost,))

        counter = itertools.count()
        open_heap = [(root.f, root.h, next(counter), root)]
        best_g = {start_cell: 0.0}
        closed: dict[tuple[int, int], SearchNode] = {}

        while stats.iterations < max_iter:
            if not open_heap:
                raise NoPathFound("open set exhausted", stats.iterations, best_f)
            _, _, _, node = heapq.heappop(open_heap)
            if node.g > best_g.get(node.cell, math.inf):
                continue  # superseded entry
            stats.iterations += 1
            best_f = node.f
            if node.cell in closed:
                stats.reopened += 1
            closed[node.cell] = node
            stats.closed_g.setdefault(node.cell, []).append(node.g)
            if node.cell == goal_cell and node is not root:
                return self._backtrace(node)

            stats.expansions += 1
            for cell in expand(rm, node.state.xy, cfg.radius, exclude=node.cell):
                target_xy = goal[:2] if cell == goal_cell else rm.poses[cell][:2]
                if cell == goal_cell and np.hypot(*(goal[:2] - node.state.xy)) > cfg.radius:
                    continue
                seg, cost = self._edge(node, target_xy, goal)
                stats.edges_evaluated += 1
                g_new = node.g + cost
                if g_new >= best_g.get(cell, math.inf):
                    continue
                if not self._clear(seg):
                    continue
                child = SearchNode(cell, seg.end_state, node, g_new, 0.0, seg, cost)
                child.h = self.heuristic(child.state, goal)
                best_g[cell] = g_new
                heapq.heappush(open_heap, (child.f, child.h, next(counter), child))
        raise NoPathFound("iteration limit reached", stats.iterations, best_f)

    @staticmethod
    def _backtrace(node: SearchNode) -> CoarseTrajectory:
        segs, costs = [], []
        while node.parent is not None:
            segs.append(node.segment)
            costs.append(node.cost)
            node = node.parent
        return CoarseTrajectory(tuple(reversed(segs)), tuple(reversed(costs)))


def plan(grid: GridMap, field: DistanceField, start: State, goal, config: SearchConfig = SearchConfig()) -> CoarseTrajectory:
    return KinoPlanner(grid, field, config).plan(start, goal)

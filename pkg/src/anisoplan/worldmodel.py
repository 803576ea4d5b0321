"""Planar obstacle world: occupancy grid, Euclidean distance field and map I/O.

Grid convention: ``occupancy[j, i]`` is the cell with column ``i`` (x) and row
``j`` (y); cell ``(0, 0)`` has its lower-left corner at ``origin``. Map files
store rows top-down (highest ``j`` first), like an image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

PathLike = Union[str, Path]


class MapFormatError(ValueError):
    """Raised when a map file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class GridMap:
    width: int
    height: int
    resolution: float
    origin: tuple[float, float]
    occupancy: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("map dimensions must be positive")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != (self.height, self.width):
            raise ValueError(
                f"occupancy shape {occ.shape} != (height, width) = {(self.height, self.width)}"
            )
        occ = occ.copy()
        occ.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def empty(cls, width: int, height: int, resolution: float, origin=(0.0, 0.0)) -> "GridMap":
        return cls(width, height, resolution, origin, np.zeros((height, width), dtype=bool))

    @property
    def size_m(self) -> tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    @property
    def diagonal(self) -> float:
        w, h = self.size_m
        return float(np.hypot(w, h))

    def contains(self, p) -> bool:
        x, y = float(p[0]), float(p[1])
        ox, oy = self.origin
        w, h = self.size_m
        return ox <= x <= ox + w and oy <= y <= oy + h

    def world_to_cell(self, p) -> tuple[int, int]:
        """Cell indices ``(i, j)`` holding point ``p``; the far map edge maps to the last cell."""
        ox, oy = self.origin
        i = int(np.floor((float(p[0]) - ox) / self.resolution))
        j = int(np.floor((float(p[1]) - oy) / self.resolution))
        return min(max(i, 0), self.width - 1), min(max(j, 0), self.height - 1)

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        ox, oy = self.origin
        return ox + (i + 0.5) * self.resolution, oy + (j + 0.5) * self.resolution

    def with_box(self, x0: float, y0: float, x1: float, y1: float) -> "GridMap":
        """Copy of the map with every cell whose center lies in the box marked occupied."""
        ox, oy = self.origin
        xs = ox + (np.arange(self.width) + 0.5) * self.resolution
        ys = oy + (np.arange(self.height) + 0.5) * self.resolution
        mask = ((ys[:, None] >= y0) & (ys[:, None] <= y1)) & ((xs[None, :] >= x0) & (xs[None, :] <= x1))
        return GridMap(self.width, self.height, self.resolution, self.origin, self.occupancy | mask)


@dataclass(frozen=True)
class DistanceField:
    """Distance (meters) from each cell center to the nearest occupied cell center."""

    grid: GridMap
    distance: np.ndarray = field(repr=False)
    nearest: np.ndarray | None = field(default=None, repr=False)

    @property
    def resolution(self) -> float:
        return self.grid.resolution

    def query(self, points):
        """Vectorized bilinear lookup.

        Returns ``(distance, gradient, outside)`` for an ``(..., 2)`` array of
        points. Points outside the map get distance 0 and zero gradient, and are
        marked in ``outside``.
        """
        pts = np.asarray(points, dtype=float)
        g = self.grid
        res = g.resolution
        ox, oy = g.origin
        x = pts[..., 0]
        y = pts[..., 1]
        w_m, h_m = g.size_m
        outside = (x < ox) | (x > ox + w_m) | (y < oy) | (y > oy + h_m) | ~np.isfinite(x) | ~np.isfinite(y)

        u = (np.where(outside, ox, x) - ox) / res - 0.5
        v = (np.where(outside, oy, y) - oy) / res - 0.5
        # half-cell border: clamp onto the outermost cell centers
        du_dx = np.where((u < 0) | (u > g.width - 1), 0.0, 1.0 / res)
        dv_dy = np.where((v < 0) | (v > g.height - 1), 0.0, 1.0 / res)
        u = np.clip(u, 0.0, g.width - 1)
        v = np.clip(v, 0.0, g.height - 1)
        i0 = np.minimum(np.floor(u).astype(int), max(g.width - 2, 0))
        j0 = np.minimum(np.floor(v).astype(int), max(g.height - 2, 0))
        i1 = np.minimum(i0 + 1, g.width - 1)
        j1 = np.minimum(j0 + 1, g.height - 1)
        fu = u - i0
        fv = v - j0

        D = self.distance
        d00 = D[j0, i0]
        d10 = D[j0, i1]
        d01 = D[j1, i0]
        d11 = D[j1, i1]
        d = (d00 * (1 - fu) + d10 * fu) * (1 - fv) + (d01 * (1 - fu) + d11 * fu) * fv
        gx = ((d10 - d00) * (1 - fv) + (d11 - d01) * fv) * du_dx
        gy = ((d01 - d00) * (1 - fu) + (d11 - d10) * fu) * dv_dy

        d = np.where(outside, 0.0, d)
        grad = np.stack([np.where(outside, 0.0, gx), np.where(outside, 0.0, gy)], axis=-1)
        return d, grad, outside


def compute_edf(grid: GridMap) -> DistanceField:
    """Exact Euclidean distance transform over cell centers."""
    occ = grid.occupancy
    if not occ.any():
        dist = np.full(occ.shape, grid.diagonal)
        nearest = np.full((2,) + occ.shape, -1, dtype=int)
    else:
        # ndimage measures distance to the nearest zero element
        nearest = ndimage.distance_transform_edt(~occ, return_distances=False, return_indices=True)
        jj, ii = np.indices(occ.shape)
        sq = (nearest[0] - jj) ** 2 + (nearest[1] - ii) ** 2
        dist = np.minimum(np.sqrt(sq) * grid.resolution, grid.diagonal)
    dist.flags.writeable = False
    return DistanceField(grid, dist, nearest)


def distance_at(field: DistanceField, p) -> float:
    """Interpolated obstacle distance at ``p``; 0 outside the map."""
    d, _, _ = field.query(np.asarray(p, dtype=float)[:2])
    return float(d)


def is_clear(field: DistanceField, p, clearance: float) -> bool:
    if clearance < 0:
        raise ValueError("clearance must be nonnegative")
    return distance_at(field, p) > clearance


# --- file I/O ---------------------------------------------------------------

def load_map(path: PathLike, resolution: float = 0.1, origin=(0.0, 0.0)) -> GridMap:
    """Load a text grid map, or a PGM image (``resolution``/``origin`` apply to PGM only)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P2", b"P5"):
        return _load_pgm(raw, resolution, origin)
    return parse_map_text(raw.decode("utf-8"))


def parse_map_text(text: str) -> GridMap:
    header = None
    rows: list[str] = []
    row_lines: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if header is None:
            parts = s.split()
            if len(parts) != 5:
                raise MapFormatError(
                    "header must be 'width height resolution origin_x origin_y'", lineno
                )
            try:
                w, h = int(parts[0]), int(parts[1])
                res, ox, oy = (float(v) for v in parts[2:])
            except ValueError as exc:
                raise MapFormatError(f"bad header value: {exc}", lineno) from None
            if w <= 0 or h <= 0 or not res > 0:
                raise MapFormatError("width, height and resolution must be positive", lineno)
            header = (w, h, res, ox, oy)
            continue
        bad = set(s) - {"0", "1"}
        if bad:
            col = min(s.index(c) for c in bad)
            raise MapFormatError(f"unexpected character {s[col]!r} at offset {col}", lineno)
        rows.append(s)
        row_lines.append(lineno)
    if header is None:
        raise MapFormatError("empty map file")
    w, h, res, ox, oy = header
    if len(rows) != h:
        raise MapFormatError(f"expected {h} rows, found {len(rows)}")
    for s, lineno in zip(rows, row_lines):
        if len(s) != w:
            raise MapFormatError(f"expected {w} columns, found {len(s)}", lineno)
    occ = np.array([[c == "1" for c in s] for s in rows], dtype=bool)[::-1]
    return GridMap(w, h, res, (ox, oy), occ)


def format_map_text(grid: GridMap) -> str:
    lines = [f"{grid.width} {grid.height} {grid.resolution!r} {grid.origin[0]!r} {grid.origin[1]!r}"]
    for row in grid.occupancy[::-1]:
        lines.append("".join("1" if c else "0" for c in row))
    return "\n".join(lines) + "\n"


def save_map(grid: GridMap, path: PathLike) -> None:
    Path(path).write_text(format_map_text(grid))


def _load_pgm(raw: bytes, resolution: float, origin) -> GridMap:
    magic = raw[:2]
    tokens: list[bytes] = []
    pos = 2
    # header: width, height, maxval, with '#' comments
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise MapFormatError("truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MapFormatError("bad PGM header") from None
    if w <= 0 or h <= 0 or maxval <= 0:
        raise MapFormatError("bad PGM dimensions")
    if magic == b"P5":
        pos += 1
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        data = np.frombuffer(raw[pos:], dtype=dtype)
        if data.size < w * h:
            raise MapFormatError(f"PGM pixel data truncated: {data.size} < {w * h}")
        pix = data[: w * h].reshape(h, w).astype(float)
    else:
        try:
            vals = [int(t) for t in raw[pos:].split()]
        except ValueError:
            raise MapFormatError("bad ASCII PGM pixel value") from None
        if len(vals) != w * h:
            raise MapFormatError(f"expected {w * h} pixels, found {len(vals)}")
        pix = np.array(vals, dtype=float).reshape(h, w)
    occ = pix < 0.5 * maxval
    return GridMap(w, h, resolution, origin, occ[::-1])

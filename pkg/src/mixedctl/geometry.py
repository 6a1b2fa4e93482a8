"""Uniform 1D grids: the interval, its truncated exterior collar, and time grids.

Extended node ordering is fixed globally:
left collar, left boundary, interior (ascending), right boundary, right collar.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Invalid geometry, grid or solver configuration."""


class TagMismatchError(ValueError):
    """Grid functions combined across incompatible node sets."""


class Tag(str, enum.Enum):
    INTERIOR = "interior"
    EXTENDED = "extended"
    BOUNDARY = "boundary"
    COLLAR = "collar"


@dataclass(frozen=True, eq=False)
class Geometry1D:
    x_left: float
    x_right: float
    collar_width: float
    n_interior: int
    h: float
    n_collar: int
    x: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.x.size

    @property
    def interior_index(self) -> np.ndarray:
        start = self.n_collar + 1
        return np.arange(start, start + self.n_interior - 1)

    @property
    def boundary_index(self) -> np.ndarray:
        return np.array([self.n_collar, self.n_collar + self.n_interior])

    @property
    def collar_index(self) -> np.ndarray:
        right = self.n_collar + self.n_interior + 1
        return np.concatenate([np.arange(self.n_collar), np.arange(right, right + self.n_collar)])

    def index(self, tag: Tag) -> np.ndarray:
        tag = Tag(tag)
        if tag is Tag.EXTENDED:
            return np.arange(self.n_nodes)
        if tag is Tag.INTERIOR:
            return self.interior_index
        if tag is Tag.BOUNDARY:
            return self.boundary_index
        return self.collar_index

    def size(self, tag: Tag) -> int:
        return self.index(tag).size

    def nodes(self, tag: Tag) -> np.ndarray:
        return self.x[self.index(tag)]

    def tags(self) -> np.ndarray:
        """Per-node tag label over the extended grid."""
        labels = np.full(self.n_nodes, Tag.COLLAR.value, dtype=object)
        labels[self.interior_index] = Tag.INTERIOR.value
        labels[self.boundary_index] = Tag.BOUNDARY.value
        return labels

    @property
    def truncation_ends(self) -> tuple[float, float]:
        return float(self.x[0]), float(self.x[-1])


def build_geometry(x_left: float, x_right: float, n_interior: int, collar_width: float) -> Geometry1D:
    """Uniform grid on ``(x_left, x_right)`` with ``n_interior`` cells and a collar on both sides.

    >>> g = build_geometry(0.0, 1.0, 4, 0.5)
    >>> g.h, g.n_collar, g.size(Tag.INTERIOR)
    (0.25, 2, 3)
    """
    if not np.isfinite(x_left) or not np.isfinite(x_right) or not x_left < x_right:
        raise ConfigurationError(f"x_left must be < x_right (got x_left={x_left}, x_right={x_right})")
    if int(n_interior) != n_interior or n_interior < 4:
        raise ConfigurationError(f"n_interior must be an integer >= 4 (got {n_interior})")
    n_interior = int(n_interior)
    h = (x_right - x_left) / n_interior
    if not collar_width > 0:
        raise ConfigurationError(f"collar_width must be positive (got {collar_width})")
    n_collar = int(round(collar_width / h))
    if n_collar < 1:
        raise ConfigurationError(f"collar_width must be >= h={h} (got {collar_width})")
    offsets = np.arange(-n_collar, n_interior + n_collar + 1)
    x = x_left + offsets * h
    x.setflags(write=False)
    return Geometry1D(float(x_left), float(x_right), float(collar_width), n_interior, h, n_collar, x)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError(f"T must be positive (got {self.T})")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer (got {self.n_steps})")

    @property
    def tau(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.tau
        t[-1] = self.T
        return t


@dataclass(frozen=True, eq=False)
class GridFunction:
    geom: Geometry1D
    values: np.ndarray
    tag: Tag = Tag.EXTENDED

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        tag = Tag(self.tag)
        if values.shape != (self.geom.size(tag),):
            raise TagMismatchError(
                f"{tag.value} grid function needs {self.geom.size(tag)} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "tag", tag)

    @classmethod
    def from_callable(cls, geom: Geometry1D, fn, tag: Tag = Tag.EXTENDED) -> "GridFunction":
        x = geom.nodes(tag)
        return cls(geom, np.broadcast_to(np.asarray(fn(x), dtype=float), x.shape), tag)

    @property
    def x(self) -> np.ndarray:
        return self.geom.nodes(self.tag)


def restrict(gf: GridFunction, tag: Tag) -> GridFunction:
    tag = Tag(tag)
    if gf.tag is tag:
        return gf
    if gf.tag is not Tag.EXTENDED:
        raise TagMismatchError(f"cannot restrict {gf.tag.value} to {tag.value}")
    return GridFunction(gf.geom, gf.values[gf.geom.index(tag)], tag)


def extend_by_zero(gf: GridFunction, tag: Tag = Tag.EXTENDED) -> GridFunction:
    tag = Tag(tag)
    if gf.tag is tag:
        return gf
    if tag is not Tag.EXTENDED:
        raise TagMismatchError(f"cannot extend {gf.tag.value} to {tag.value}")
    values = np.zeros(gf.geom.n_nodes)
    values[gf.geom.index(gf.tag)] = gf.values
    return GridFunction(gf.geom, values, Tag.EXTENDED)


def assemble_extended(geom: Geometry1D, interior, boundary=None, collar=None) -> np.ndarray:
    """Scatter interior/boundary/collar value arrays into one extended-grid array."""
    out = np.zeros(geom.n_nodes)
    out[geom.interior_index] = interior
    if boundary is not None:
        out[geom.boundary_index] = boundary
    if collar is not None:
        out[geom.collar_index] = collar
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Extended-grid frames at every time node, shape ``(n_steps + 1, n_nodes)``."""

    geom: Geometry1D
    time_grid: TimeGrid
    frames: np.ndarray

    def __post_init__(self):
        frames = np.array(self.frames, dtype=float)
        expected = (self.time_grid.n_steps + 1, self.geom.n_nodes)
        if frames.shape != expected:
            raise TagMismatchError(f"trajectory frames must have shape {expected}, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("trajectory contains non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def frame(self, m: int) -> GridFunction:
        return GridFunction(self.geom, self.frames[m], Tag.EXTENDED)

    def part(self, tag: Tag) -> np.ndarray:
        return self.frames[:, self.geom.index(tag)]

    @property
    def interior(self) -> np.ndarray:
        return self.part(Tag.INTERIOR)

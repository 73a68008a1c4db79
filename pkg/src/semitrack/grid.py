"""Grid-cell instance assignment and geometric primitives.

Coordinates are continuous grid units: cell ``(x, y)`` covers
``[x, x+1) x [y, y+1)`` and has its center at ``(x + 0.5, y + 0.5)``.
Masks are stored row-major as ``bits[y, x]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

BACKGROUND = -1


class DegenerateInstanceError(ValueError):
    """Raised for operations that need at least one set cell."""


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    @classmethod
    def from_cells(cls, cells, width: int, height: int | None = None) -> "Mask":
        """Build a mask from ``(x, y)`` cell coordinates."""
        bits = np.zeros((height or width, width), dtype=bool)
        for x, y in cells:
            bits[y, x] = True
        return cls(bits)

    def bbox(self) -> "BBox":
        if self.is_empty():
            raise DegenerateInstanceError("degenerate instance: empty mask has no box")
        ys, xs = np.nonzero(self.bits)
        return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"invalid box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class GridAssignConfig:
    grid_size: int = 16
    epsilon: float = 0.2

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")


@dataclass(frozen=True)
class InstanceCellSets:
    """Cell memberships of K instances, as flat (row-major) cell indices."""

    sets: tuple

    def __post_init__(self):
        sets = tuple(np.asarray(s, dtype=np.int64) for s in self.sets)
        object.__setattr__(self, "sets", sets)

    @property
    def n_instances(self) -> int:
        return len(self.sets)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(s) for s in self.sets], dtype=np.int64)

    def labels(self, n_cells: int) -> np.ndarray:
        """Dense per-cell label vector, -1 for background."""
        lab = np.full(n_cells, BACKGROUND, dtype=np.int64)
        for i, s in enumerate(self.sets):
            lab[s] = i
        return lab

    def validate(self, n_cells: int) -> None:
        # the sets are immutable, so one successful check per grid size suffices
        if self.__dict__.get("_valid_for") == n_cells:
            return
        for i, s in enumerate(self.sets):
            if len(s) == 0:
                raise ValueError(f"instance {i} has no cells")
            if s.min() < 0 or s.max() >= n_cells:
                raise ValueError(f"instance {i} has a cell index outside [0, {n_cells})")
        if np.bincount(np.concatenate(self.sets), minlength=n_cells).max() > 1:
            raise ValueError("cell sets must be pairwise disjoint")
        object.__setattr__(self, "_valid_for", n_cells)


@dataclass(frozen=True)
class InstanceLabelGrid:
    grid_size: int
    labels: np.ndarray
    n_instances: int
    dropped: tuple = field(default_factory=tuple)

    def cells_of(self, instance: int) -> np.ndarray:
        return np.flatnonzero(self.labels == instance)

    def present(self) -> list[int]:
        """Instance indices that own at least one cell, ascending."""
        return [int(i) for i in np.unique(self.labels) if i >= 0]

    def cell_sets(self) -> tuple[InstanceCellSets, list[int]]:
        """Cell sets of the present instances plus the instance index of each set."""
        ids = self.present()
        return InstanceCellSets(tuple(self.cells_of(i) for i in ids)), ids


def center_of_mass(mask: Mask) -> tuple[float, float]:
    if mask.is_empty():
        raise DegenerateInstanceError("degenerate instance: empty mask")
    ys, xs = np.nonzero(mask.bits)
    return float(xs.mean() + 0.5), float(ys.mean() + 0.5)


def assign_instances(masks, cfg: GridAssignConfig) -> InstanceLabelGrid:
    """Label grid cells by the ε-scaled center region of each instance.

    Cell ``(x, y)`` belongs to instance ``i`` when its center lies inside the box
    centered at the instance's center of mass with extents ``(ε w_i, ε h_i)``,
    where ``w_i, h_i`` are the width and height of the mask's bounding box.
    Where regions overlap, the smaller-area instance wins (lower index on ties).
    Instances whose region covers no cell center are dropped and recorded.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("assign_instances needs at least one mask")
    shape = masks[0].bits.shape
    if any(m.bits.shape != shape for m in masks):
        raise ValueError("all masks must have the same dimensions")
    if shape != (cfg.grid_size, cfg.grid_size):
        raise ValueError(f"mask shape {shape} does not match grid_size {cfg.grid_size}")

    k = len(masks)
    cx = np.empty(k)
    cy = np.empty(k)
    half_w = np.empty(k)
    half_h = np.empty(k)
    area = np.empty(k)
    for i, m in enumerate(masks):
        cx[i], cy[i] = center_of_mass(m)
        box = m.bbox()
        half_w[i] = 0.5 * cfg.epsilon * box.width
        half_h[i] = 0.5 * cfg.epsilon * box.height
        area[i] = m.area

    labels = kernels.assign_cells(cx, cy, half_w, half_h, area, cfg.grid_size)
    present = set(np.unique(labels[labels >= 0]).tolist())
    dropped = tuple(i for i in range(k) if i not in present)
    for i in dropped:
        logger.warning("instance %d dropped: its center region covers no cell center", i)
    return InstanceLabelGrid(cfg.grid_size, labels, k, dropped)


def mask_iou(a: Mask, b: Mask) -> float:
    if a.bits.shape != b.bits.shape:
        raise ValueError("masks must have equal dimensions")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        raise DegenerateInstanceError("IoU of two empty masks is undefined")
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def bbox_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)

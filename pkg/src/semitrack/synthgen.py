"""Deterministic moving-rectangle videos with per-cell appearance features.

A cell inside object ``o`` at frame ``t`` carries

    appearance_o + noise * N(0, I) + position_code(x, y) + drift * t * u

and a background cell carries the same terms without the appearance. The
appearance of an object is its category center plus a private identity
vector; both live in an ``appearance_rank``-dimensional subspace of the
feature space, while the position code lives in a disjoint
``position_rank``-dimensional subspace. The position code is a fixed random
texture over grid locations. Noise is isotropic. ``world_seed``
fixes everything shared between sequences (the subspaces, category centers,
the position code, the drift axis ``u``); ``seed`` drives objects, motion and
noise.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .grid import BBox, GridAssignConfig, InstanceLabelGrid, Mask, assign_instances
from .tracker import Detection


class InfeasibleSceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    grid_size: int = 16
    feature_dim: int = 16
    appearance_rank: int = 6
    position_rank: int = 4
    n_objects: tuple = (3, 6)
    size_range: tuple = (2, 4)
    velocity: tuple = (0.0, 1.5)
    appearance_noise: float = 0.3
    entry_exit_prob: float = 0.05
    drift: float = 0.0
    n_categories: int = 3
    category_strength: float = 1.0
    identity_strength: float = 1.0
    position_strength: float = 1.0
    background_level: float = 0.5
    epsilon: float = 0.5
    seed: int = 0
    world_seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_objects
        if lo < 1 or hi < lo:
            raise InfeasibleSceneError("n_objects must satisfy 1 <= min <= max")
        if self.appearance_noise < 0:
            raise InfeasibleSceneError("appearance_noise must be >= 0")
        if self.size_range[0] < 1 or self.size_range[1] < self.size_range[0]:
            raise InfeasibleSceneError("invalid size_range")
        if self.size_range[1] > self.grid_size:
            raise InfeasibleSceneError("objects larger than the grid")
        if self.appearance_rank + self.position_rank > self.feature_dim:
            raise InfeasibleSceneError("appearance and position subspaces exceed feature_dim")
        if not 0.0 <= self.entry_exit_prob <= 1.0:
            raise InfeasibleSceneError("entry_exit_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("n_objects", "size_range", "velocity"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SynthFrame:
    features: np.ndarray
    labels: InstanceLabelGrid
    track_ids: list
    masks: list
    boxes: list
    categories: list


@dataclass
class SynthSequence:
    spec: SceneSpec
    frames: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


@dataclass
class LabeledImage:
    features: np.ndarray
    labels: InstanceLabelGrid
    masks: list
    boxes: list
    categories: list


class World:
    """Structure shared by every sequence generated with the same ``world_seed``."""

    def __init__(self, spec: SceneSpec):
        rng = np.random.default_rng([spec.world_seed, 7])
        f, a, p = spec.feature_dim, spec.appearance_rank, spec.position_rank
        basis, _ = np.linalg.qr(rng.normal(size=(f, f)))
        self.appearance_basis = basis[:, :a].T
        self.position_basis = basis[:, a:a + p].T
        centers = rng.normal(size=(spec.n_categories, a))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        self.category_centers = spec.category_strength * centers @ self.appearance_basis
        # a fixed per-location texture: it varies from cell to cell, so it is
        # inconsistent within an object and changes as the object moves
        texture = rng.normal(size=(spec.grid_size ** 2, p)) / np.sqrt(p)
        self.position_code = spec.position_strength * texture @ self.position_basis
        # drift perturbs the appearance subspace, which any useful embedding reads
        axis = rng.normal(size=a) @ self.appearance_basis
        self.drift_axis = axis / np.linalg.norm(axis)

    def identity_vector(self, rng: np.random.Generator, strength: float) -> np.ndarray:
        a = self.appearance_basis.shape[0]
        return rng.normal(size=a) * strength / np.sqrt(a) @ self.appearance_basis


@dataclass
class _Obj:
    track_id: int
    category: int
    w: int
    h: int
    x: float
    y: float
    vx: float
    vy: float
    appearance: np.ndarray

    def cells(self) -> tuple[int, int, int, int]:
        x0, y0 = int(round(self.x)), int(round(self.y))
        return x0, y0, x0 + self.w, y0 + self.h


def _overlaps(a, b) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


class _Scene:
    def __init__(self, spec: SceneSpec, world: World, rng: np.random.Generator):
        self.spec, self.world, self.rng = spec, world, rng
        self.objects: list[_Obj] = []
        self.next_id = 0

    def spawn(self) -> bool:
        spec, rng = self.spec, self.rng
        lo, hi = spec.size_range
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        speed = rng.uniform(*spec.velocity)
        angle = rng.uniform(0, 2 * np.pi)
        category = self.next_id % spec.n_categories
        identity = self.world.identity_vector(rng, spec.identity_strength)
        for _ in range(100):
            x = rng.uniform(0, spec.grid_size - w)
            y = rng.uniform(0, spec.grid_size - h)
            obj = _Obj(self.next_id, category, w, h, x, y, speed * np.cos(angle), speed * np.sin(angle),
                       self.world.category_centers[category] + identity)
            if not any(_overlaps(obj.cells(), o.cells()) for o in self.objects):
                self.objects.append(obj)
                self.next_id += 1
                return True
        return False

    def move(self) -> None:
        s = self.spec.grid_size
        for i, o in enumerate(self.objects):
            x, y, vx, vy = o.x + o.vx, o.y + o.vy, o.vx, o.vy
            if x < 0 or x > s - o.w:
                vx = -vx
                x = min(max(x, 0.0), s - o.w)
            if y < 0 or y > s - o.h:
                vy = -vy
                y = min(max(y, 0.0), s - o.h)
            old = (o.x, o.y)
            o.x, o.y = x, y
            others = [p.cells() for j, p in enumerate(self.objects) if j != i]
            if any(_overlaps(o.cells(), c) for c in others):
                o.x, o.y = old
                vx, vy = -o.vx, -o.vy
            o.vx, o.vy = vx, vy

    def churn(self) -> None:
        spec, rng = self.spec, self.rng
        p = spec.entry_exit_prob
        if p == 0:
            return
        self.objects = [o for o in self.objects if rng.random() >= p]
        target = 0.5 * (spec.n_objects[0] + spec.n_objects[1])
        for _ in range(int(np.ceil(target))):
            if len(self.objects) < spec.n_objects[1] and rng.random() < p:
                self.spawn()
        if not self.objects:
            self.spawn()

    def render(self, t: int) -> SynthFrame:
        spec, rng, world = self.spec, self.rng, self.world
        s, f = spec.grid_size, spec.feature_dim
        features = rng.normal(size=(s * s, f)) * spec.appearance_noise
        features += world.position_code + spec.drift * t * world.drift_axis
        background = np.ones((s, s), dtype=bool)
        masks, boxes, cats, ids = [], [], [], []
        for o in self.objects:
            x0, y0, x1, y1 = o.cells()
            bits = np.zeros((s, s), dtype=bool)
            bits[y0:y1, x0:x1] = True
            features[bits.ravel()] += o.appearance
            background &= ~bits
            masks.append(Mask(bits))
            boxes.append(BBox(float(x0), float(y0), float(x1), float(y1)))
            cats.append(o.category)
            ids.append(o.track_id)
        features[background.ravel()] += spec.background_level * world.category_centers.mean(axis=0)
        labels = assign_instances(masks, GridAssignConfig(s, spec.epsilon)) if masks else \
            InstanceLabelGrid(s, np.full(s * s, -1, dtype=np.int64), 0)
        return SynthFrame(features, labels, ids, masks, boxes, cats)


def generate_sequence(spec: SceneSpec, length: int) -> SynthSequence:
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng([spec.seed, 11])
    scene = _Scene(spec, World(spec), rng)
    n0 = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    for _ in range(n0):
        if not scene.spawn():
            raise InfeasibleSceneError(f"could not place {n0} non-overlapping objects")
    seq = SynthSequence(spec)
    for t in range(length):
        if t > 0:
            scene.move()
            scene.churn()
        seq.frames.append(scene.render(t))
    return seq


def generate_sequences(spec: SceneSpec, n: int, length: int) -> list[SynthSequence]:
    """``n`` sequences whose seeds are derived from ``spec.seed``."""
    seeds = np.random.SeedSequence(spec.seed).generate_state(n)
    return [generate_sequence(dataclasses.replace(spec, seed=int(s)), length) for s in seeds]


def to_image_dataset(sequences, seed: int = 0) -> list[LabeledImage]:
    """Every frame as a standalone labeled image, shuffled, without track ids."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no sequences given")
    images = [LabeledImage(fr.features, fr.labels, fr.masks, fr.boxes, fr.categories)
              for seq in sequences for fr in seq.frames]
    order = np.random.default_rng(seed).permutation(len(images))
    return [images[i] for i in order]


def instance_cells(frame) -> list[np.ndarray]:
    """Cell indices per object in frame order; falls back to the full mask
    for objects whose center region was dropped."""
    out = []
    for i, m in enumerate(frame.masks):
        cells = frame.labels.cells_of(i)
        out.append(cells if len(cells) else np.flatnonzero(m.bits.ravel()))
    return out


def oracle_detections(seq: SynthSequence, head, branch: str = "image") -> list[list[Detection]]:
    """Ground-truth geometry with confidence 1 and head-averaged embeddings."""
    from .model import forward

    out = []
    for fr in seq.frames:
        emb = forward(head, fr.features, branch)
        out.append([
            Detection(cat, 1.0, box, mask, emb[cells].mean(axis=0))
            for cat, box, mask, cells in zip(fr.categories, fr.boxes, fr.masks, instance_cells(fr))
        ])
    return out

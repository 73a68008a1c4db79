"""Online embedding tracker with a memory bank.

Detections of each frame are scored against every bank entry (cosine
similarity of embeddings, then a bi-directional softmax), optionally fused with
confidence / box IoU / category agreement, and matched one-to-one. Detections
left unmatched open new tracks. Matched prototypes are refreshed with momentum.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .grid import BBox, Mask, bbox_iou
from .losses import softmax_rows


@dataclass
class Detection:
    category: int
    score: float
    bbox: BBox
    mask: Mask
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("detection embedding must be finite")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("detection score must lie in [0, 1]")


@dataclass
class BankEntry:
    track_id: int
    prototype: np.ndarray
    category: int
    bbox: BBox
    mask: Mask
    last_seen: int


@dataclass
class MemoryBank:
    entries: list = field(default_factory=list)
    next_id: int = 0

    def __len__(self):
        return len(self.entries)

    def copy(self) -> "MemoryBank":
        return MemoryBank(
            [BankEntry(e.track_id, e.prototype.copy(), e.category, e.bbox, e.mask, e.last_seen)
             for e in self.entries],
            self.next_id,
        )


@dataclass(frozen=True)
class TrackerConfig:
    """Association settings.

    ``threshold`` gates matches on the (bi-)softmax embedding score; fusion
    terms only re-rank candidates that pass the gate. ``sim_scale`` multiplies
    cosine similarities before the softmax. ``association="spatial"`` replaces
    the embedding score by a center-distance/category score (baseline).
    """

    threshold: float = 0.3
    momentum: float = 0.7
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    use_bi_softmax: bool = True
    use_postprocess: bool = False
    sim_scale: float = 1.0
    momentum_weights_new: bool = False
    assignment: str = "greedy"
    max_age: int | None = None
    association: str = "embedding"
    spatial_scale: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.assignment not in ("greedy", "hungarian"):
            raise ValueError(f"unknown assignment mode {self.assignment!r}")
        if self.association not in ("embedding", "spatial"):
            raise ValueError(f"unknown association mode {self.association!r}")
        if self.sim_scale <= 0 or self.spatial_scale <= 0:
            raise ValueError("scales must be positive")


@dataclass
class Decision:
    track_id: int
    is_new: bool
    score: float


@dataclass
class TrackResult:
    frames: list
    births: list

    @property
    def n_tracks(self) -> int:
        return len(self.births)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-norm embedding has no direction")
    return v / norm


def similarity(dets, bank) -> np.ndarray:
    """Cosine similarity between detection embeddings and bank prototypes, ``N x M``."""
    a = _unit(np.stack([d.embedding for d in dets]))
    b = _unit(np.stack([e.prototype for e in bank.entries]))
    return a @ b.T


def bi_softmax(sim: np.ndarray) -> np.ndarray:
    """Mean of the row-wise and column-wise softmax."""
    sim = np.asarray(sim, dtype=np.float64)
    return 0.5 * (softmax_rows(sim) + softmax_rows(sim.T).T)


def fuse_scores(bi: np.ndarray, dets, bank, cfg: TrackerConfig) -> np.ndarray:
    """``s(n,m) = bi(n,m) + α c(n) + β IoU(b_n, b_m) + γ δ(c_n, c_m)``."""
    conf = np.array([d.score for d in dets])[:, None]
    iou = np.array([[bbox_iou(d.bbox, e.bbox) for e in bank.entries] for d in dets])
    same = np.array([[float(d.category == e.category) for e in bank.entries] for d in dets])
    return bi + cfg.alpha * conf + cfg.beta * iou + cfg.gamma * same


def spatial_scores(dets, bank, cfg: TrackerConfig) -> np.ndarray:
    """Baseline score: ``δ(c_n, c_m) exp(-dist / spatial_scale)`` between box centers."""
    dc = np.array([d.bbox.center for d in dets])
    bc = np.array([e.bbox.center for e in bank.entries])
    dist = np.linalg.norm(dc[:, None, :] - bc[None, :, :], axis=-1)
    same = np.array([[d.category == e.category for e in bank.entries] for d in dets])
    return np.where(same, np.exp(-dist / cfg.spatial_scale), 0.0)


def _active(bank: MemoryBank, frame: int, cfg: TrackerConfig) -> list[int]:
    if cfg.max_age is None:
        return list(range(len(bank.entries)))
    return [j for j, e in enumerate(bank.entries) if frame - e.last_seen <= cfg.max_age]


def score_matrices(dets, bank: MemoryBank, cfg: TrackerConfig):
    """Return ``(gate, rank)`` score matrices for detections against all bank entries."""
    if cfg.association == "spatial":
        s = spatial_scores(dets, bank, cfg)
        return s, s
    logits = similarity(dets, bank) * cfg.sim_scale
    gate = bi_softmax(logits) if cfg.use_bi_softmax else softmax_rows(logits)
    rank = fuse_scores(gate, dets, bank, cfg) if cfg.use_postprocess else gate
    return gate, rank


def associate(dets, bank: MemoryBank, cfg: TrackerConfig, frame: int = 0) -> list[Decision]:
    """Match detections to bank entries; unmatched detections get fresh ids.

    Fresh ids are minted in detection order starting at ``bank.next_id``. The
    bank is not modified.
    """
    dets = list(dets)
    if not dets:
        return []
    active = _active(bank, frame, cfg)
    match = np.full(len(dets), -1, dtype=np.int64)
    gate = rank = None
    if active:
        sub = MemoryBank([bank.entries[j] for j in active], bank.next_id)
        gate, rank = score_matrices(dets, sub, cfg)
        if cfg.assignment == "greedy":
            match = kernels.greedy_match(np.ascontiguousarray(rank), np.ascontiguousarray(gate),
                                         cfg.threshold)
        else:
            cost = np.where(gate >= cfg.threshold, -rank, 1e9)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if gate[r, c] >= cfg.threshold:
                    match[r] = c

    decisions = []
    next_id = bank.next_id
    for n, c in enumerate(match):
        if c >= 0:
            entry = bank.entries[active[c]]
            decisions.append(Decision(entry.track_id, False, float(rank[n, c])))
        else:
            best = float(rank[n].max()) if rank is not None else 0.0
            decisions.append(Decision(next_id, True, best))
            next_id += 1
    return decisions


def update_bank(bank: MemoryBank, decisions, dets, cfg: TrackerConfig, frame: int = 0) -> MemoryBank:
    """Return a new bank with matched prototypes mixed by momentum and new tracks appended."""
    out = bank.copy()
    index = {e.track_id: j for j, e in enumerate(out.entries)}
    keep = cfg.momentum if not cfg.momentum_weights_new else 1.0 - cfg.momentum
    for dec, det in zip(decisions, dets):
        if dec.is_new:
            out.entries.append(BankEntry(dec.track_id, _unit(det.embedding), det.category,
                                         det.bbox, det.mask, frame))
            out.next_id = max(out.next_id, dec.track_id + 1)
        else:
            e = out.entries[index[dec.track_id]]
            mixed = keep * e.prototype + (1.0 - keep) * _unit(det.embedding)
            e.prototype = _unit(mixed)
            e.category, e.bbox, e.mask, e.last_seen = det.category, det.bbox, det.mask, frame
    return out


class Tracker:
    """A single online tracking session; feed frames in order with :meth:`step`."""

    def __init__(self, cfg: TrackerConfig = TrackerConfig()):
        self.cfg = cfg
        self.bank = MemoryBank()
        self.frame = 0
        self.births = []

    def step(self, dets) -> list[int]:
        dets = list(dets)
        decisions = associate(dets, self.bank, self.cfg, self.frame)
        self.bank = update_bank(self.bank, decisions, dets, self.cfg, self.frame)
        self.births.extend((self.frame, d.track_id) for d in decisions if d.is_new)
        self.frame += 1
        return [d.track_id for d in decisions]


def track_sequence(frames, cfg: TrackerConfig = TrackerConfig()) -> TrackResult:
    frames = list(frames)
    if not frames:
        raise ValueError("track_sequence needs at least one frame")
    session = Tracker(cfg)
    ids = [session.step(dets) for dets in frames]
    return TrackResult(ids, session.births)

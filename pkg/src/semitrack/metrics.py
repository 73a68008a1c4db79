"""Video instance segmentation AP/AR and CLEAR-MOT accuracy.

Tracks map frame indices to masks; a frame missing from a track counts as an
empty mask. Tracks carry a ``video_id`` so several videos can be scored at once;
matching never crosses videos.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .grid import DegenerateInstanceError, Mask

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class GtTrack:
    track_id: int
    category: int
    frames: dict
    video_id: int = 0

    def __post_init__(self):
        if not any(not m.is_empty() for m in self.frames.values()):
            raise ValueError(f"gt track {self.track_id} has no nonempty frame")


@dataclass
class PredTrack:
    track_id: int
    category: int
    confidence: float
    frames: dict
    video_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    AR1: float
    AR10: float
    MOTA: float | None = None
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _mask_shape(tracks) -> tuple[int, int]:
    for tr in tracks:
        for m in tr.frames.values():
            return m.bits.shape
    raise ValueError("tracks carry no masks")


def _stack(tracks, n_frames: int, shape) -> np.ndarray:
    """Flatten each track to one boolean row of ``n_frames * H * W`` cells."""
    cells = shape[0] * shape[1]
    out = np.zeros((len(tracks), n_frames * cells), dtype=np.bool_)
    for i, tr in enumerate(tracks):
        for t, m in tr.frames.items():
            out[i, t * cells:(t + 1) * cells] = m.bits.ravel()
    return out


def st_iou_matrix(a_tracks, b_tracks) -> np.ndarray:
    a_tracks, b_tracks = list(a_tracks), list(b_tracks)
    if not a_tracks or not b_tracks:
        return np.zeros((len(a_tracks), len(b_tracks)))
    shape = _mask_shape(a_tracks + b_tracks)
    n_frames = 1 + max(t for tr in a_tracks + b_tracks for t in tr.frames) if any(
        tr.frames for tr in a_tracks + b_tracks) else 1
    iou = kernels.st_iou_matrix(_stack(a_tracks, n_frames, shape), _stack(b_tracks, n_frames, shape))
    return np.nan_to_num(iou, nan=0.0)


def st_iou(a, b) -> float:
    """Summed per-frame intersections over summed per-frame unions."""
    inter = union = 0
    for t in set(a.frames) | set(b.frames):
        ma, mb = a.frames.get(t), b.frames.get(t)
        if ma is None and mb is None:
            continue
        if ma is None:
            union += mb.area
        elif mb is None:
            union += ma.area
        else:
            inter += int(np.logical_and(ma.bits, mb.bits).sum())
            union += int(np.logical_or(ma.bits, mb.bits).sum())
    if union == 0:
        raise DegenerateInstanceError("spatio-temporal IoU of two empty tracks is undefined")
    return inter / union


# --------------------------------------------------------------------------
# video AP / AR
# --------------------------------------------------------------------------

def match_video(preds, gts, iou: np.ndarray, threshold: float) -> np.ndarray:
    """One-to-one matching of preds (in the given order) to gts with IoU >= threshold.

    Preds are inserted one at a time; each takes its best free gt or, failing
    that, an augmenting path re-routes earlier matches. The result has maximum
    size, and its set of matched preds is the earliest possible in pred order.
    When no pred competes for a taken gt this is plain greedy matching.
    Returns the matched gt index or -1 per pred.
    """
    n_p, n_g = len(preds), len(gts)
    thr = min(threshold, 1 - 1e-10)
    iou = np.asarray(iou).reshape(n_p, n_g)
    cand = [sorted(np.flatnonzero(iou[d] >= thr), key=lambda g, d=d: -iou[d, g]) for d in range(n_p)]
    owner = np.full(n_g, -1, dtype=np.int64)
    out = np.full(n_p, -1, dtype=np.int64)

    def augment(d, seen):
        for g in cand[d]:
            if owner[g] < 0:
                owner[g], out[d] = d, g
                return True
        for g in cand[d]:
            if g in seen:
                continue
            seen.add(g)
            if augment(owner[g], seen):
                owner[g], out[d] = d, g
                return True
        return False

    for d in range(n_p):
        augment(d, set())
    return out


def precision_recall_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated average precision."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    tp_sum = np.cumsum(tp)
    fp_sum = np.cumsum(1.0 - tp)
    if len(tp) == 0:
        return 0.0
    rc = tp_sum / n_gt
    pr = tp_sum / (tp_sum + fp_sum)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return float(q.mean())


def _group(tracks):
    groups = defaultdict(list)
    for tr in tracks:
        groups[(tr.video_id, tr.category)].append(tr)
    return groups


def video_ap(preds, gts, iou_thresholds=IOU_THRESHOLDS, max_dets=(1, 10)) -> EvalReport:
    preds, gts = list(preds), list(gts)
    if not gts:
        raise ValueError("video_ap needs ground-truth tracks")
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    pred_groups, gt_groups = _group(preds), _group(gts)
    categories = sorted({g.category for g in gts})

    # per category, per threshold: scores and tp flags pooled over videos
    pooled = {c: [([], []) for _ in thresholds] for c in categories}
    n_gt = defaultdict(int)
    recall_hits = {k: {c: np.zeros(len(thresholds)) for c in categories} for k in max_dets}

    # a prediction in a video without gt of its category is a false positive
    keys = sorted(set(gt_groups) | {k for k in pred_groups if k[1] in pooled})
    for vid, cat in keys:
        g_list = gt_groups.get((vid, cat), [])
        n_gt[cat] += len(g_list)
        p_list = pred_groups.get((vid, cat), [])
        order = np.argsort([-p.confidence for p in p_list], kind="mergesort")
        p_list = [p_list[i] for i in order]
        iou = st_iou_matrix(p_list, g_list)
        conf = np.array([p.confidence for p in p_list])
        for ti, thr in enumerate(thresholds):
            m = match_video(p_list, g_list, iou, thr)
            pooled[cat][ti][0].append(conf)
            pooled[cat][ti][1].append(m >= 0)
            for k in max_dets:
                mk = match_video(p_list[:k], g_list, iou[:k], thr)
                recall_hits[k][cat][ti] += np.count_nonzero(mk >= 0)

    per_class = {}
    ap_table = np.zeros((len(categories), len(thresholds)))
    for ci, cat in enumerate(categories):
        for ti in range(len(thresholds)):
            scores = np.concatenate(pooled[cat][ti][0]) if pooled[cat][ti][0] else np.zeros(0)
            tp = np.concatenate(pooled[cat][ti][1]) if pooled[cat][ti][1] else np.zeros(0, bool)
            ap_table[ci, ti] = precision_recall_ap(scores, tp, n_gt[cat])
        per_class[int(cat)] = float(ap_table[ci].mean())

    def at(thr):
        hit = np.flatnonzero(np.isclose(thresholds, thr))
        return float(ap_table[:, hit[0]].mean()) if len(hit) else float("nan")

    ar = {k: float(np.mean([recall_hits[k][c] / n_gt[c] for c in categories])) for k in max_dets}
    return EvalReport(
        AP=float(ap_table.mean()),
        AP50=at(0.5),
        AP75=at(0.75),
        AR1=ar.get(1, float("nan")),
        AR10=ar.get(10, float("nan")),
        per_class=per_class,
    )


# --------------------------------------------------------------------------
# CLEAR MOT
# --------------------------------------------------------------------------

@dataclass
class MotaResult:
    mota: float
    fn: int
    fp: int
    idsw: int
    n_gt: int
    # (video_id, frame, gt track id) -> pred track id
    matches: dict = field(default_factory=dict)


def _frame_iou(a: Mask, b: Mask) -> float:
    union = np.logical_or(a.bits, b.bits).sum()
    return float(np.logical_and(a.bits, b.bits).sum() / union) if union else 0.0


def _clear_video(preds, gts, gate: float):
    frames = sorted({t for tr in gts + preds for t in tr.frames})
    last = {}
    fn = fp = idsw = n_gt = 0
    matches = {}
    for t in frames:
        g_here = [g for g in gts if t in g.frames and not g.frames[t].is_empty()]
        p_here = [p for p in preds if t in p.frames and not p.frames[t].is_empty()]
        n_gt += len(g_here)
        iou = np.array([[_frame_iou(g.frames[t], p.frames[t]) for p in p_here] for g in g_here])
        iou = iou.reshape(len(g_here), len(p_here))
        p_index = {p.track_id: j for j, p in enumerate(p_here)}
        g_match = np.full(len(g_here), -1)
        p_used = np.zeros(len(p_here), dtype=bool)
        # keep last frame's correspondences that are still valid
        for i, g in enumerate(g_here):
            j = p_index.get(last.get(g.track_id))
            if j is not None and not p_used[j] and iou[i, j] >= gate:
                g_match[i] = j
                p_used[j] = True
        free_g = np.flatnonzero(g_match < 0)
        free_p = np.flatnonzero(~p_used)
        if len(free_g) and len(free_p):
            sub = iou[np.ix_(free_g, free_p)]
            rows, cols = linear_sum_assignment(np.where(sub >= gate, -sub, 1.0))
            for r, c in zip(rows, cols):
                if sub[r, c] >= gate:
                    g_match[free_g[r]] = free_p[c]
                    p_used[free_p[c]] = True
        for i, g in enumerate(g_here):
            if g_match[i] < 0:
                fn += 1
                continue
            pid = p_here[g_match[i]].track_id
            if g.track_id in last and last[g.track_id] != pid:
                idsw += 1
            last[g.track_id] = pid
            matches[(g.video_id, t, g.track_id)] = pid
        fp += int((~p_used).sum())
    return fn, fp, idsw, n_gt, matches


def mota(preds, gts, gate: float = 0.5) -> MotaResult:
    """``1 - (FN + FP + IDSW) / #gt`` with persistence-preferring per-frame matching."""
    preds, gts = list(preds), list(gts)
    videos = sorted({g.video_id for g in gts} | {p.video_id for p in preds})
    fn = fp = idsw = n_gt = 0
    matches = {}
    for v in videos:
        r = _clear_video([p for p in preds if p.video_id == v], [g for g in gts if g.video_id == v], gate)
        fn, fp, idsw, n_gt = fn + r[0], fp + r[1], idsw + r[2], n_gt + r[3]
        matches.update(r[4])
    if n_gt == 0:
        raise ValueError("MOTA undefined without ground-truth objects")
    return MotaResult(1.0 - (fn + fp + idsw) / n_gt, fn, fp, idsw, n_gt, matches)


def id_merges(result: MotaResult, gts) -> int:
    """Count gt objects entering after a video's first frame whose first matched
    prediction id had already been matched to a different gt object."""
    first_frame = defaultdict(lambda: np.inf)
    for g in gts:
        first_frame[g.video_id] = min(first_frame[g.video_id], min(g.frames))
    users = defaultdict(set)
    merges = 0
    seen_gt = set()
    for (vid, t, gid), pid in sorted(result.matches.items()):
        if (vid, gid) not in seen_gt:
            seen_gt.add((vid, gid))
            previous = users[(vid, pid)]
            if t > first_frame[vid] and previous and gid not in previous:
                merges += 1
        users[(vid, pid)].add(gid)
    return merges

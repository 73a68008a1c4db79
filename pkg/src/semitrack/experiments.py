"""Synthetic benchmark and the training/tracking ladders built on it.

A benchmark is three disjoint pools drawn from one world: labeled images
(no drift), unlabeled videos and test videos (both with appearance drift).
"""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .model import (EmbeddingHead, TrainConfig, init_head, sequence_cycle_loss,
                    test_time_adapt, train_joint, train_supervised)
from .synthgen import SceneSpec, generate_sequences, oracle_detections, to_image_dataset
from .tracker import TrackerConfig, track_sequence

LADDER = ("spatial", "ic", "ic_me", "ic_me_cyc")

# Fast objects (3.5-6 cells per frame) and two categories keep the spatial
# baseline imperfect; low appearance noise with a strong location texture makes
# raw features poor but learnable.
BENCHMARK_SCENE = SceneSpec(
    n_categories=2,
    velocity=(3.5, 6.0),
    appearance_noise=0.15,
    position_strength=1.5,
    category_strength=2.0,
)
# The center loss is a sum over cells while the contra term is a mean over
# rows; with few instances per image a small lam lets the center term shrink
# the embedding until the bias dominates every cosine.
BENCHMARK_TRAIN = TrainConfig(lam=30.0, mu=1.0, steps=400, ttt_learning_rate=0.03)


@dataclass(frozen=True)
class BenchmarkConfig:
    scene: SceneSpec = BENCHMARK_SCENE
    n_image_sequences: int = 12
    image_sequence_length: int = 8
    n_video_sequences: int = 12
    video_sequence_length: int = 32
    n_test_sequences: int = 20
    test_sequence_length: int = 24
    video_drift: float = 0.15
    embed_dim: int = 8
    hidden: int = 0
    video_head: bool = False
    init_scale: float = 1.0
    train: TrainConfig = BENCHMARK_TRAIN
    tracker: TrackerConfig = TrackerConfig(sim_scale=10.0)
    spatial_tracker: TrackerConfig = TrackerConfig(association="spatial", spatial_scale=14.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "scene" in d:
            d["scene"] = SceneSpec.from_dict(d["scene"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        for key in ("tracker", "spatial_tracker"):
            if key in d:
                d[key] = TrackerConfig(**d[key])
        return cls(**d)


@dataclass
class Benchmark:
    images: list
    videos: list
    tests: list


def make_benchmark(cfg: BenchmarkConfig, seed: int) -> Benchmark:
    base = dataclasses.replace(cfg.scene, seed=seed)
    images = generate_sequences(dataclasses.replace(base, seed=seed * 3 + 1, drift=0.0),
                                cfg.n_image_sequences, cfg.image_sequence_length)
    videos = generate_sequences(dataclasses.replace(base, seed=seed * 3 + 2, drift=cfg.video_drift),
                                cfg.n_video_sequences, cfg.video_sequence_length)
    tests = generate_sequences(dataclasses.replace(base, seed=seed * 3 + 3, drift=cfg.video_drift),
                               cfg.n_test_sequences, cfg.test_sequence_length)
    return Benchmark(to_image_dataset(images, seed), videos, tests)


# --------------------------------------------------------------------------
# ground truth / predictions as tracks
# --------------------------------------------------------------------------

def gt_tracks(seq, video_id: int = 0) -> list[metrics.GtTrack]:
    frames, cats = {}, {}
    for t, fr in enumerate(seq.frames):
        for tid, cat, mask in zip(fr.track_ids, fr.categories, fr.masks):
            frames.setdefault(tid, {})[t] = mask
            cats[tid] = cat
    return [metrics.GtTrack(tid, cats[tid], frames[tid], video_id) for tid in sorted(frames)]


def pred_tracks(detections, ids, video_id: int = 0) -> list[metrics.PredTrack]:
    frames, cats, scores = {}, {}, {}
    for t, (dets, tids) in enumerate(zip(detections, ids)):
        for det, tid in zip(dets, tids):
            frames.setdefault(tid, {})[t] = det.mask
            cats.setdefault(tid, []).append(det.category)
            scores.setdefault(tid, []).append(det.score)
    return [metrics.PredTrack(tid, Counter(cats[tid]).most_common(1)[0][0],
                              float(np.mean(scores[tid])), frames[tid], video_id)
            for tid in sorted(frames)]


@dataclass
class TrackingScore:
    mota: float
    idsw: int
    id_merges: int
    n_gt: int
    ap: float
    per_sequence_mota: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_tracking(sequences, detections_per_seq, tracker_cfg: TrackerConfig,
                      with_ap: bool = False) -> TrackingScore:
    all_preds, all_gts, per_seq = [], [], []
    for v, (seq, dets) in enumerate(zip(sequences, detections_per_seq)):
        result = track_sequence(dets, tracker_cfg)
        preds, gts = pred_tracks(dets, result.frames, v), gt_tracks(seq, v)
        per_seq.append(metrics.mota(preds, gts).mota)
        all_preds += preds
        all_gts += gts
    res = metrics.mota(all_preds, all_gts)
    ap = metrics.video_ap(all_preds, all_gts).AP if with_ap else float("nan")
    return TrackingScore(res.mota, res.idsw, metrics.id_merges(res, all_gts), res.n_gt, ap, per_seq)


# --------------------------------------------------------------------------
# ladders
# --------------------------------------------------------------------------

def _head(cfg: BenchmarkConfig, seed: int) -> EmbeddingHead:
    return init_head(cfg.scene.feature_dim, cfg.embed_dim, cfg.hidden, cfg.video_head,
                     seed=seed, scale=cfg.init_scale)


def train_ladder(cfg: BenchmarkConfig, bench: Benchmark, seed: int, variants=LADDER):
    """Train the heads needed for ``variants``; returns ({variant: head}, {variant: curve})."""
    heads, curves = {}, {}
    init = _head(cfg, seed)
    train = dataclasses.replace(cfg.train, seed=seed)
    if "ic" in variants:
        heads["ic"], curves["ic"] = train_supervised(init, bench.images, dataclasses.replace(train, mu=0.0))
    if "ic_me" in variants or "ic_me_cyc" in variants:
        heads["ic_me"], curves["ic_me"] = train_supervised(init, bench.images, train)
    if "ic_me_cyc" in variants:
        heads["ic_me_cyc"], cyc_curve = train_joint(heads["ic_me"], bench.images, bench.videos, train)
        curves["ic_me_cyc"] = curves["ic_me"] + [
            {**row, "step": row["step"] + len(curves["ic_me"])} for row in cyc_curve]
    return heads, curves


def score_ladder(cfg: BenchmarkConfig, bench: Benchmark, heads: dict, seed: int, variants=LADDER,
                 with_ap: bool = False) -> dict:
    scores = {}
    for name in variants:
        if name == "spatial":
            # the spatial tracker ignores embeddings; any head gives the same tracks
            dets = [oracle_detections(s, _head(cfg, seed)) for s in bench.tests]
            scores[name] = evaluate_tracking(bench.tests, dets, cfg.spatial_tracker, with_ap)
        else:
            dets = [oracle_detections(s, heads[name]) for s in bench.tests]
            scores[name] = evaluate_tracking(bench.tests, dets, cfg.tracker, with_ap)
    return scores


def run_ladder(cfg: BenchmarkConfig, seed: int, variants=LADDER, with_ap: bool = False) -> dict:
    bench = make_benchmark(cfg, seed)
    heads, _ = train_ladder(cfg, bench, seed, variants)
    return score_ladder(cfg, bench, heads, seed, variants, with_ap)


def run_ttt(cfg: BenchmarkConfig, seed: int, head: EmbeddingHead | None = None,
            bench: Benchmark | None = None) -> dict:
    """Track each test sequence with and without test-time adaptation."""
    bench = bench or make_benchmark(cfg, seed)
    train = dataclasses.replace(cfg.train, seed=seed)
    if head is None:
        heads, _ = train_ladder(cfg, bench, seed, ("ic_me_cyc",))
        head = heads["ic_me_cyc"]
    before, after, loss_before, loss_after = [], [], [], []
    for seq in bench.tests:
        adapted = test_time_adapt(head, seq, train)
        loss_before.append(sequence_cycle_loss(head, seq, train))
        loss_after.append(sequence_cycle_loss(adapted, seq, train))
        before.append(oracle_detections(seq, head))
        after.append(oracle_detections(seq, adapted))
    return {
        "cycle_before": loss_before,
        "cycle_after": loss_after,
        "no_ttt": evaluate_tracking(bench.tests, before, cfg.tracker),
        "ttt": evaluate_tracking(bench.tests, after, cfg.tracker),
    }


def run_sequence_length(cfg: BenchmarkConfig, seed: int, head: EmbeddingHead, bench: Benchmark,
                        ks=(1, 3), valid_cell_noise: float = 0.1) -> dict:
    """Correspondence training from ``head`` with ``k`` transitions per group and
    corrupted valid cells; returns ``{k: TrackingScore}``."""
    train = dataclasses.replace(cfg.train, seed=seed, valid_cell_noise=valid_cell_noise)
    out = {}
    for k in ks:
        adapted, _ = train_joint(head, bench.images, bench.videos, dataclasses.replace(train, k=k))
        dets = [oracle_detections(s, adapted) for s in bench.tests]
        out[k] = evaluate_tracking(bench.tests, dets, cfg.tracker)
    return out

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from semitrack.grid import BBox, Mask
from semitrack.tracker import (BankEntry, Detection, MemoryBank, Tracker, TrackerConfig, associate,
                               bi_softmax, fuse_scores, similarity, track_sequence, update_bank)

BOX = BBox(0, 0, 1, 1)
MASK = Mask(np.ones((1, 1), dtype=bool))


def det(emb, category=0, score=1.0, bbox=BOX):
    return Detection(category, score, bbox, MASK, np.asarray(emb, dtype=float))


def bank_of(*protos, ids=None, category=0, bbox=BOX):
    ids = ids or list(range(len(protos)))
    entries = [BankEntry(i, np.asarray(p, float) / np.linalg.norm(p), category, bbox, MASK, 0)
               for i, p in zip(ids, protos)]
    return MemoryBank(entries, max(ids) + 1)


def test_cosine_similarity_examples():
    assert similarity([det([2.0, 0.0])], bank_of([1.0, 0.0]))[0, 0] == pytest.approx(1.0)
    assert similarity([det([0.0, 3.0])], bank_of([1.0, 0.0]))[0, 0] == pytest.approx(0.0)
    assert similarity([det([1.0, 1.0])], bank_of([1.0, 0.0]))[0, 0] == pytest.approx(2 ** -0.5)
    with pytest.raises(ValueError):
        similarity([det([0.0, 0.0])], bank_of([1.0, 0.0]))


def test_bi_softmax_examples():
    for s in (-5.0, 0.0, 0.3, 40.0):
        assert bi_softmax([[s]])[0, 0] == 1.0
    b = bi_softmax(np.eye(2))
    assert np.allclose(b, b.T)
    assert b[0, 0] == pytest.approx(0.7311, abs=1e-4) and b[0, 1] == pytest.approx(0.2689, abs=1e-4)


def test_fusion_examples():
    d = [det([1.0, 0.0], category=0, score=0.9)]
    bank = bank_of([1.0, 0.0], bbox=BBox(0, 0, 1, 0.4))
    bi = np.array([[0.5]])
    assert np.array_equal(fuse_scores(bi, d, bank, TrackerConfig(alpha=0, beta=0, gamma=0)), bi)
    assert fuse_scores(bi, d, bank, TrackerConfig())[0, 0] == pytest.approx(0.5 + 0.9 + 0.4 + 1.0)
    two = MemoryBank(bank_of([1.0, 0.0]).entries + [BankEntry(1, np.array([1.0, 0.0]), 1, BOX, MASK, 0)], 2)
    fused = fuse_scores(np.array([[0.5, 0.5]]), d, two, TrackerConfig(gamma=10.0))
    assert fused[0, 1] < fused[0, 0] - 9.9


def test_cold_start_and_single_match():
    dets = [det([1, 0]), det([0, 1]), det([1, 1])]
    assert [d.track_id for d in associate(dets, MemoryBank(), TrackerConfig())] == [0, 1, 2]
    assert all(d.is_new for d in associate(dets, MemoryBank(), TrackerConfig()))
    decisions = associate([det([0.3, 0.7])], bank_of([1.0, 0.0], ids=[4]), TrackerConfig(threshold=0.5))
    assert decisions[0].track_id == 4 and not decisions[0].is_new


def test_conflict_goes_to_higher_score():
    bank = bank_of([1.0, 0.0], [0.0, 1.0], ids=[7, 8])
    strong, weak = det([1.0, 0.0]), det([1.0, 0.2])
    cfg = TrackerConfig(sim_scale=5.0, threshold=0.2)
    out = associate([weak, strong], bank, cfg)
    assert out[1].track_id == 7
    assert out[0].track_id != 7
    # the loser either takes the remaining entry or becomes a new track
    assert out[0].track_id == 8 or out[0].is_new


def test_momentum_examples():
    bank = bank_of([1.0, 0.0])
    new = [det([0.0, 1.0])]
    dec = associate(new, bank, TrackerConfig(threshold=0.01))
    keep = update_bank(bank, dec, new, TrackerConfig(momentum=1.0))
    assert np.allclose(keep.entries[0].prototype, [1.0, 0.0])
    mixed = update_bank(bank, dec, new, TrackerConfig(momentum=0.7))
    assert np.allclose(mixed.entries[0].prototype, np.array([0.7, 0.3]) / np.hypot(0.7, 0.3))
    assert np.allclose(mixed.entries[0].prototype, [0.9191, 0.3939], atol=1e-4)
    replaced = update_bank(bank, dec, new, TrackerConfig(momentum=0.0))
    assert np.allclose(replaced.entries[0].prototype, [0.0, 1.0])
    flipped = update_bank(bank, dec, new, TrackerConfig(momentum=0.7, momentum_weights_new=True))
    assert np.allclose(flipped.entries[0].prototype, np.array([0.3, 0.7]) / np.hypot(0.3, 0.7))
    assert np.allclose(bank.entries[0].prototype, [1.0, 0.0])  # input bank untouched


def test_sequences():
    a, b = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]
    assert track_sequence([[det(a), det(b)]]).frames == [[0, 1]]
    res = track_sequence([[det(a), det(b)], [det(b), det(a)]], TrackerConfig(sim_scale=10.0))
    assert res.frames == [[0, 1], [1, 0]] and res.n_tracks == 2
    gone = track_sequence([[det(a), det(b)], [det(b)], [det(a), det(b)]], TrackerConfig(sim_scale=10.0))
    assert gone.frames[2] == [0, 1]
    assert gone.births == [(0, 0), (0, 1)]
    with pytest.raises(ValueError):
        track_sequence([])


def test_max_age_expires_entries():
    a = [1.0, 0.0]
    res = track_sequence([[det(a)], [], [], [det(a)]], TrackerConfig(max_age=1))
    assert res.frames[3] == [1]


def test_hungarian_and_spatial_modes():
    a, b = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]
    res = track_sequence([[det(a), det(b)], [det(b), det(a)]], TrackerConfig(assignment="hungarian", sim_scale=10.0))
    assert res.frames[1] == [1, 0]
    left, right = BBox(0, 0, 2, 2), BBox(6, 6, 8, 8)
    frames = [[det(a, bbox=left), det(a, bbox=right)], [det(b, bbox=BBox(6, 5, 8, 7)), det(b, bbox=BBox(0, 1, 2, 3))]]
    spatial = track_sequence(frames, TrackerConfig(association="spatial", threshold=0.1))
    assert spatial.frames[1] == [1, 0]


def test_config_validation():
    for bad in (dict(threshold=0.0), dict(threshold=1.0), dict(momentum=1.5), dict(assignment="x"),
                dict(association="x"), dict(sim_scale=0.0)):
        with pytest.raises(ValueError):
            TrackerConfig(**bad)


CONFIGS = [TrackerConfig(), TrackerConfig(use_postprocess=True), TrackerConfig(assignment="hungarian"),
           TrackerConfig(use_bi_softmax=False, sim_scale=4.0), TrackerConfig(association="spatial")]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(range(len(CONFIGS))))
def test_tracker_invariants_on_random_sequences(seed, which):
    cfg = CONFIGS[which]
    rng = np.random.default_rng(seed)
    frames = [oracles.random_detections(rng) for _ in range(int(rng.integers(1, 10)))]
    full = track_sequence(frames, cfg)
    seen = set()
    expected_next = 0
    for ids, dets in zip(full.frames, frames):
        assert len(ids) == len(set(ids)) == len(dets)
        for i in ids:
            if i not in seen:
                assert i == expected_next  # fresh ids are consecutive in detection order
                expected_next += 1
                seen.add(i)
    cut = int(rng.integers(1, len(frames) + 1))
    assert track_sequence(frames[:cut], cfg).frames == full.frames[:cut]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_prototypes_stay_unit_norm(seed):
    rng = np.random.default_rng(seed)
    session = Tracker(TrackerConfig(momentum=float(rng.uniform())))
    for _ in range(8):
        session.step(oracles.random_detections(rng))
        for e in session.bank.entries:
            assert abs(np.linalg.norm(e.prototype) - 1.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bi_softmax_bounds_and_fusion_monotone(seed):
    rng = np.random.default_rng(seed)
    sim = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5)))) * 3
    b = bi_softmax(sim)
    assert np.all((b > 0) & (b <= 1))
    dets = [det(rng.normal(size=2), category=int(rng.integers(2)), score=float(rng.uniform()),
                bbox=BBox(0, 0, 1 + rng.uniform(), 1)) for _ in range(sim.shape[0])]
    bank = MemoryBank([BankEntry(j, np.array([1.0, 0.0]), int(rng.integers(2)), BBox(0, 0, 1 + rng.uniform(), 1),
                                 MASK, 0) for j in range(sim.shape[1])], sim.shape[1])
    cfg = TrackerConfig(alpha=rng.uniform(), beta=rng.uniform(), gamma=rng.uniform())
    base = fuse_scores(b, dets, bank, cfg)
    assert np.all(fuse_scores(b + 0.1, dets, bank, cfg) >= base)
    higher = [Detection(d.category, min(1.0, d.score + 0.1), d.bbox, d.mask, d.embedding) for d in dets]
    assert np.all(fuse_scores(b, higher, bank, cfg) >= base)
    same = [BankEntry(e.track_id, e.prototype, dets[0].category, e.bbox, e.mask, 0) for e in bank.entries]
    assert np.all(fuse_scores(b[:1], dets[:1], MemoryBank(same, len(same)), cfg) >= base[:1])
    # identical boxes maximize IoU
    overlap = [BankEntry(e.track_id, e.prototype, e.category, dets[0].bbox, e.mask, 0) for e in bank.entries]
    assert np.all(fuse_scores(b[:1], dets[:1], MemoryBank(overlap, len(overlap)), cfg) >= base[:1])

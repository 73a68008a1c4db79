import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from semitrack import metrics
from semitrack.grid import DegenerateInstanceError, Mask, mask_iou
from semitrack.metrics import GtTrack, PredTrack


def box(x0, y0, x1, y1, n=6):
    bits = np.zeros((n, n), dtype=bool)
    bits[y0:y1, x0:x1] = True
    return Mask(bits)


def to_tracks(gts, preds, video_id=0):
    g = [GtTrack(x["id"], x["category"], {t: Mask(m) for t, m in x["frames"].items()}, video_id) for x in gts]
    p = [PredTrack(x["id"], x["category"], x["confidence"], {t: Mask(m) for t, m in x["frames"].items()}, video_id)
         for x in preds]
    return g, p


# --------------------------------------------------------------------------
# spatio-temporal IoU
# --------------------------------------------------------------------------

def test_st_iou_examples():
    a = GtTrack(0, 0, {0: box(0, 0, 2, 2), 1: box(0, 0, 2, 2)})
    b = GtTrack(1, 0, {0: box(1, 0, 3, 2), 1: box(1, 0, 3, 2)})
    later = GtTrack(2, 0, {5: box(0, 0, 2, 2)})
    assert metrics.st_iou(a, a) == 1.0
    assert metrics.st_iou(a, later) == 0.0
    assert metrics.st_iou(a, b) == pytest.approx(1 / 3)
    empty = Mask(np.zeros((6, 6), dtype=bool))
    with pytest.raises(DegenerateInstanceError):
        metrics.st_iou(PredTrack(0, 0, 1.0, {0: empty}), PredTrack(1, 0, 1.0, {0: empty}))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_st_iou_properties(seed):
    rng = np.random.default_rng(seed)
    gts, _ = oracles.random_video_case(rng)
    g, _ = to_tracks(gts, [])
    a, b = g[0], g[-1]
    v = metrics.st_iou(a, b)
    assert v == metrics.st_iou(b, a) and 0.0 <= v <= 1.0
    assert v == pytest.approx(oracles.st_iou(gts[0]["frames"], gts[-1]["frames"]))
    assert np.allclose(metrics.st_iou_matrix(g, g), [[oracles.st_iou(x["frames"], y["frames"]) for y in gts]
                                                    for x in gts])
    t = next(iter(a.frames))
    single = GtTrack(0, 0, {t: a.frames[t]})
    other = b.frames.get(t)
    if other is not None and not other.is_empty():
        assert metrics.st_iou(single, GtTrack(1, 0, {t: other})) == pytest.approx(mask_iou(a.frames[t], other))


# --------------------------------------------------------------------------
# video AP
# --------------------------------------------------------------------------

def test_video_ap_examples():
    gts = [GtTrack(0, 0, {0: box(0, 0, 2, 2), 1: box(1, 1, 3, 3)}, video_id=0),
           GtTrack(0, 1, {0: box(3, 3, 5, 5)}, video_id=1)]
    perfect = [PredTrack(7, g.category, 0.9, dict(g.frames), g.video_id) for g in gts]
    rep = metrics.video_ap(perfect, gts)
    assert rep.AP == 1.0 and rep.AR1 == 1.0 and rep.AR10 == 1.0 and rep.AP50 == 1.0 and rep.AP75 == 1.0
    assert metrics.video_ap([], gts).AP == 0.0
    one = [GtTrack(0, 0, {0: box(0, 0, 2, 2)})]
    preds = [PredTrack(0, 0, 0.9, {0: box(0, 0, 2, 2)}), PredTrack(1, 0, 0.2, {0: box(4, 4, 6, 6)})]
    rep = metrics.video_ap(preds, one)
    assert rep.AP == 1.0 and rep.AP50 == 1.0 and rep.AP75 == 1.0
    with pytest.raises(ValueError):
        metrics.video_ap(preds, [])


def test_prediction_in_video_without_its_category_is_a_false_positive():
    gts = [GtTrack(0, 0, {0: box(0, 0, 2, 2)}, video_id=0)]
    hit = PredTrack(0, 0, 0.5, {0: box(0, 0, 2, 2)}, video_id=0)
    stray = PredTrack(1, 0, 0.9, {0: box(0, 0, 2, 2)}, video_id=1)
    assert metrics.video_ap([hit], gts).AP == 1.0
    # the stray outranks the hit: precision at full recall is 1/2
    assert metrics.video_ap([hit, stray], gts).AP == pytest.approx(0.5)


def test_matching_handles_double_half_overlap():
    # pred 0 covers two gts at IoU exactly 0.5 each; pred 1 covers gt 0 only.
    # Greedy would give gt 0 to pred 0 and leave pred 1 unmatched.
    iou = np.array([[0.5, 0.5], [1.0, 0.0]])
    assert metrics.match_video([0, 1], [0, 1], iou, 0.5).tolist() == [1, 0]
    assert oracles.best_matching(iou, 0.5) == [1, 1]


def test_matching_agrees_with_exhaustive_search():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(300):
        gts, preds = oracles.random_video_case(rng)
        g, p = to_tracks(gts, preds)
        p = sorted(p, key=lambda x: -x.confidence)
        iou = metrics.st_iou_matrix(p, g)
        for thr in metrics.IOU_THRESHOLDS:
            got = (metrics.match_video(p, g, iou, thr) >= 0).astype(int).tolist()
            assert got == oracles.best_matching(iou, thr)
        checked += 1
    assert checked == 300


def test_video_ap_agrees_with_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        gts, preds = oracles.random_video_case(rng)
        g, p = to_tracks(gts, preds)
        rep = metrics.video_ap(p, g)
        ap, ar = oracles.video_ap(gts, preds, metrics.IOU_THRESHOLDS)
        assert rep.AP == pytest.approx(ap, abs=1e-12)
        assert rep.AR1 == pytest.approx(ar[1], abs=1e-12)
        assert rep.AR10 == pytest.approx(ar[10], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_video_ap_ignores_input_order_and_relabeling(seed):
    rng = np.random.default_rng(seed)
    gts, preds = oracles.random_video_case(rng)
    g, p = to_tracks(gts, preds)
    base = metrics.video_ap(p, g)
    order = rng.permutation(len(p))
    ids = rng.permutation(len(p)) + 50
    shuffled = [PredTrack(int(ids[i]), p[i].category, p[i].confidence, p[i].frames) for i in order]
    again = metrics.video_ap(shuffled, g)
    assert again.AP == base.AP and again.AR1 == base.AR1 and again.AR10 == base.AR10
    assert 0.0 <= base.AP <= 1.0


# --------------------------------------------------------------------------
# MOTA
# --------------------------------------------------------------------------

A, B, SPURIOUS = box(0, 0, 2, 2), box(3, 3, 5, 5), box(0, 4, 2, 6)


def test_mota_perfect():
    gts = [GtTrack(0, 0, {t: A for t in range(4)}), GtTrack(1, 0, {t: B for t in range(4)})]
    preds = [PredTrack(5, 0, 1.0, dict(g.frames)) for g in gts[:1]] + [PredTrack(6, 0, 1.0, dict(gts[1].frames))]
    res = metrics.mota(preds, gts)
    assert res.mota == 1.0 and res.idsw == 0


def test_mota_one_miss_one_false_positive():
    gts = [GtTrack(0, 0, {t: A for t in range(5)}), GtTrack(1, 0, {t: B for t in range(5)})]
    preds = [PredTrack(0, 0, 1.0, {t: A for t in range(5)}),
             PredTrack(1, 0, 1.0, {t: B for t in range(5) if t != 4}),
             PredTrack(2, 0, 1.0, {2: SPURIOUS})]
    res = metrics.mota(preds, gts)
    assert (res.n_gt, res.fn, res.fp, res.idsw) == (10, 1, 1, 0)
    assert res.mota == pytest.approx(0.8)


def test_mota_identity_swap_counts_two_switches():
    gts = [GtTrack(0, 0, {t: A for t in range(6)}), GtTrack(1, 0, {t: B for t in range(6)})]
    preds = [PredTrack(0, 0, 1.0, {t: (A if t < 3 else B) for t in range(6)}),
             PredTrack(1, 0, 1.0, {t: (B if t < 3 else A) for t in range(6)})]
    res = metrics.mota(preds, gts)
    assert res.idsw == 2 and res.fn == 0 and res.fp == 0
    assert res.mota == pytest.approx(1 - 2 / 12)


def test_mota_prefers_persisting_matches():
    # gt 0 is matched to pred 0; pred 1 later overlaps gt 0 better but pred 0
    # still passes the gate, so no switch is counted
    big = box(0, 0, 4, 4)
    near = box(0, 0, 4, 3)
    gts = [GtTrack(0, 0, {0: big, 1: big})]
    preds = [PredTrack(0, 0, 1.0, {0: big, 1: near}), PredTrack(1, 0, 1.0, {1: big})]
    res = metrics.mota(preds, gts)
    assert res.idsw == 0 and res.fp == 1


def test_mota_requires_ground_truth():
    with pytest.raises(ValueError):
        metrics.mota([PredTrack(0, 0, 1.0, {0: A})], [])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mota_bounded_and_relabeling_invariant(seed):
    rng = np.random.default_rng(seed)
    gts, preds = oracles.random_video_case(rng, max_frames=4)
    g, p = to_tracks(gts, preds)
    base = metrics.mota(p, g)
    assert base.mota <= 1.0
    ids = rng.permutation(len(p)) + 50
    relabeled = [PredTrack(int(i), x.category, x.confidence, x.frames) for i, x in zip(ids, p)]
    assert metrics.mota(relabeled, g).mota == base.mota


def test_id_merges_counts_reused_prediction_ids():
    c = box(2, 2, 4, 4)
    gts = [GtTrack(0, 0, {0: A, 1: A}), GtTrack(1, 0, {0: B, 1: B, 2: B, 3: B}), GtTrack(2, 0, {2: c, 3: c})]
    # pred 0 follows gt 0, then jumps to the newcomer gt 2
    preds = [PredTrack(0, 0, 1.0, {0: A, 1: A, 2: c, 3: c}), PredTrack(1, 0, 1.0, {t: B for t in range(4)})]
    res = metrics.mota(preds, gts)
    assert metrics.id_merges(res, gts) == 1
    fresh = [PredTrack(0, 0, 1.0, {0: A, 1: A}), PredTrack(1, 0, 1.0, {t: B for t in range(4)}),
             PredTrack(2, 0, 1.0, {2: c, 3: c})]
    assert metrics.id_merges(metrics.mota(fresh, gts), gts) == 0

import itertools

import numpy as np
import pytest

from oracles import ball, linear_quantile
from seedgrow.core import Volume
from seedgrow.detect import SeedPoint, VoxelCoord
from seedgrow.evaluate import (
    case_response, cohort_stats, cube_law_change, froc_from_posteriors, match_detections,
    response_report, volume_change,
)


def _seed(*c):
    return SeedPoint(VoxelCoord(*c), 1.0, 1, 0.9)


def _gt():
    lab = np.zeros((10, 10, 10), np.uint8)
    lab[2:5, 2:5, 2:5] = 1
    lab[6:9, 6:9, 6:9] = 2
    return Volume(lab)


def test_match_one_hit():
    m = match_detections([_seed(3, 3, 3)], _gt())
    assert m.hits == {1} and m.false_positives == []


def test_match_dedup_and_false_positive():
    seeds = [_seed(2, 2, 2), _seed(3, 3, 3), _seed(4, 4, 4), _seed(0, 9, 0)]
    m = match_detections(seeds, _gt())
    assert m.hits == {1} and len(m.false_positives) == 1


def test_match_order_invariant():
    seeds = [_seed(2, 2, 2), _seed(7, 7, 7), _seed(0, 9, 0), _seed(9, 0, 9)]
    ref = match_detections(seeds, _gt())
    for perm in itertools.permutations(seeds):
        m = match_detections(list(perm), _gt())
        assert m.hits == ref.hits and len(m.false_positives) == len(ref.false_positives)


def test_match_distance_criterion_and_geometry():
    m = match_detections([_seed(5, 3, 3)], _gt(), max_distance_mm=1.0)
    assert m.hits == {1}
    assert match_detections([_seed(5, 3, 3)], _gt()).hits == set()
    with pytest.raises(ValueError):
        match_detections([_seed(10, 0, 0)], _gt())


def test_cohort_level_arithmetic():
    # 20 single-tumor cases: 19 hit, 18 seeds outside tumors in total
    gt = Volume(np.pad(np.ones((2, 2, 2), np.uint8), 2))
    hits = fps = 0
    for i in range(20):
        seeds = [] if i == 0 else [_seed(2, 2, 2)]
        if i < 18:
            seeds.append(_seed(0, 0, 0))
        m = match_detections(seeds, gt)
        hits += len(m.hits)
        fps += len(m.false_positives)
    assert hits / 20 == 0.95 and fps / 20 == 0.9


def _synthetic_cohort():
    shape = (24, 24, 24)
    gts, posts = [], []
    r = np.random.default_rng(0)
    for i in range(4):
        t = ball(shape, (8, 8 + i, 8), 4)
        fp = ball(shape, (18, 18, 18 - i), 2)
        gts.append(Volume(t.astype(np.uint8)))
        members = []
        for k in range(3):
            p = np.where(t, r.uniform(0.7, 1.0), 0.0) + np.where(fp, r.uniform(0.5, 0.95), 0.0)
            members.append(Volume(p.astype(np.float32)))
        posts.append(members)
    return posts, gts


def test_froc_monotone_and_endpoints():
    posts, gts = _synthetic_cohort()
    taus = [0.05, 0.3, 0.6, 0.75, 0.9, 0.999]
    curve = froc_from_posteriors(posts, gts, taus)
    assert [p.tau for p in curve.points] == sorted(taus, reverse=True)
    sens = [p.sensitivity for p in curve.points]
    fps = [p.fp_per_case for p in curve.points]
    assert sens == sorted(sens) and fps == sorted(fps)
    assert curve.points[0].sensitivity == 0 and curve.points[0].fp_per_case == 0
    assert curve.points[-1].sensitivity == 1.0
    again = froc_from_posteriors(posts, gts, taus)
    assert again.to_csv() == curve.to_csv()
    lines = curve.to_csv().splitlines()
    assert lines[0] == "tau,sensitivity,fp_per_case" and len(lines) == len(taus) + 1


def test_volume_change_examples():
    assert volume_change(100, 30) == pytest.approx(-70.0)
    assert volume_change(50, 50) == 0.0
    assert volume_change(100, 130) == pytest.approx(30.0)
    assert volume_change(3.3, 1.1) == pytest.approx(volume_change(3.3 * 7, 1.1 * 7))
    with pytest.raises(ValueError):
        volume_change(0.0, 10.0)


def test_cohort_stats_examples():
    s = cohort_stats([-70])
    assert (s.median, s.q1, s.q3) == (-70, -70, -70)
    s = cohort_stats([-50, -70, -77, -80])
    assert s.median == pytest.approx(-73.5)
    assert s.q1 == pytest.approx(-77.75)
    assert s.q3 == pytest.approx(-65.0)
    with pytest.raises(ValueError):
        cohort_stats([])


def test_cohort_stats_matches_oracle_and_permutation(rng):
    for n in (2, 3, 7, 10):
        x = list(rng.normal(-60, 20, n))
        s = cohort_stats(x)
        assert s.q1 == pytest.approx(linear_quantile(x, 0.25))
        assert s.median == pytest.approx(linear_quantile(x, 0.5))
        assert s.q3 == pytest.approx(linear_quantile(x, 0.75))
        rng.shuffle(x)
        assert cohort_stats(x) == s


def test_cube_law():
    assert cube_law_change(0.6694) == pytest.approx(-70.0, abs=0.01)
    assert cube_law_change(1.0) == 0.0


def _lesion_maps(r_pre, r_during, shape=(40, 40, 40)):
    maps = []
    for r in (r_pre, r_during):
        t = ball(shape, (20, 20, 20), r)
        maps.append(Volume(np.where(t, 1.2, 0.05).astype(np.float32)))
    return maps


def test_case_response_pairs_and_carry_forward():
    pre_w, dur_w = _lesion_maps(8, 5)
    mask = Volume(np.ones(pre_w.shape, np.uint8))
    gt = Volume(ball(pre_w.shape, (20, 20, 20), 8).astype(np.uint8))
    r = case_response([_seed(20, 20, 20), _seed(21, 20, 20)], [_seed(20, 20, 20)],
                      pre_w, mask, dur_w, mask, gt_tumor=gt, reference_change=cube_law_change(5 / 8))
    assert len(r.pairs) == 1                 # both seeds grow to one lesion
    assert not r.pairs[0].carried_forward
    assert r.percent_change == pytest.approx(r.reference_change, abs=10)
    # no during-treatment seed: the pre-treatment seed is carried forward
    r2 = case_response([_seed(20, 20, 20)], [], pre_w, mask, dur_w, mask)
    assert r2.pairs[0].carried_forward
    assert r2.percent_change == pytest.approx(r.percent_change)


def test_report_excludes_failed_cases():
    pre_w, dur_w = _lesion_maps(8, 5)
    mask = Volume(np.ones(pre_w.shape, np.uint8))
    zero = pre_w.like(np.zeros(pre_w.shape, np.float32))
    ok = case_response([_seed(20, 20, 20)], [], pre_w, mask, dur_w, mask, case_id="a")
    bad = case_response([_seed(20, 20, 20)], [], zero, mask, dur_w, mask, case_id="b")
    assert bad.percent_change is None and bad.warnings
    rep = response_report([ok, bad])
    assert rep.stats.n == 1 and any("b" in w for w in rep.warnings)
    d = rep.to_dict()
    assert d["cohort"]["median"] == pytest.approx(ok.percent_change)


def test_leaked_region_does_not_capture_the_lesion():
    # a flat enhancing slab surrounds the lesion; a seed placed in it floods
    # the whole slab, which contains the lesion at both time points
    shape = (40, 40, 40)
    maps = []
    for r in (8, 5):
        w = np.full(shape, 0.05, np.float32)
        w[:, :, :30] = 0.3
        w[ball(shape, (20, 20, 20), r)] = 1.2
        maps.append(Volume(w))
    pre_w, dur_w = maps
    mask = Volume(np.ones(shape, np.uint8))
    lesion = SeedPoint(VoxelCoord(20, 20, 20), 5.0, 1, 0.99)
    leak = SeedPoint(VoxelCoord(20, 20, 3), 1.35, 2, 0.6)
    expected = volume_change(int(ball(shape, (20, 20, 20), 8).sum()), int(ball(shape, (20, 20, 20), 5).sum()))
    gt = Volume(ball(shape, (20, 20, 20), 8).astype(np.uint8))
    for kw in ({}, {"gt_tumor": gt}):
        r = case_response([lesion, leak], [leak, lesion], pre_w, mask, dur_w, mask, **kw)
        assert r.percent_change == pytest.approx(expected, abs=1.0), kw
        assert r.pairs[r.primary].pre.seed == lesion

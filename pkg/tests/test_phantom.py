import numpy as np
import pytest

from seedgrow.core import DceCase
from seedgrow.phantom import (
    PhantomConfig, PhantomError, generate_case, load_case, sample_anatomy, save_case, simulate_nac,
)
from seedgrow.preprocess import washin, washout

SMALL = dict(shape=(48, 64, 64))


def test_noiseless_washin_identity():
    cfg = PhantomConfig(noise_sigma=0.0, bias_amplitude=0.0, **SMALL)
    case = generate_case(cfg, 0)
    t = case.anatomy.tumors[0]
    w = washin(case.pre, case.post[0], mask=case.breast_mask).data
    inside = case.gt_tumor.data == 1
    assert inside.any()
    assert np.abs(w[inside] - t.washin).max() < 1e-5
    wo = washout(case.post[0], case.post[-1], mask=case.breast_mask).data
    assert np.abs(wo[inside] - t.washout).max() < 1e-5


def test_kinetic_identity_holds_with_bias_when_noiseless():
    cfg = PhantomConfig(noise_sigma=0.0, **SMALL)
    case = generate_case(cfg, 1)
    t = case.anatomy.tumors[0]
    inside = case.gt_tumor.data == 1
    ratio = case.post[0].data[inside].astype(np.float64) / case.pre.data[inside]
    np.testing.assert_allclose(ratio, 1 + t.washin, rtol=1e-5)


def test_deterministic():
    cfg = PhantomConfig(**SMALL)
    a, b = generate_case(cfg, 3), generate_case(cfg, 3)
    assert a.pre == b.pre and all(x == y for x, y in zip(a.post, b.post))
    assert a.gt_tumor == b.gt_tumor
    c = generate_case(cfg, 4)
    assert not a.pre == c.pre


def test_sampled_parameters_in_ranges():
    cfg = PhantomConfig(**SMALL)
    for i in range(5):
        an = sample_anatomy(cfg, i)
        assert len(an.tumors) == 1
        for t in an.tumors:
            assert 0.8 <= t.washin <= 1.6 and -0.5 <= t.washout <= -0.2
        for v in an.vessels:
            assert 0.8 <= v.washin <= 1.6 and -0.3 <= v.washout <= 0.3
            assert 1 <= v.radius_vox <= 2
        for b in an.benign:
            assert 0.3 <= b.washin <= 0.7 and 0.0 <= b.washout <= 0.3
            assert b.radius_vox <= 3


def test_sphere_volume_matches_analytic():
    cfg = PhantomConfig(tumor_radius_mm_range=(10.0, 10.0), tumor_aspect_range=(1.0, 1.0),
                        noise_sigma=0.0)
    case = generate_case(cfg, 0)
    analytic = case.gt_tumor_volumes[1]
    assert analytic == pytest.approx(4 / 3 * np.pi * 1000, rel=1e-9)
    voxel_vol = np.count_nonzero(case.gt_tumor.data) * 1.35 ** 3
    assert abs(voxel_vol - analytic) / analytic < 0.05


def test_ground_truth_inside_breast_and_disjoint():
    cfg = PhantomConfig(vessel_count_range=(3, 3), benign_count_range=(3, 3), **SMALL)
    for i in range(4):
        case = generate_case(cfg, i)
        breast = case.breast_mask.data > 0
        tumor = case.gt_tumor.data > 0
        vessel = case.gt_vessel.data > 0
        benign = case.gt_benign.data > 0
        assert not (tumor & ~breast).any()
        assert not (vessel & ~breast).any()
        assert not (benign & ~breast).any()
        assert not (tumor & vessel).any()
        assert not (tumor & benign).any()


@pytest.mark.parametrize("shrink,ratio", [(1.0, 1.0), (0.30 ** (1 / 3), 0.30), (0.5, 0.125)])
def test_simulate_nac_volume_cube_law(shrink, ratio):
    cfg = PhantomConfig(**SMALL)
    case = generate_case(cfg, 2)
    nac = simulate_nac(case, shrink)
    assert nac.gt_tumor_volumes[1] / case.gt_tumor_volumes[1] == pytest.approx(ratio, rel=1e-12)
    assert nac.case_id == case.case_id + "_nac"
    if shrink < 1:
        assert np.count_nonzero(nac.gt_tumor.data) < np.count_nonzero(case.gt_tumor.data)
    # fresh noise, same anatomy
    assert not nac.pre == case.pre
    assert nac.breast_mask == case.breast_mask


def test_nac_median_response_anchor():
    shrink = 0.6694
    assert 100 * (shrink ** 3 - 1) == pytest.approx(-70.0, abs=0.01)


def test_simulate_nac_rejects_bad_factor():
    case = generate_case(PhantomConfig(**SMALL), 0)
    with pytest.raises(ValueError):
        simulate_nac(case, 0.0)
    with pytest.raises(ValueError):
        simulate_nac(case, 1.2)


def test_unplaceable_tumor_raises():
    cfg = PhantomConfig(shape=(32, 32, 32), tumor_radius_mm_range=(60.0, 60.0))
    with pytest.raises(PhantomError):
        generate_case(cfg, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(shape=(16, 64, 64))
    with pytest.raises(ValueError):
        PhantomConfig(tumor_radius_mm_range=(10, 5))
    with pytest.raises(ValueError):
        PhantomConfig.from_dict({"bogus": 1})
    cfg = PhantomConfig(**SMALL)
    assert PhantomConfig.from_dict(cfg.to_dict()) == cfg


def test_save_and_load_round_trip(tmp_path):
    case = generate_case(PhantomConfig(**SMALL), 0)
    path = save_case(case, tmp_path / "c")
    back = load_case(path)
    assert isinstance(back, DceCase)
    assert back.pre == case.pre and back.gt_tumor == case.gt_tumor
    assert back.gt_tumor_volumes == case.gt_tumor_volumes
    # the stored anatomy reproduces the treated case exactly
    a = simulate_nac(case, 0.7)
    b = simulate_nac(back, 0.7)
    assert a.pre == b.pre and a.gt_tumor == b.gt_tumor

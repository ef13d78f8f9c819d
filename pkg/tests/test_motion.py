import numpy as np
import pytest

from mrirestore.imgcore import PhantomSpec, make_phantom, make_subject
from mrirestore.kspace import DimensionError
from mrirestore.motion import (
    Move,
    MotionDatasetConfig,
    MotionPlan,
    PlanError,
    Segment,
    build_mar_dataset,
    gen_motion_set,
    read_plans,
    replaced_row_count,
    rotate_image,
    sample_plan,
    shift_image,
    splice_kspace,
    splice_spectrum,
)
from mrirestore.degrade import read_manifest
from mrirestore.objectives import ssim_index


@pytest.fixture(scope="module")
def phantom():
    return make_phantom(PhantomSpec(11, 64))


def disk(n=64, radius=18):
    r, c = np.indices((n, n))
    d = np.hypot(r - (n - 1) / 2, c - (n - 1) / 2)
    return np.clip(radius + 0.5 - d, 0, 1)


def test_shift(phantom):
    np.testing.assert_array_equal(shift_image(phantom, 0, 0), phantom)
    out = shift_image(phantom, 3, 0)
    np.testing.assert_array_equal(out[:, 3:], phantom[:, :-3])
    assert not out[:, :3].any()
    out = shift_image(phantom, -2, 5)
    np.testing.assert_array_equal(out[5:, :-2], phantom[:-5, 2:])
    assert (out ** 2).sum() <= (phantom ** 2).sum()
    with pytest.raises(DimensionError):
        shift_image(phantom, 64, 0)


def test_rotate_identity(phantom):
    np.testing.assert_array_equal(rotate_image(phantom, 0.0), phantom)


def test_rotate_quarter_turn_matches_rot90():
    x = np.random.default_rng(0).random((9, 9))
    out = rotate_image(x, 90.0)
    # same turn direction as degrade.rotate90
    np.testing.assert_allclose(out, np.rot90(x, -1), atol=1e-12)


@pytest.mark.parametrize("angle", [1.0, 3.3, 5.0, 37.0])
def test_rotate_disk_invariant(angle):
    d = disk()
    assert np.abs(rotate_image(d, angle) - d).mean() <= 0.01


def test_rotate_back_and_forth(phantom):
    back = rotate_image(rotate_image(phantom, 5.0), -5.0)
    inner = (slice(8, -8), slice(8, -8))
    assert np.abs(back[inner] - phantom[inner]).mean() <= 0.02


def test_splice_empty_plan(phantom):
    plan = MotionPlan(64, (Move(3, 0, 0),), ())
    np.testing.assert_array_equal(splice_kspace(phantom, plan), phantom)


def test_splice_full_substitution(phantom):
    mv = Move(4, -2, 2.0)
    plan = MotionPlan(64, (mv,), (Segment(0, 64, 0),))
    np.testing.assert_allclose(splice_kspace(phantom, plan, clamp=False), mv.apply(phantom), atol=1e-6)


def test_splice_only_touches_planned_rows(phantom):
    plan = MotionPlan(64, (Move(5, 0, 0), Move(0, 0, 4.0)), (Segment(10, 6, 0), Segment(40, 3, 1)))
    spliced = splice_spectrum(phantom, plan)
    orig = np.fft.fft2(phantom, norm="ortho")
    planned = set(range(10, 16)) | set(range(40, 43))
    for row in range(64):
        if row in planned:
            assert not np.array_equal(spliced[row], orig[row])
        else:
            np.testing.assert_array_equal(spliced[row], orig[row])


def test_splice_rejects_overlap(phantom):
    plan = MotionPlan(64, (Move(1, 0, 0),), (Segment(10, 6, 0), Segment(15, 2, 0)))
    with pytest.raises(PlanError):
        splice_kspace(phantom, plan)
    with pytest.raises(PlanError):
        splice_kspace(phantom, MotionPlan(64, (), (Segment(1, 2, 0),)))


def test_ssim_decreases_with_severity():
    corpus = [make_phantom(PhantomSpec(100 + i, 64)) for i in range(20)]
    means = []
    for sev in (0.05, 0.1, 0.2, 0.4):
        n = replaced_row_count(64, sev)
        plan = MotionPlan(64, (Move(4, 0, 0),), (Segment(4, n, 0),))
        vals = [ssim_index(splice_kspace(img, plan), img) for img in corpus]
        assert max(vals) < 1
        means.append(np.mean(vals))
    assert all(a > b for a, b in zip(means, means[1:]))


def test_gen_motion_set_deterministic(phantom):
    a = gen_motion_set(phantom, 5, seed=3)
    b = gen_motion_set(phantom, 5, seed=3)
    assert len(a) == 5
    for (ia, pa), (ib, pb) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        assert pa == pb
    keys = {tuple((s.row_start, s.row_len) for s in p.segments) for _, p in a}
    assert len(keys) == 5


def test_gen_motion_set_properties(phantom):
    for img, plan in gen_motion_set(phantom, 8, seed=9):
        plan.validate()
        assert 1 <= len(plan.moves) <= 4 and 1 <= len(plan.segments) <= 6
        for m in plan.moves:
            assert abs(m.dx) <= 8 and abs(m.dy) <= 8 and 0 <= m.angle <= 5
        for s in plan.segments:
            # the 8 lowest-frequency rows (0..3 and 60..63) stay untouched
            assert s.row_start >= 4 and s.row_start + s.row_len <= 60
        assert 0 < plan.severity < 1
        assert np.isfinite(img).all() and img.min() >= 0 and img.max() <= 1


def test_fixed_severity_row_count():
    rng = np.random.default_rng(0)
    plan = sample_plan(rng, 256, (0.3, 0.3), protect_center=8)
    assert plan.replaced_rows == 76
    assert replaced_row_count(256, 0.3) == 76


def test_infeasible_severity():
    with pytest.raises(PlanError):
        sample_plan(np.random.default_rng(0), 16, (0.01, 0.02))
    with pytest.raises(PlanError):
        sample_plan(np.random.default_rng(0), 16, (0.6, 0.9), protect_center=8)


def test_protect_center_zero_allows_all_rows():
    seen = set()
    for s in range(200):
        plan = sample_plan(np.random.default_rng(s), 32, (0.5, 0.9), protect_center=0)
        for seg in plan.segments:
            seen.update(range(seg.row_start, seg.row_start + seg.row_len))
    assert {0, 31} <= seen


def test_plan_json_roundtrip(phantom):
    _, plan = gen_motion_set(phantom, 1, seed=1)[0]
    assert MotionPlan.from_json(plan.to_json()) == plan


def test_build_mar_dataset(tmp_path):
    vols = {f"s{i}": make_subject(0, i, n_slices=2, size=32) for i in range(3)}
    recs = build_mar_dataset(vols, tmp_path, MotionDatasetConfig(variants=2, split=(1, 1, 1), seed=4))
    assert len(recs) == 3 * 2 * 2
    back = read_manifest(tmp_path / "manifest.tsv")
    assert [r.pair_id for r in back] == [r.pair_id for r in recs]
    plans = read_plans(tmp_path / "plans.jsonl")
    assert set(plans) == {r.pair_id for r in recs}

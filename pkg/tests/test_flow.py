import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corrpose.exceptions import InsufficientSupportError
from corrpose.flow import (
    FlowField, flow_probability, fuse_confidence, rgbd_correspondences, rgbd_pose, robust_kabsch,
)
from corrpose.geometry import Pose, pose_error
from corrpose.mocks import make_scene, mock_refiner
from corrpose.robust import RansacConfig


def _field(rng, shape=(6, 7)):
    return FlowField(
        mu=rng.normal(size=shape + (2,)),
        b=rng.uniform(0.1, 3.0, shape),
        certainty=rng.random(shape),
        sensitivity=rng.random(shape),
    )


def test_flow_probability_examples():
    assert flow_probability(2.0, 0.0) == 0.0
    assert flow_probability(1.0 / np.log(2.0), 1.0) == pytest.approx(0.5, abs=1e-15)
    assert flow_probability(1e9, 1.0) < 1e-8
    with pytest.raises(ValueError):
        flow_probability(0.0, 1.0)
    with pytest.raises(ValueError):
        flow_probability(1.0, -1.0)


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1.01, 10))
def test_flow_probability_monotone(b, r, factor):
    p = flow_probability(b, r)
    # 1 - exp(-x) rounds to exactly 1.0 once x > ~37
    assert 0.0 <= p <= 1.0
    if p < 1.0 - 1e-12:
        assert flow_probability(b, r * factor) > p
        assert flow_probability(b * factor, r) < p


def test_fuse_confidence_examples(rng):
    f = _field(rng)
    f.certainty[2, 3] = 0.0
    w = fuse_confidence(f)
    assert w[2, 3] == 0.0
    brute = np.empty_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            brute[i, j] = f.certainty[i, j] * f.sensitivity[i, j] * (1 - np.exp(-1.0 / f.b[i, j]))
    np.testing.assert_allclose(w, brute, rtol=1e-12)
    assert np.all(w <= f.certainty) and np.all(w <= f.sensitivity)
    assert np.all(w <= flow_probability(f.b))

    ones = np.ones((2, 2))
    half = FlowField(np.zeros((2, 2, 2)), ones / np.log(2.0), ones, ones)
    np.testing.assert_allclose(fuse_confidence(half), 0.5)


def test_flow_field_validation(rng):
    with pytest.raises(ValueError):
        FlowField(np.zeros((2, 2, 2)), np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        FlowField(np.zeros((2, 2, 2)), np.ones((2, 2)), 2 * np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        FlowField(np.zeros((2, 3, 2)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)))


def test_flow_field_save_load(tmp_path, rng):
    f = _field(rng)
    f.save(tmp_path / "flow")
    assert (tmp_path / "flow.bin").stat().st_size == 5 * 4 * 6 * 7
    g = FlowField.load(tmp_path / "flow")
    np.testing.assert_array_equal(g.mu, f.mu.astype(np.float32))
    np.testing.assert_array_equal(g.b, f.b.astype(np.float32))
    np.testing.assert_array_equal(g.sensitivity, f.sensitivity.astype(np.float32))


@pytest.fixture(scope="module")
def rgbd_case(bracket):
    scene = make_scene(bracket, scene_id=3, seed=11)
    init = scene.pose_gt.retract([0.05, -0.04, 0.03, 0.004, -0.003, 0.01])
    field, render = mock_refiner(scene, init)
    return scene, init, field, render


def test_rgbd_exact(rgbd_case):
    scene, init, field, render = rgbd_case
    pose = rgbd_pose(field, scene.depth, render.depth, scene.k, init)
    rot, trans = pose_error(pose, scene.pose_gt)
    assert rot < 1e-6 and trans < 1e-6


def test_rgbd_correspondences_are_exact(rgbd_case):
    scene, init, field, render = rgbd_case
    model, camera, rows, cols = rgbd_correspondences(field, scene.depth, render.depth, scene.k, init)
    assert model.shape[0] > 100
    np.testing.assert_allclose(scene.pose_gt.apply(model), camera, atol=1e-9)


def test_rgbd_robust_to_outliers(rgbd_case):
    scene, init, field, render = rgbd_case
    rng = np.random.default_rng(0)
    rows, cols = np.nonzero(render.mask)
    bad = rng.random(rows.size) < 0.3
    angle = rng.uniform(0, 2 * np.pi, bad.sum())
    mu = field.mu.copy()
    mu[rows[bad], cols[bad]] += 50.0 * np.c_[np.cos(angle), np.sin(angle)]
    noisy = FlowField(mu, field.b, field.certainty, field.sensitivity)
    pose = rgbd_pose(noisy, scene.depth, render.depth, scene.k, init,
                     RansacConfig(threshold=0.005, scoring="msac", seed=0))
    assert np.degrees(pose_error(pose, scene.pose_gt)[0]) < 0.5


def test_rgbd_low_certainty(rgbd_case):
    scene, init, field, render = rgbd_case
    low = FlowField(field.mu, field.b, np.full(field.shape, 0.49), field.sensitivity)
    with pytest.raises(InsufficientSupportError):
        rgbd_pose(low, scene.depth, render.depth, scene.k, init)


def test_robust_kabsch_permutation_invariant(rng):
    gt = Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3))
    src = rng.normal(size=(80, 3)) * 0.05
    dst = gt.apply(src)
    dst[:20] += rng.normal(size=(20, 3)) * 0.1
    cfg = RansacConfig(threshold=0.005, scoring="msac", seed=5)
    pose_a, mask_a = robust_kabsch(src, dst, cfg)
    perm = rng.permutation(80)
    pose_b, mask_b = robust_kabsch(src[perm], dst[perm], cfg)
    assert pose_a.allclose(pose_b, atol=1e-12)
    np.testing.assert_array_equal(mask_a[perm], mask_b)
    assert not mask_a[:20].any() and mask_a[20:].all()

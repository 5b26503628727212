import numpy as np
import pytest
from scipy.stats import binom

from corrpose.correspondence import decode_matches, no_match_class, similarity_score
from corrpose.exceptions import OutOfViewError
from corrpose.flow import fuse_confidence
from corrpose.geometry import Pose, pose_error
from corrpose.metrics import mssd
from corrpose.mocks import (
    NoiseModel, make_scene, mock_coarse, mock_refiner, mock_selector, perturb_pose,
)
from corrpose.pnp import RefineProblem, refine_pose
from corrpose.templates import build_templates


@pytest.fixture(scope="module")
def setup(bracket):
    templates = build_templates(bracket)
    scene = make_scene(bracket, scene_id=2, seed=5)
    return scene, templates


def _closest_template(scene, templates):
    angles = [pose_error(t.pose, scene.pose_gt)[0] for t in templates]
    return templates[int(np.argmin(angles))]


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(class_flip_prob=1.5)
    with pytest.raises(ValueError):
        NoiseModel(offset_sigma=-0.1)
    assert NoiseModel().noiseless and not NoiseModel(flow_sigma_b=1.0).noiseless


def test_noiseless_coarse_reproduces_gt(setup):
    scene, templates = setup
    t = _closest_template(scene, templates)
    c, u, gt, flipped = mock_coarse(scene, t, full_output=True)
    m = decode_matches(c, u)
    np.testing.assert_allclose(m.query, gt.matches.query, atol=1e-9)
    np.testing.assert_allclose(m.target, gt.matches.target, atol=1e-9)
    assert not flipped.any()
    np.testing.assert_allclose(c.sum(axis=2), 1.0)


def test_full_occlusion(setup):
    scene, templates = setup
    c, u = mock_coarse(scene, _closest_template(scene, templates), NoiseModel(occlusion_frac=1.0))
    assert np.all(np.argmax(c, axis=2) == no_match_class(14))
    assert similarity_score(c) == 0.0


def test_partial_occlusion_is_contiguous(setup):
    scene, templates = setup
    t = _closest_template(scene, templates)
    _, _, gt, _ = mock_coarse(scene, t, full_output=True)
    c, _ = mock_coarse(scene, t, NoiseModel(occlusion_frac=0.4, seed=3))
    nomatch = np.argmax(c, axis=2) == no_match_class(14)
    hidden = nomatch & gt.on_object & (gt.classes != no_match_class(14))
    assert hidden.sum() >= 1


@pytest.mark.parametrize("seed", range(3))
def test_flip_count_binomial(setup, seed):
    scene, templates = setup
    t = _closest_template(scene, templates)
    c, _, gt, flipped = mock_coarse(scene, t, NoiseModel(class_flip_prob=0.3, seed=seed),
                                    full_output=True)
    n = int(gt.on_object.sum())
    lo, hi = binom.ppf(0.005, n, 0.3), binom.ppf(0.995, n, 0.3)
    assert lo <= flipped.sum() <= hi
    cls = np.argmax(c, axis=2)
    assert np.all(cls[flipped] != gt.classes[flipped])
    assert np.all(cls[flipped] < no_match_class(14))


def test_offset_noise_is_clipped(setup):
    scene, templates = setup
    _, u = mock_coarse(scene, _closest_template(scene, templates), NoiseModel(offset_sigma=0.4))
    assert np.abs(u).max() <= 0.5


def test_mocks_are_deterministic(setup):
    scene, templates = setup
    nm = NoiseModel(class_flip_prob=0.2, offset_sigma=0.1, occlusion_frac=0.2, flow_sigma_b=1.0, seed=4)
    t = templates[3]
    a, b = mock_coarse(scene, t, nm), mock_coarse(scene, t, nm)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    init = perturb_pose(scene.pose_gt, np.random.default_rng(0), (0.005, 0.005, 0.01), 5.0)
    f1, _ = mock_refiner(scene, init, nm)
    f2, _ = mock_refiner(scene, init, nm)
    np.testing.assert_array_equal(f1.mu, f2.mu)


def test_noiseless_refiner_recovers_pose(setup):
    scene, _ = setup
    init = perturb_pose(scene.pose_gt, np.random.default_rng(1), (0.005, 0.005, 0.02), 5.0)
    field, render = mock_refiner(scene, init)
    assert np.all(field.b == 1e-3)
    pose = refine_pose(RefineProblem(init, field.mu, fuse_confidence(field), render.depth, scene.k))
    rot, trans = pose_error(pose, scene.pose_gt)
    assert rot < 1e-6 and trans < 1e-6


def test_refiner_laplace_moment(setup):
    scene, _ = setup
    clean, render = mock_refiner(scene, scene.pose_gt)
    mask = render.mask
    noise = []
    for r in range(60):
        field, _ = mock_refiner(scene, scene.pose_gt, NoiseModel(flow_sigma_b=2.0, seed=9), round_index=r)
        noise.append((field.mu - clean.mu)[mask])
        if sum(n.shape[0] for n in noise) >= 10_000:
            break
    noise = np.concatenate(noise)
    assert noise.shape[0] >= 10_000
    np.testing.assert_allclose(np.abs(noise).mean(axis=0), 2.0, rtol=0.05)
    assert np.all(field.b[mask] == 2.0)


def test_occluded_pixels_get_zero_certainty(bracket):
    # a pose from behind shows surfaces the query cannot see
    scene = make_scene(bracket, scene_id=0, seed=1)
    turn = Pose.from_rotvec([0, np.pi / 2, 0], [0, 0, 0]).rotation
    init = Pose(scene.pose_gt.rotation @ turn, scene.pose_gt.translation)
    field, render = mock_refiner(scene, init)
    hidden = render.mask & (field.certainty == 0)
    assert hidden.any()
    assert np.all(fuse_confidence(field)[hidden] == 0)


def test_refiner_out_of_view(setup):
    scene, _ = setup
    with pytest.raises(OutOfViewError):
        mock_refiner(scene, Pose(scene.pose_gt.rotation, [5.0, 0, 0.5]))


def test_selector_prefers_truth(bracket, setup):
    scene, _ = setup
    flip = scene.pose_gt @ Pose.from_rotvec([0, np.pi, 0], [0, 0, 0])
    assert mock_selector([(scene.pose_gt, scene), (flip, scene)]) == 0
    assert mock_selector([(flip, scene), (scene.pose_gt, scene)]) == 1
    assert mock_selector([(flip, scene)]) == 0
    with pytest.raises(ValueError):
        mock_selector([])


def test_selector_agrees_with_min_mssd(bracket):
    # hypotheses follow the refiner-input perturbation recipe
    pts = bracket.sample_points(1000)
    agree = 0
    for trial in range(100):
        scene = make_scene(bracket, trial, seed=7)
        rng = np.random.default_rng(trial)
        hyps = [perturb_pose(scene.pose_gt, rng) for _ in range(5)]
        chosen = mock_selector([(h, scene) for h in hyps])
        best = int(np.argmin([mssd(h, scene.pose_gt, bracket, pts) for h in hyps]))
        agree += chosen == best
    assert agree >= 90, f"selector matched the min-MSSD hypothesis in {agree}/100 trials"

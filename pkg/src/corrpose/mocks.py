"""Synthetic scenes and oracle stand-ins for the learned predictors.

Every mock turns ground truth into the tensors a trained network would
emit, optionally corrupted by a :class:`NoiseModel`. Randomness is drawn
from generators seeded by ``(nm.seed, scene_id, ...)`` so outputs are pure
functions of their inputs.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .correspondence import PATCH_SIZE, gt_correspondences, no_match_class
from .exceptions import OutOfViewError
from .flow import FlowField
from .geometry import MIN_DEPTH, Intrinsics, Pose, backproject_depths, pixel_centers
from .templates import rasterize, surface_depth
from .validation import check_nonnegative, check_probability

SCENE_SIZE = 224
LABEL_SMOOTHING = 0.01
NOISELESS_B = 1e-3
VISIBILITY_TOL = 1e-3
# refiner-input perturbation recipe
POSE_SIGMA_T = (0.01, 0.01, 0.05)
POSE_SIGMA_ROT_DEG = 15.0


@dataclass(frozen=True)
class NoiseModel:
    """Corruption applied by the mocks.

    Attributes:
        class_flip_prob: chance an on-object cell's argmax moves to a wrong
            template class.
        offset_sigma: Gaussian offset noise, in patches.
        flow_sigma_b: Laplace scale of flow noise, in pixels.
        occlusion_frac: fraction of on-object cells hidden by an occluder.
        seed: base seed.
    """

    class_flip_prob: float = 0.0
    offset_sigma: float = 0.0
    flow_sigma_b: float = 0.0
    occlusion_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        check_probability(self.class_flip_prob, "class_flip_prob")
        check_probability(self.occlusion_frac, "occlusion_frac")
        check_nonnegative(self.offset_sigma, "offset_sigma")
        check_nonnegative(self.flow_sigma_b, "flow_sigma_b")

    @property
    def noiseless(self):
        return (self.class_flip_prob == 0 and self.offset_sigma == 0
                and self.flow_sigma_b == 0 and self.occlusion_frac == 0)

    def rng(self, *keys):
        return np.random.default_rng([int(self.seed)] + [int(k) for k in keys])


@dataclass(eq=False)
class Scene:
    """A query view of one object with known pose.

    ``render`` is the query depth rendering; ``depth`` is the scene depth
    used for visibility tests (the same map, as scenes hold one object).
    """

    mesh: object
    pose_gt: Pose
    k: Intrinsics
    render: object
    scene_id: int = 0

    @property
    def size(self):
        return self.render.size

    @property
    def depth(self):
        return self.render.depth


def scene_intrinsics(size=SCENE_SIZE):
    f = 320.0 * size / SCENE_SIZE
    return Intrinsics(f, f, size / 2.0, size / 2.0)


def sample_pose(rng, z_range=(0.45, 0.6), xy_sigma=0.01):
    """Uniform rotation, near-axis translation."""
    rot = Rotation.random(random_state=rng).as_matrix()
    t = np.array([
        np.clip(rng.normal(0.0, xy_sigma), -2 * xy_sigma, 2 * xy_sigma),
        np.clip(rng.normal(0.0, xy_sigma), -2 * xy_sigma, 2 * xy_sigma),
        rng.uniform(*z_range),
    ])
    return Pose(rot, t)


def make_scene(mesh, scene_id=0, seed=0, size=SCENE_SIZE, pose=None):
    """Render a query of ``mesh`` under a seeded random pose."""
    rng = np.random.default_rng([int(seed), int(scene_id)])
    pose = pose if pose is not None else sample_pose(rng)
    k = scene_intrinsics(size)
    render = rasterize(mesh, pose, k, size)
    if not render.mask.any():
        raise OutOfViewError(f"scene {scene_id}: object not visible")
    return Scene(mesh=mesh, pose_gt=pose, k=k, render=render, scene_id=scene_id)


def perturb_pose(pose, rng, sigma_t=POSE_SIGMA_T, sigma_rot_deg=POSE_SIGMA_ROT_DEG):
    """Gaussian pose noise: per-axis translation sigmas (m), per-Euler-axis degrees."""
    angles = rng.normal(0.0, sigma_rot_deg, size=3)
    dr = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    dt = rng.normal(0.0, 1.0, size=3) * np.asarray(sigma_t, dtype=np.float64)
    return Pose(dr @ pose.rotation, pose.translation + dt)


def _grow_occlusion(on_object, count, rng):
    """Seeded BFS over 4-connected on-object cells until ``count`` are taken."""
    taken = np.zeros_like(on_object)
    remaining = set(zip(*np.nonzero(on_object)))
    while count > 0 and remaining:
        cells = sorted(remaining)
        start = cells[rng.integers(len(cells))]
        queue = deque([start])
        remaining.discard(start)
        while queue and count > 0:
            i, j = queue.popleft()
            taken[i, j] = True
            count -= 1
            nbrs = [(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)]
            for n in (nbrs[p] for p in rng.permutation(4)):
                if n in remaining:
                    remaining.discard(n)
                    queue.append(n)
    return taken


def mock_coarse(scene, template, nm=None, patch=PATCH_SIZE, full_output=False):
    """Class and offset tensors a coarse network would predict.

    Ground-truth classes come from :func:`gt_correspondences`. With
    probability ``class_flip_prob`` an on-object cell is moved to a random
    wrong template class; offsets get clamped Gaussian noise; a contiguous
    region covering ``occlusion_frac`` of the on-object cells becomes
    no-match. Tensors are label-smoothed with eps = 0.01.

    Returns:
        ``(c, u)``, plus the :class:`GroundTruthMatches` and the flipped-cell
        mask when ``full_output`` is set.
    """
    nm = nm or NoiseModel()
    gt = gt_correspondences(scene.mesh, scene.render, template, patch)
    g = gt.classes.shape[0]
    n_cls = g * g + 1
    nomatch = no_match_class(g)
    tid = template.viewpoint.index if template.viewpoint is not None else 0
    rng = nm.rng(scene.scene_id, tid)

    classes = gt.classes.copy()
    offsets = gt.offsets.copy()
    on = gt.on_object

    flipped = np.zeros_like(on)
    if nm.class_flip_prob > 0:
        flipped = on & (rng.random(on.shape) < nm.class_flip_prob)
        for i, j in zip(*np.nonzero(flipped)):
            # uniform over the template classes other than the true one
            wrong = rng.integers(nomatch - (classes[i, j] != nomatch))
            if classes[i, j] != nomatch and wrong >= classes[i, j]:
                wrong += 1
            classes[i, j] = wrong
    if nm.offset_sigma > 0:
        offsets = np.clip(offsets + rng.normal(0.0, nm.offset_sigma, offsets.shape), -0.5, 0.5)
    if nm.occlusion_frac > 0:
        count = int(round(nm.occlusion_frac * on.sum()))
        occluded = _grow_occlusion(on, count, rng)
        classes[occluded] = nomatch
        flipped &= ~occluded
    offsets[classes == nomatch] = 0.0

    c = np.full((g, g, n_cls), LABEL_SMOOTHING / n_cls)
    np.put_along_axis(c, classes[..., None], 1.0 - LABEL_SMOOTHING + LABEL_SMOOTHING / n_cls, axis=2)
    if full_output:
        return c, offsets, gt, flipped
    return c, offsets


def exact_flow(scene, render):
    """Flow taking rendered pixels to the query projection of the same point.

    Returns:
        ``(flow, targets_valid, visible)``: ``(H, W, 2)`` flow, whether each
        rendered point lands in front of the query camera, and whether it is
        visible there (within 1 mm of the query surface).
    """
    h, w = render.depth.shape
    rows, cols = np.nonzero(render.depth > 0)
    centres = pixel_centers(rows, cols)
    pts = backproject_depths(render.pose, render.intrinsics, centres, render.depth[rows, cols])
    cam = scene.pose_gt.apply(pts)
    front = cam[:, 2] > MIN_DEPTH
    z = np.where(front, cam[:, 2], 1.0)
    k = scene.k
    target = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)
    flow = np.zeros((h, w, 2))
    flow[rows, cols] = np.where(front[:, None], target - centres, 0.0)

    hq, wq = scene.render.depth.shape
    inframe = front & (target[:, 0] >= 0) & (target[:, 0] < wq) & (target[:, 1] >= 0) & (target[:, 1] < hq)
    visible = np.zeros(rows.size, dtype=bool)
    idx = np.flatnonzero(inframe)
    if idx.size:
        dq = surface_depth(scene.render, scene.mesh, target[idx])
        visible[idx] = (dq > 0) & (np.abs(dq - cam[idx, 2]) <= VISIBILITY_TOL)
    valid = np.zeros((h, w), dtype=bool)
    valid[rows, cols] = front
    vis = np.zeros((h, w), dtype=bool)
    vis[rows, cols] = visible
    return flow, valid, vis


def mock_refiner(scene, pose_init, nm=None, round_index=0):
    """Flow field a refiner would predict between a render and the query.

    The mean is the exact flow plus Laplace(0, flow_sigma_b) noise; the scale
    is ``flow_sigma_b`` (1e-3 when noiseless); certainty is GT visibility;
    sensitivity is 1 on the rendered mask.

    Returns:
        ``(FlowField, Template)``, the template being the render at
        ``pose_init``.

    Raises:
        OutOfViewError: when the object is not visible under ``pose_init``.
    """
    nm = nm or NoiseModel()
    render = rasterize(scene.mesh, pose_init, scene.k, scene.render.size, scene.render.shape[0])
    if not render.mask.any():
        raise OutOfViewError("object not visible under the initial pose")
    flow, valid, visible = exact_flow(scene, render)
    mask = render.mask
    b_val = nm.flow_sigma_b if nm.flow_sigma_b > 0 else NOISELESS_B
    if nm.flow_sigma_b > 0:
        rng = nm.rng(scene.scene_id, 1000 + round_index)
        flow = flow + np.where(mask[..., None], rng.laplace(0.0, nm.flow_sigma_b, flow.shape), 0.0)
    field = FlowField(
        mu=flow,
        b=np.full(mask.shape, b_val),
        certainty=(visible & valid).astype(np.float64),
        sensitivity=mask.astype(np.float64),
    )
    return field, render


def depth_discrepancy(depth_a, depth_b):
    """Mean absolute depth difference over the union of the two masks."""
    union = (depth_a > 0) | (depth_b > 0)
    if not union.any():
        return np.inf
    return float(np.mean(np.abs(depth_a[union] - depth_b[union])))


def mock_selector(hypotheses):
    """Pick the hypothesis whose render best agrees with the query depth.

    Args:
        hypotheses: non-empty list of ``(Pose, Scene)``.

    Returns:
        Index of the highest score (negative mean absolute depth difference
        on the union of masks); ties go to the lowest index.
    """
    if len(hypotheses) == 0:
        raise ValueError("mock_selector needs at least one hypothesis")
    scores = selector_scores(hypotheses)
    return int(np.argmax(scores))


def selector_scores(hypotheses):
    scores = []
    for pose, scene in hypotheses:
        d = rasterize(scene.mesh, pose, scene.k, scene.render.size, scene.render.shape[0]).depth
        scores.append(-depth_discrepancy(d, scene.depth))
    return np.array(scores)

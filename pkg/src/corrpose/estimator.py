"""Estimator front-end: templates in ``fit``, poses out of ``predict``."""

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .correspondence import (
    PATCH_SIZE, decode_matches, matches_to_2d3d, similarity_score, top_templates,
)
from .exceptions import CorrPoseError, NoConsensusError
from .flow import fuse_confidence, rgbd_pose
from .mocks import NoiseModel, mock_coarse, mock_refiner, selector_scores
from .pnp import RefineProblem, ransac_pnp, refine_pose
from .robust import RansacConfig
from .templates import TEMPLATE_SIZE, build_templates

MODALITIES = ("rgb", "rgbd")


def derive_seed(*keys):
    """Stable 32-bit seed from integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class CorrespondencePoseEstimator(BaseEstimator):
    """Coarse-to-fine pose estimation driven by oracle predictors.

    ``fit`` renders the 42 templates of a mesh; ``predict`` runs, per scene,
    template scoring, correspondence decoding, RANSAC-PnP on the top
    ``n_hypotheses`` templates, render-and-compare refinement and, for more
    than one hypothesis, selection by rendered-depth agreement.

    Args:
        n_hypotheses: templates refined per scene.
        refine_rounds: render-and-compare rounds per hypothesis.
        modality: ``"rgb"`` (dense reprojection refinement) or ``"rgbd"``
            (flow + depth, robust Kabsch).
        noise: :class:`~corrpose.mocks.NoiseModel` of the mocks.
        ransac_threshold: PnP inlier threshold in pixels.
        ransac_iters: PnP hypothesis budget.
        radius: flow-probability radius in pixels.
        seed: base seed for RANSAC sampling.
        template_size: template side length in pixels.
        patch_size: patch size in pixels.
        n_jobs: threads used to render templates.
    """

    def __init__(self, n_hypotheses=1, refine_rounds=1, modality="rgb", noise=None,
                 ransac_threshold=2.0, ransac_iters=256, radius=1.0, seed=0,
                 template_size=TEMPLATE_SIZE, patch_size=PATCH_SIZE, n_jobs=1):
        self.n_hypotheses = n_hypotheses
        self.refine_rounds = refine_rounds
        self.modality = modality
        self.noise = noise
        self.ransac_threshold = ransac_threshold
        self.ransac_iters = ransac_iters
        self.radius = radius
        self.seed = seed
        self.template_size = template_size
        self.patch_size = patch_size
        self.n_jobs = n_jobs

    def _check_params(self):
        if int(self.n_hypotheses) < 1:
            raise ValueError(f"n_hypotheses must be >= 1, got {self.n_hypotheses}")
        if int(self.refine_rounds) < 0:
            raise ValueError(f"refine_rounds must be >= 0, got {self.refine_rounds}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.template_size % self.patch_size:
            raise ValueError("template_size must be a multiple of patch_size")

    def fit(self, mesh, templates=None):
        """Render (or adopt) the template set of ``mesh``.

        Args:
            mesh: :class:`~corrpose.meshes.Mesh`.
            templates: optional prebuilt :class:`~corrpose.templates.TemplateSet`.
        """
        self._check_params()
        self.mesh_ = mesh
        self.templates_ = (templates if templates is not None
                           else build_templates(mesh, self.template_size, n_jobs=self.n_jobs))
        self.n_templates_ = len(self.templates_)
        return self

    @property
    def noise_model_(self):
        return self.noise if self.noise is not None else NoiseModel()

    def _coarse(self, scene, trace):
        nm = self.noise_model_
        outputs = [mock_coarse(scene, t, nm, self.patch_size) for t in self.templates_]
        scores = [similarity_score(c) for c, _ in outputs]
        top = top_templates(scores, int(self.n_hypotheses))
        trace["scores"] = scores
        trace["top_templates"] = top
        trace["selected_template"] = top[0]
        return outputs, top

    def _coarse_pose(self, scene, outputs, tid, rank, hyp):
        c, u = outputs[tid]
        matches = decode_matches(c, u, self.patch_size)
        pts3d, pts2d, _ = matches_to_2d3d(matches, self.templates_[tid])
        hyp["n_matches"] = int(pts3d.shape[0])
        if pts3d.shape[0] < 4:
            raise NoConsensusError(f"template {tid}: {pts3d.shape[0]} matches, need 4")
        cfg = RansacConfig(
            max_iters=int(self.ransac_iters), threshold=float(self.ransac_threshold),
            seed=derive_seed(self.seed, scene.scene_id, rank),
        )
        pose, inliers = ransac_pnp(pts3d, pts2d, scene.k, cfg)
        hyp["n_inliers"] = int(inliers.sum())
        return pose

    def _refine(self, scene, pose, hyp):
        nm = self.noise_model_
        for r in range(int(self.refine_rounds)):
            flow, render = mock_refiner(scene, pose, nm, round_index=r)
            if self.modality == "rgbd":
                pose = rgbd_pose(flow, scene.depth, render.depth, scene.k, pose)
                continue
            problem = RefineProblem(pose, flow.mu, fuse_confidence(flow, self.radius),
                                    render.depth, scene.k)
            pose, info = refine_pose(problem, full_output=True)
            hyp["refinements"].append(info)
        return pose

    def estimate(self, scene):
        """Pose of one scene plus a trace of the pipeline.

        Raises:
            CorrPoseError: when no hypothesis survives.
        """
        check_is_fitted(self, "templates_")
        self._check_params()
        trace = {"scene_id": scene.scene_id, "hypotheses": [], "timing": {}}
        t0 = time.perf_counter()
        outputs, top = self._coarse(scene, trace)
        t1 = time.perf_counter()
        poses = []
        for rank, tid in enumerate(top):
            hyp = {"template": int(tid), "refinements": [], "error": None}
            trace["hypotheses"].append(hyp)
            try:
                pose = self._coarse_pose(scene, outputs, tid, rank, hyp)
                hyp["coarse_pose"] = pose
                pose = self._refine(scene, pose, hyp)
                hyp["pose"] = pose
                poses.append((len(trace["hypotheses"]) - 1, pose))
            except CorrPoseError as exc:
                hyp["error"] = f"{type(exc).__name__}: {exc}"
        t2 = time.perf_counter()
        if not poses:
            raise NoConsensusError(f"scene {scene.scene_id}: every hypothesis failed")
        if len(poses) > 1:
            scores = selector_scores([(p, scene) for _, p in poses])
            best = int(np.argmax(scores))
            trace["selector_scores"] = scores.tolist()
        else:
            best = 0
        trace["selected"] = poses[best][0]
        trace["timing"] = {"coarse": t1 - t0, "refine": t2 - t1, "select": time.perf_counter() - t2}
        return poses[best][1], trace

    def predict(self, scenes):
        """Poses for a list of scenes; ``None`` where the pipeline failed."""
        return self.predict_with_trace(scenes)[0]

    def predict_with_trace(self, scenes):
        poses, traces = [], []
        for scene in scenes:
            try:
                pose, trace = self.estimate(scene)
            except CorrPoseError as exc:
                pose = None
                trace = {"scene_id": scene.scene_id, "failure": f"{type(exc).__name__}: {exc}"}
            poses.append(pose)
            traces.append(trace)
        return poses, traces


def trace_to_json(trace):
    """JSON-ready copy of an :meth:`CorrespondencePoseEstimator.estimate` trace."""
    out = {k: v for k, v in trace.items() if k != "hypotheses"}
    hyps = []
    for h in trace.get("hypotheses", []):
        item = {k: v for k, v in h.items() if k not in ("refinements", "coarse_pose", "pose")}
        for key in ("coarse_pose", "pose"):
            if key in h:
                item[key] = h[key].to_dict()
        item["refinements"] = [
            {
                "initial_objective": float(info.initial_objective),
                "lm_objectives": [float(v) for v in info.lm_objectives],
                "lm_steps": [[float(a), float(b), bool(ok), float(lam)]
                             for a, b, ok, lam in info.lm_steps],
                "gn_objectives": [float(v) for v in info.gn_objectives],
                "final_objective": float(info.final_objective),
                "n_pixels": int(info.n_pixels),
            }
            for info in h["refinements"]
        ]
        hyps.append(item)
    if "hypotheses" in trace:
        out["hypotheses"] = hyps
    return out


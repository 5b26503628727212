"""Hypothesise-and-verify robust fitting with pluggable estimators."""

from dataclasses import dataclass

import numpy as np

from .exceptions import CorrPoseError, NoConsensusError


@dataclass(frozen=True)
class RansacConfig:
    """Settings for :func:`ransac`.

    Attributes:
        max_iters: hypothesis budget.
        threshold: inlier residual threshold (units of the residual function).
        seed: RNG seed; runs are deterministic given the seed.
        confidence: early-exit confidence for the adaptive iteration bound.
        scoring: ``"ransac"`` counts inliers, ``"msac"`` sums truncated
            squared residuals.
        refit_rounds: inlier re-fit passes after the best hypothesis.
    """

    max_iters: int = 256
    threshold: float = 2.0
    seed: int = 0
    confidence: float = 0.999
    scoring: str = "ransac"
    refit_rounds: int = 2

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.scoring not in ("ransac", "msac"):
            raise ValueError(f"unknown scoring {self.scoring!r}")


def _required_iters(inlier_ratio, sample_size, confidence):
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return np.inf
    denom = np.log1p(-(inlier_ratio ** sample_size))
    if denom == 0.0:
        return np.inf
    return np.log(1.0 - confidence) / denom


def ransac(n, fit, residuals, sample_size, cfg, min_inliers=None):
    """Generic robust estimation.

    Args:
        n: number of data items.
        fit: ``fit(indices) -> model``; may raise :class:`CorrPoseError` on
            degenerate samples, which are skipped.
        residuals: ``residuals(model) -> (n,)`` nonnegative errors.
        sample_size: minimal sample size.
        cfg: :class:`RansacConfig`.
        min_inliers: smallest acceptable consensus; defaults to ``sample_size``.

    Returns:
        ``(model, inlier_mask)`` after re-fitting on the consensus set.

    Raises:
        NoConsensusError: when no hypothesis gathers ``min_inliers`` inliers.
    """
    min_inliers = sample_size if min_inliers is None else min_inliers
    if n < sample_size:
        raise NoConsensusError(f"need at least {sample_size} items, got {n}")
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.threshold ** 2
    best_model, best_mask, best_cost = None, None, np.inf
    needed = cfg.max_iters
    it = 0
    while it < min(cfg.max_iters, needed):
        it += 1
        sample = rng.choice(n, size=sample_size, replace=False)
        try:
            model = fit(sample)
            err = residuals(model)
        except CorrPoseError:
            continue
        err = np.where(np.isfinite(err), err, np.inf)
        mask = err < cfg.threshold
        if cfg.scoring == "msac":
            cost = float(np.minimum(err ** 2, thr2).sum())
        else:
            cost = float(n - mask.sum())
        if cost < best_cost:
            best_model, best_mask, best_cost = model, mask, cost
            needed = _required_iters(mask.mean(), sample_size, cfg.confidence)

    if best_model is None or best_mask.sum() < min_inliers:
        count = 0 if best_mask is None else int(best_mask.sum())
        raise NoConsensusError(f"best hypothesis has {count} inliers, need {min_inliers}")

    model, mask = best_model, best_mask
    for _ in range(cfg.refit_rounds):
        try:
            refit = fit(np.flatnonzero(mask))
            err = residuals(refit)
        except CorrPoseError:
            break
        new_mask = err < cfg.threshold
        if new_mask.sum() < min_inliers:
            break
        model = refit
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return model, mask

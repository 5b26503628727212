"""Training objectives for the coarse, refiner and selection stages.

All losses are means over their support (cells or masked pixels) rather
than sums, so values compare across image sizes.
"""

from dataclasses import dataclass

import numpy as np

from .correspondence import check_class_tensor, no_match_class
from .geometry import pixel_index, rotation_angle

REG_WEIGHT = 2.0
CERT_WEIGHT = 5.0
POSE_WEIGHT = 20.0
BCE_EPS = 1e-7

# positive-label window for the selector
SELECTION_MAX_TRANSLATION = (0.01, 0.01, 0.05)
SELECTION_MAX_ROTATION_DEG = 5.0


@dataclass
class LossBreakdown:
    l_cls: float = 0.0
    l_reg: float = 0.0
    l_flow: float = 0.0
    l_cert: float = 0.0
    l_pose: float = 0.0

    @property
    def l_coarse(self):
        return coarse_total(self.l_cls, self.l_reg)

    @property
    def l_refiner(self):
        return refiner_loss(self.l_flow, self.l_cert, self.l_pose)


def coarse_total(l_cls, l_reg, alpha=REG_WEIGHT):
    return l_cls + alpha * l_reg


def coarse_loss(c, u, gt_class, gt_offset):
    """Cross-entropy over all cells plus L1 offset error on matched cells.

    Args:
        c: ``(G, G, K)`` class probabilities.
        u: ``(G, G, 2)`` predicted offsets.
        gt_class: ``(G, G)`` integer labels; ``G*G`` marks no-match.
        gt_offset: ``(G, G, 2)``; only read on matched cells.

    Returns:
        :class:`LossBreakdown` with ``l_cls`` and ``l_reg`` set.
    """
    c = check_class_tensor(c)
    g = c.shape[0]
    u = np.asarray(u, dtype=np.float64)
    gt_class = np.asarray(gt_class)
    gt_offset = np.asarray(gt_offset, dtype=np.float64)
    if u.shape != (g, g, 2) or gt_class.shape != (g, g) or gt_offset.shape != (g, g, 2):
        raise ValueError(
            f"shape mismatch: c {c.shape}, u {u.shape}, gt_class {gt_class.shape}, "
            f"gt_offset {gt_offset.shape}"
        )
    k = c.shape[2]
    if np.any(gt_class < 0) or np.any(gt_class >= k):
        raise ValueError("gt_class outside [0, K)")
    probs = np.take_along_axis(c, gt_class[..., None].astype(np.int64), axis=2)[..., 0]
    l_cls = float(np.mean(-np.log(np.maximum(probs, 1e-300))))
    matched = gt_class != no_match_class(g)
    if matched.any():
        l_reg = float(np.mean(np.abs(u[matched] - gt_offset[matched]).sum(axis=1)))
    else:
        l_reg = 0.0
    return LossBreakdown(l_cls=l_cls, l_reg=l_reg)


def flow_nll(mu, b, gt_flow, mask):
    """Mean over ``mask`` of ``|mu - gt|_1 / b + 2 log b``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("flow_nll needs a non-empty mask")
    mu = np.asarray(mu, dtype=np.float64)[mask]
    gt = np.asarray(gt_flow, dtype=np.float64)[mask]
    b = np.asarray(b, dtype=np.float64)[mask]
    if np.any(b <= 0):
        raise ValueError("Laplace scale must be positive on the mask")
    return float(np.mean(np.abs(mu - gt).sum(axis=-1) / b + 2.0 * np.log(b)))


def flow_nll_grad(mu, b, gt_flow, mask):
    """Analytic gradient of :func:`flow_nll` w.r.t. ``mu`` and ``b``."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.sum()
    mu = np.asarray(mu, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = mu - np.asarray(gt_flow, dtype=np.float64)
    g_mu = np.where(mask[..., None], np.sign(diff) / b[..., None], 0.0) / n
    g_b = np.where(mask, -np.abs(diff).sum(axis=-1) / b ** 2 + 2.0 / b, 0.0) / n
    return g_mu, g_b


def certainty_labels(flow, gt_mask_q):
    """1 where ``pixel centre + flow`` falls inside the query mask, else 0."""
    gt_mask_q = np.asarray(gt_mask_q, dtype=bool)
    h, w = gt_mask_q.shape
    flow = np.asarray(flow, dtype=np.float64)
    rows, cols = np.indices(flow.shape[:2])
    target = np.stack([cols + 0.5 + flow[..., 0], rows + 0.5 + flow[..., 1]], axis=-1)
    tr, tc = pixel_index(target.reshape(-1, 2))
    inside = (tr >= 0) & (tr < h) & (tc >= 0) & (tc < w)
    labels = np.zeros(tr.shape[0], dtype=bool)
    labels[inside] = gt_mask_q[tr[inside], tc[inside]]
    return labels.reshape(flow.shape[:2])


def certainty_bce(flow, cert, gt_mask_q, render_mask):
    """Binary cross-entropy of certainty against flow-lands-on-object labels.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    render_mask = np.asarray(render_mask, dtype=bool)
    cert = np.asarray(cert, dtype=np.float64)
    if cert.shape != render_mask.shape or np.shape(flow)[:2] != cert.shape:
        raise ValueError("flow, cert and render_mask must share their image shape")
    if not render_mask.any():
        raise ValueError("certainty_bce needs a non-empty render mask")
    labels = certainty_labels(flow, gt_mask_q)[render_mask]
    p = np.clip(cert[render_mask], BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-(labels * np.log(p) + (~labels) * np.log1p(-p))))


def mean_l1_distance(a, b):
    return float(np.mean(np.abs(a - b).sum(axis=1)))


def pose_loss(pose, gt, points):
    """Disentangled point-matching loss.

    Three point-set distances, each swapping one parameter group of the
    prediction into the ground truth: rotation, (t_x, t_y), then t_z.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("pose_loss needs at least one point")
    ref = pts @ gt.rotation.T + gt.translation
    t = pose.translation
    t_gt = gt.translation
    rot_term = pts @ pose.rotation.T + t_gt
    xy_term = pts @ gt.rotation.T + np.array([t[0], t[1], t_gt[2]])
    z_term = pts @ gt.rotation.T + np.array([t_gt[0], t_gt[1], t[2]])
    return (mean_l1_distance(rot_term, ref) + mean_l1_distance(xy_term, ref)
            + mean_l1_distance(z_term, ref))


def refiner_loss(l_flow, l_cert, l_pose, beta=CERT_WEIGHT, gamma=POSE_WEIGHT):
    return l_flow + beta * l_cert + gamma * l_pose


def selection_label(pose, gt):
    """Whether ``pose`` counts as a positive for the selector.

    Positive iff each translation component is within (0.01, 0.01, 0.05) m
    and the geodesic rotation difference is at most 5 degrees.
    """
    dt = np.abs(pose.translation - gt.translation)
    if np.any(dt > np.asarray(SELECTION_MAX_TRANSLATION)):
        return False
    angle = np.degrees(rotation_angle(pose.rotation, gt.rotation))
    return bool(angle <= SELECTION_MAX_ROTATION_DEG + 1e-12)

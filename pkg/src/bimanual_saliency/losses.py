"""Training objectives for the correction module, BSPN and BCPN.

Maps are N x 1 tensors (or plain arrays for constants). Selections of the
"highest saliency" contact point are relaxed with a temperature softmax so the
balance term has a gradient with respect to the saliency values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geom import LEFT, NONE, RIGHT, GravityLine, PointCloud, knn_batch

PRE_ITERATION = "pre-iteration"
ITERATION = "iteration"


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.5
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 2.0
    w4: float = 1.5
    softsel_temp: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "w1", "w2", "w3", "w4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.softsel_temp <= 0:
            raise ValueError("softsel_temp must be positive")


def _column(x, n: int | None = None) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim == 1:
        t = ad.reshape(t, (-1, 1))
    if n is not None and t.shape[0] != n:
        raise ValueError(f"expected {n} rows, got {t.shape[0]}")
    return t


def _labels(labels, n: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise ValueError(f"labels of shape {lab.shape} do not match {n} points")
    return lab


def masked_mse(diff: Tensor, mask: np.ndarray) -> Tensor:
    """(1/N) * sum over masked rows of the squared row norm of ``diff``."""
    n = diff.shape[0]
    w = np.repeat(mask.astype(np.float64).reshape(-1, 1), diff.shape[1], axis=1) / n
    return ad.weighted_sum(ad.square(diff), w)


def l_correct(s, labels) -> Tensor:
    s = _column(s)
    lab = _labels(labels, s.shape[0])
    target = (lab == RIGHT).astype(np.float64).reshape(-1, 1)
    return masked_mse(s - target, np.ones(lab.size, dtype=bool))


def nearest_candidates(v_pred: np.ndarray, candidates: dict[int, np.ndarray]) -> np.ndarray:
    """Per labeled point, the candidate vector closest to the current prediction."""
    target = np.zeros_like(v_pred)
    for i, cand in candidates.items():
        j = np.argmin(((cand - v_pred[i]) ** 2).sum(axis=1))
        target[i] = cand[j]
    return target


def l_c(v_pred: Tensor, v_gt, labels) -> Tensor:
    """``v_gt`` is an N x 3 target array or a {point index: candidates} map."""
    v_pred = v_pred if isinstance(v_pred, Tensor) else Tensor(v_pred)
    lab = _labels(labels, v_pred.shape[0])
    labeled = lab != NONE
    if isinstance(v_gt, dict):
        missing = [int(i) for i in np.flatnonzero(labeled) if int(i) not in v_gt]
        if missing:
            raise ValueError(f"no target vector for labeled points {missing[:5]}")
        v_gt = nearest_candidates(v_pred.data, v_gt)
    v_gt = np.asarray(v_gt, dtype=np.float64)
    if v_gt.shape != v_pred.shape:
        raise ValueError(f"target shape {v_gt.shape} does not match {v_pred.shape}")
    if not np.all(np.isfinite(v_gt[labeled])):
        raise ValueError("missing target on a labeled point")
    return masked_mse(v_pred - np.where(labeled[:, None], v_gt, 0.0), labeled)


def interpolate_at(points: np.ndarray, field: Tensor, queries: Tensor, k: int = 4, eps: float = 1e-6) -> Tensor:
    """Inverse-distance weighted lookup of ``field`` (N x 1) at Q x 3 query positions.

    Differentiable in both the field values and the query positions; the
    neighbor sets are fixed by the forward pass.
    """
    k = min(k, points.shape[0])
    q = queries.data
    idx, dist = knn_batch(points, q, k)
    w = 1.0 / (dist + eps)
    wsum = w.sum(axis=1, keepdims=True)
    fv = field.data.reshape(-1)[idx]
    out = (w * fv).sum(axis=1, keepdims=True) / wsum
    n = points.shape[0]

    def vjp(g):
        g = g.reshape(-1, 1)
        g_field = np.zeros((n, 1))
        np.add.at(g_field[:, 0], idx, (g * w / wsum))
        # d out / d q = sum_k (f_k - out) * dw_k/dq / wsum, dw_k/dq = -w_k^2 (q - x_k)/d_k
        diff = q[:, None, :] - points[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(dist[..., None] > 0, diff / np.where(dist > 0, dist, 1.0)[..., None], 0.0)
        coef = (fv - out) * (-(w**2)) / wsum
        g_q = g * (coef[..., None] * unit).sum(axis=1)
        return g_field, g_q

    return ad.make_node(out, (field, queries), vjp, "interpolate_at")


def l_a1(b, v_pred, cloud: PointCloud, labels, k: int = 4, eps: float = 1e-6) -> Tensor:
    b = _column(b, cloud.n)
    v_pred = v_pred if isinstance(v_pred, Tensor) else Tensor(v_pred)
    lab = _labels(labels, cloud.n)
    sel = np.flatnonzero(lab != NONE)
    if sel.size == 0:
        return ad.mul(ad.tsum(b), 0.0)
    queries = Tensor(cloud.points[sel]) + ad.select(v_pred, sel)
    b_j = interpolate_at(cloud.points, b, queries, k, eps)
    return ad.tsum(ad.square(ad.select(b, sel) - b_j)) / cloud.n


def psi_mask(labels, phase: str) -> np.ndarray:
    lab = np.asarray(labels)
    if phase == PRE_ITERATION:
        return (lab == NONE) | (lab == RIGHT)
    if phase == ITERATION:
        return lab == NONE
    raise ValueError(f"unknown phase {phase!r}")


def l_a2(b, s, labels, phase: str = PRE_ITERATION) -> Tensor:
    b = _column(b)
    s = _column(s, b.shape[0])
    lab = _labels(labels, b.shape[0])
    return masked_mse(b - s, psi_mask(lab, phase))


def l_a(b, s, v_pred, cloud, labels, weights: LossWeights, phase: str = PRE_ITERATION) -> Tensor:
    return weights.lambda1 * l_a1(b, v_pred, cloud, labels) + weights.lambda2 * l_a2(b, s, labels, phase)


def side_mask(labels, side) -> np.ndarray:
    """Boolean selector for "right", "left", "not_right", a label value or an explicit mask."""
    lab = np.asarray(labels)
    if isinstance(side, str):
        masks = {"right": lab == RIGHT, "left": lab == LEFT, "not_right": lab != RIGHT}
        if side not in masks:
            raise ValueError(f"unknown side {side!r}")
        return masks[side]
    if isinstance(side, (int, np.integer)):
        return lab == side
    return np.asarray(side, dtype=bool)


def soft_select_contact(cloud: PointCloud, b, labels, side, temp: float) -> Tensor:
    """Softmax(b / temp)-weighted mean position over the points of one side."""
    b = _column(b, cloud.n)
    idx = np.flatnonzero(side_mask(labels, side))
    if idx.size == 0:
        raise ValueError(f"no points on side {side!r}")
    vals = ad.reshape(ad.select(b, (idx, np.zeros(idx.size, dtype=np.int64))), (idx.size,))
    w = ad.softmax(vals / temp)
    return ad.matmul(w, Tensor(cloud.points[idx]))


def line_distance(p: Tensor, gravity: GravityLine) -> Tensor:
    d = gravity.direction
    proj = Tensor(np.eye(3) - np.outer(d, d))
    r = ad.matmul(ad.sub(p, gravity.origin), proj)
    return ad.sqrt(ad.tsum(ad.square(r)))


def l_p(cloud: PointCloud, b, labels, gravity: GravityLine, temp: float, sides=("left", "right")) -> Tensor:
    x_l = soft_select_contact(cloud, b, labels, sides[0], temp)
    x_r = soft_select_contact(cloud, b, labels, sides[1], temp)
    return line_distance((x_l + x_r) * 0.5, gravity)


def hard_select(cloud: PointCloud, b, labels, side) -> int:
    """Index of the highest-saliency point on a side (first index on ties)."""
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    idx = np.flatnonzero(side_mask(labels, side))
    if idx.size == 0:
        raise ValueError(f"no points on side {side!r}")
    return int(idx[np.argmax(b[idx])])


def hard_balance_distance(cloud: PointCloud, b, labels, gravity: GravityLine, sides=("left", "right")) -> float:
    i = hard_select(cloud, b, labels, sides[0])
    j = hard_select(cloud, b, labels, sides[1])
    r = 0.5 * (cloud.points[i] + cloud.points[j]) - gravity.origin
    d = gravity.direction
    return float(np.linalg.norm(r - np.dot(r, d) * d))


def l_total(
    cloud: PointCloud,
    b,
    s,
    v_pred,
    v_gt,
    labels,
    gravity: GravityLine,
    weights: LossWeights,
    phase: str = PRE_ITERATION,
    temp: float | None = None,
    use_balance: bool = True,
) -> Tensor:
    temp = weights.softsel_temp if temp is None else temp
    total = weights.w1 * l_c(v_pred, v_gt, labels) + weights.w2 * l_a(b, s, v_pred, cloud, labels, weights, phase)
    if use_balance and weights.w3 > 0:
        total = total + weights.w3 * l_p(cloud, b, labels, gravity, temp)
    return total


def l_classify(logits: Tensor, labels_gt, l_total_value, w4: float = 1.5) -> Tensor:
    """w4 * mean cross-entropy + the BSPN objective."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    n = logits.shape[0]
    lab = np.asarray(labels_gt)
    if lab.shape != (n,):
        raise ValueError(f"labels of shape {lab.shape} do not match {n} rows")
    if np.any((lab < 0) | (lab >= logits.shape[1])):
        raise ValueError("label out of range")
    onehot = np.eye(logits.shape[1])[lab.astype(np.int64)]
    ce = ad.mul(ad.weighted_sum(ad.log_softmax_rows(logits), onehot), -1.0 / n)
    return w4 * ce + l_total_value

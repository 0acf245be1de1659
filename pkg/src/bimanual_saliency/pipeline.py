"""Inference: saliency prediction, physics-aware refinement, contact extraction, metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geom import NONE, RIGHT, GravityLine, PointCloud, point_line_distance
from .losses import hard_balance_distance, line_distance, side_mask
from .nets import ModelWeights, bcpn_forward, bspn_forward, cm_forward, refine_forward
from .train import Adam

log = logging.getLogger(__name__)

REFINE_SIDES = ("not_right", "right")


@dataclass
class RefineConfig:
    w_r: float = 0.12
    max_iters: int = 500
    lr: float = 1e-2
    temp: float = 0.1
    mu: float = 0.1
    gamma: float = 0.0
    temp_floor: float = 0.0125
    patience: int = 8

    def __post_init__(self):
        if self.w_r <= 0:
            raise ValueError("w_r must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class ContactPrediction:
    left: np.ndarray
    right: np.ndarray
    refined: np.ndarray
    balance_distance: float
    warning: bool = False

    def __post_init__(self):
        if np.intersect1d(self.left, self.right).size:
            raise ValueError("left and right contact sets overlap")


@dataclass
class RefineTrace:
    objective: list[float] = field(default_factory=list)
    distance: list[float] = field(default_factory=list)
    stages: list[tuple[int, float]] = field(default_factory=list)
    rejected: int = 0
    iterations: int = 0
    converged: bool = False
    warning: bool = False


def correct_saliency(weights: ModelWeights, cloud: PointCloud, s_o) -> np.ndarray:
    return cm_forward(weights, cloud, s_o)[1].data.reshape(-1).copy()


def predict(weights: ModelWeights, cloud: PointCloud, s, passes: int = 1):
    """Bimanual map after ``passes`` applications of S <- clamp(S + dS), plus BCPN labels.

    With passes = 1 this is b = clamp(s + dS). Labels are the row-wise argmax
    of the BCPN logits, ties going to the lower class.
    """
    b = np.asarray(s, dtype=np.float64).reshape(-1)
    if b.size != cloud.n:
        raise ValueError(f"saliency length {b.size} does not match {cloud.n} points")
    for _ in range(max(1, passes)):
        b = bspn_forward(weights, cloud, b, with_vectors=False)[2].data.reshape(-1).copy()
    logits = bcpn_forward(weights, cloud, b).data
    return b, np.argmax(logits, axis=1).astype(np.int64)


def mask_labels(b, labels_pred, tau: float = 0.5) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    lab = np.asarray(labels_pred, dtype=np.int64)
    if b.shape != lab.shape:
        raise ValueError("saliency and labels differ in length")
    return np.where(b >= tau, lab, NONE)


def _soft_side(cloud, b_r, labels_pred, side, temp):
    # soft-selected position and the weighted spread of the selection around it
    idx = np.flatnonzero(side_mask(labels_pred, side))
    vals = ad.reshape(ad.select(b_r, (idx, np.zeros(idx.size, dtype=np.int64))), (idx.size,))
    w = ad.softmax(vals / temp)
    pts = cloud.points[idx]
    mean = ad.matmul(w, ad.Tensor(pts))
    spread = ad.matmul(w, ad.Tensor((pts**2).sum(axis=1))) - ad.tsum(ad.square(mean))
    return mean, spread


def refine_objective(weights, cloud, b, labels_pred, gravity, cfg, temp=None):
    """Soft balance distance + gamma * spread of both soft selections + mu * mean(R^2)."""
    temp = cfg.temp if temp is None else temp
    r, b_r = refine_forward(weights, cloud, b, labels_pred)
    x_l, spread_l = _soft_side(cloud, b_r, labels_pred, REFINE_SIDES[0], temp)
    x_r, spread_r = _soft_side(cloud, b_r, labels_pred, REFINE_SIDES[1], temp)
    obj = line_distance((x_l + x_r) * 0.5, gravity) + cfg.gamma * (spread_l + spread_r)
    return obj + cfg.mu * ad.mean(ad.square(r)), b_r.data.reshape(-1)


def physics_refine(weights: ModelWeights, cloud: PointCloud, b, labels_pred, cfg: RefineConfig, gravity: GravityLine):
    """Test-time optimization of the refinement net until the contact pair is balanced.

    The pair is the highest-saliency right-hand point and the highest
    non-right point. A step that raises the objective is rejected and the
    learning rate halved. When steps keep failing, the selection temperature
    is halved (down to ``temp_floor``) and a new stage begins; within a stage
    the accepted objectives never increase. Returns (b_r, trace).
    """
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    labels_pred = np.asarray(labels_pred, dtype=np.int64)
    if not np.any(labels_pred == RIGHT) or np.all(labels_pred == RIGHT):
        raise ValueError("refinement needs at least one right-hand and one other point")
    trace = RefineTrace()
    dist0 = hard_balance_distance(cloud, b, labels_pred, gravity, REFINE_SIDES)
    trace.distance.append(dist0)
    if dist0 < cfg.w_r:
        trace.converged = True
        return b.copy(), trace

    local = weights.copy()
    local.zero_head("refine")
    params = local.parameters("refine")
    temp = cfg.temp

    def new_stage():
        obj, _ = refine_objective(local, cloud, b, labels_pred, gravity, cfg, temp)
        trace.stages.append((len(trace.objective), temp))
        trace.objective.append(obj.item())
        return Adam(params, lr=cfg.lr), ad.backward(obj)

    opt, grads = new_stage()
    best = (dist0, b.copy())
    streak = 0
    for it in range(cfg.max_iters):
        trace.iterations = it + 1
        saved = [p.data.copy() for p in params]
        moments = ([m.copy() for m in opt.m], [v.copy() for v in opt.v], opt.t)
        opt.step([grads.get(p, np.zeros_like(p.data)) for p in params])
        cand, cand_b = refine_objective(local, cloud, b, labels_pred, gravity, cfg, temp)
        if cand.item() > trace.objective[-1]:
            for p, d in zip(params, saved):
                p.data = d
            opt.m, opt.v, opt.t = moments
            opt.lr *= 0.5
            trace.rejected += 1
            streak += 1
            if streak >= cfg.patience and temp > cfg.temp_floor:
                temp = max(cfg.temp_floor, 0.5 * temp)
                opt, grads = new_stage()
                streak = 0
            continue
        streak = 0
        grads = ad.backward(cand)
        opt.lr = min(cfg.lr, opt.lr * 1.5)
        trace.objective.append(cand.item())
        dist = hard_balance_distance(cloud, cand_b, labels_pred, gravity, REFINE_SIDES)
        trace.distance.append(dist)
        if dist < best[0]:
            best = (dist, cand_b.copy())
        if dist < cfg.w_r:
            trace.converged = True
            return cand_b.copy(), trace
    trace.warning = True
    log.warning("refinement did not reach w_r=%.3f in %d iterations (best %.4f)", cfg.w_r, cfg.max_iters, best[0])
    return best[1], trace


# ---------------------------------------------------------------- clustering


TRANSFER_ALL_MAX = 500


def farthest_point_init(x: np.ndarray, k: int, first: int) -> np.ndarray:
    centers = [first]
    d = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        centers.append(nxt)
        d = np.minimum(d, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[centers].copy()


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 100):
    assign = None
    for _ in range(max_iter):
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(centers.shape[0]):
            members = x[assign == j]
            if members.size:
                centers[j] = members.mean(axis=0)
    inertia = float(((x - centers[assign]) ** 2).sum())
    return assign, centers, inertia


def _move_costs(x, counts, sums):
    centers = sums / np.maximum(counts, 1)[:, None]
    d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    gain = np.where(counts > 0, d * counts / (counts + 1), 0.0)
    loss = d * counts / np.maximum(counts - 1, 1)
    # a singleton never moves out, so its stay cost cannot be beaten
    return gain, np.where(counts > 1, loss, -np.inf)


def transfer(x: np.ndarray, assign: np.ndarray, k: int, max_pass: int = 100):
    """Single-point moves that strictly lower inertia, until none remain."""
    assign = assign.copy()
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.stack([x[assign == j].sum(axis=0) for j in range(k)])
    rows = np.arange(x.shape[0])
    for _ in range(max_pass):
        gain, loss = _move_costs(x, counts, sums)
        stay = loss[rows, assign]
        gain[rows, assign] = np.inf
        candidates = np.flatnonzero(gain.min(axis=1) < stay - 1e-12)
        if not candidates.size:
            break
        moved = False
        for i in candidates:
            a = assign[i]
            g, l = _move_costs(x[i : i + 1], counts, sums)
            g[0, a] = l[0, a]
            j = int(np.argmin(g[0]))
            if j != a and g[0, j] < l[0, a] - 1e-12:
                counts[a] -= 1
                counts[j] += 1
                sums[a] -= x[i]
                sums[j] += x[i]
                assign[i] = j
                moved = True
        if not moved:
            break
    centers = sums / np.maximum(counts, 1)[:, None]
    inertia = float(((x - centers[assign]) ** 2).sum())
    return assign, centers, inertia


def kmeans(x, k: int = 3, seed: int = 0, n_init: int = 10, max_iter: int = 100):
    """Lloyd iterations then single-point transfers; best over ``n_init`` farthest-point
    and ``n_init`` random seeded starts.

    Returns (assignment, centers, inertia).
    """
    x = np.asarray(x, dtype=np.float64)
    if np.unique(x, axis=0).shape[0] < k:
        raise ValueError(f"need at least {k} distinct rows for {k} clusters")
    rng = np.random.default_rng(seed)
    firsts = rng.permutation(x.shape[0])[: max(1, min(n_init, x.shape[0]))]
    best = None
    starts = [farthest_point_init(x, k, int(f)) for f in firsts]
    # random draws cover partitions that farthest-point seeding never reaches
    starts += [x[rng.choice(x.shape[0], k, replace=False)].copy() for _ in range(n_init)]
    results = sorted((lloyd(x, c, max_iter) for c in starts), key=lambda r: r[2])
    # transfers are cheap on small inputs; on large ones polish only the winner
    polish = results if x.shape[0] <= TRANSFER_ALL_MAX else results[:1]
    for assign, _, _ in polish:
        result = transfer(x, assign, k)
        if best is None or result[2] < best[2]:
            best = result
    return best


def cluster_contacts(cloud: PointCloud, b_r, labels_pred, seed: int = 0, n_init: int = 10):
    """K-means (K=3) on [xyz, b_r]; the two highest-saliency clusters are the hands.

    Of those two, the one overlapping predicted right-hand labels most is the
    right hand. Returns (left indices, right indices).
    """
    b_r = np.asarray(b_r, dtype=np.float64).reshape(-1)
    feats = np.column_stack([cloud.points, b_r])
    assign, _, _ = kmeans(feats, 3, seed, n_init)
    means = np.array([b_r[assign == j].mean() if np.any(assign == j) else -np.inf for j in range(3)])
    top = np.argsort(-means, kind="stable")[:2]
    lab = np.asarray(labels_pred)
    overlap = [np.sum((assign == j) & (lab == RIGHT)) for j in top]
    right_c, left_c = (top[0], top[1]) if overlap[0] >= overlap[1] else (top[1], top[0])
    return np.flatnonzero(assign == left_c), np.flatnonzero(assign == right_c)


# ---------------------------------------------------------------- metrics


def bcacr(b, labels_gt, tau_c: float = 0.7) -> float:
    """Percentage of annotated contact points whose saliency reaches tau_c."""
    b = np.asarray(b, dtype=np.float64)
    lab = np.asarray(labels_gt)
    if b.shape != lab.shape:
        raise ValueError("saliency and labels differ in length")
    annotated = (lab == 1) | (lab == 2)
    c = int(annotated.sum())
    if c == 0:
        raise ValueError("no annotated contact points")
    return 100.0 * int((annotated & (b >= tau_c)).sum()) / c


def grasp_coverage(single_contacts, bimanual_contacts) -> float:
    single = np.unique(np.asarray(single_contacts, dtype=np.int64))
    if single.size == 0:
        raise ValueError("empty single-hand contact set")
    both = np.intersect1d(single, np.asarray(bimanual_contacts, dtype=np.int64))
    return 100.0 * both.size / single.size


def balance_distance(cloud: PointCloud, left, right, gravity: GravityLine, b=None, mode: str = "argmax") -> float:
    """Gravity-line distance of the midpoint of the two contact sets.

    ``mode="argmax"`` uses each set's highest-saliency point (needs ``b``),
    ``mode="centroid"`` the set centroids.
    """
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    if left.size == 0 or right.size == 0:
        raise ValueError("balance distance needs two non-empty sets")
    pts = cloud.points
    if mode == "centroid":
        p_l, p_r = pts[left].mean(axis=0), pts[right].mean(axis=0)
    elif mode == "argmax":
        if b is None:
            raise ValueError("argmax mode needs saliency values")
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        p_l, p_r = pts[left[np.argmax(b[left])]], pts[right[np.argmax(b[right])]]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return point_line_distance(0.5 * (p_l + p_r), gravity)


def run_object(weights: ModelWeights, cloud: PointCloud, s_o, refine_cfg: RefineConfig | None = None,
               tau: float = 0.5, passes: int | None = None, seed: int = 0) -> dict:
    """Full inference on one object: CM, BSPN passes, BCPN, refinement, clustering."""
    gravity = GravityLine.through_center(cloud)
    passes = weights.meta.get("inference_passes", 1) if passes is None else passes
    s = correct_saliency(weights, cloud, s_o)
    b, labels_pred = predict(weights, cloud, s, passes)
    out = dict(s=s, b=b, labels_pred=labels_pred, masked=mask_labels(b, labels_pred, tau))
    if np.any(labels_pred == RIGHT) and not np.all(labels_pred == RIGHT):
        b_r, trace = physics_refine(weights, cloud, b, labels_pred, refine_cfg or RefineConfig(), gravity)
        left, right = cluster_contacts(cloud, b_r, labels_pred, seed)
        out.update(
            b_r=b_r,
            trace=trace,
            contacts=ContactPrediction(left, right, b_r, trace.distance[-1] if trace.converged else min(trace.distance), trace.warning),
        )
    return out

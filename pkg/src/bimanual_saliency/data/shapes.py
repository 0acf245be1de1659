"""Synthetic household objects with bimanual contact annotations.

Each category is a handful of parametric patches sampled by area. Labels mark
the functional grasp region (right hand) and a supporting region (left hand);
the procedural single-handed saliency is a Gaussian bump on the functional
region, standing in for a pre-trained single-hand predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geom import (
    LEFT,
    NONE,
    RIGHT,
    Disk,
    Frustum,
    Patch,
    PointCloud,
    Sphere,
    TorusArc,
    box_faces,
    sample_patches,
)

CATEGORIES = ("mug", "pot", "pan", "kettle", "vase", "kitchen-pot", "tool", "cad")
N_POINTS = 5000
SALIENCY_WIDTH = 0.12


@dataclass
class ParametricObject:
    category: str
    params: dict
    seed: int
    patches: list[Patch] = field(repr=False, default_factory=list)

    @property
    def area(self) -> float:
        return float(sum(p.area for p in self.patches))


def _jitter(rng: np.random.Generator, value: float, spread: float = 0.1) -> float:
    return float(value * (1.0 + spread * (2.0 * rng.random() - 1.0)))


# Each builder returns (params, patches, labeler). The labeler sees raw points
# and the owning patch tag and returns labels in {0, 1, 2}.


def _mug(rng):
    p = dict(radius=_jitter(rng, 0.4), height=_jitter(rng, 1.0), loop=_jitter(rng, 0.25), tube=0.04)
    R, H = p["radius"], p["height"]
    patches = [
        Frustum(r0=R, r1=R, height=H, tag="body"),
        Disk(radius=R, tag="bottom"),
        TorusArc(center=(R, 0.0, H / 2), axis=(1.0, 0.0, 0.0), major=p["loop"], minor=p["tube"], tag="handle"),
    ]

    def label(pts, tags):
        lab = np.where(tags == "handle", RIGHT, NONE)
        opposite = (tags == "body") & (pts[:, 0] < -0.9 * R) & (np.abs(pts[:, 2] - H / 2) < 0.2 * H)
        return np.where(opposite, LEFT, lab)

    return p, patches, label


def _pot(rng):
    p = dict(radius=_jitter(rng, 0.5), height=_jitter(rng, 0.6), loop=_jitter(rng, 0.1), tube=0.03)
    R, H = p["radius"], p["height"]
    zh = 0.8 * H
    patches = [
        Frustum(r0=R, r1=R, height=H, tag="body"),
        Disk(radius=R, tag="bottom"),
        TorusArc(center=(R, 0.0, zh), axis=(1.0, 0.0, 0.0), major=p["loop"], minor=p["tube"], tag="handle_r"),
        TorusArc(center=(-R, 0.0, zh), axis=(-1.0, 0.0, 0.0), major=p["loop"], minor=p["tube"], tag="handle_l"),
    ]

    def label(pts, tags):
        return np.select([tags == "handle_r", tags == "handle_l"], [RIGHT, LEFT], NONE)

    return p, patches, label


def _pan(rng):
    p = dict(radius=_jitter(rng, 0.5), height=_jitter(rng, 0.12), handle=_jitter(rng, 0.6), width=0.06)
    R, H, L, W = p["radius"], p["height"], p["handle"], p["width"]
    patches = [
        Frustum(r0=0.9 * R, r1=R, height=H, tag="wall"),
        Disk(radius=0.9 * R, tag="bottom"),
        *box_faces((0.97 * R, -W / 2, H - 0.04), (L, W, 0.04), tag="handle"),
    ]

    def label(pts, tags):
        lab = np.where(tags == "handle", RIGHT, NONE)
        rim = (tags == "wall") & (pts[:, 0] < -0.85 * R) & (pts[:, 2] > 0.5 * H)
        return np.where(rim, LEFT, lab)

    return p, patches, label


def _kettle(rng):
    p = dict(radius=_jitter(rng, 0.45), height=_jitter(rng, 0.6), loop=_jitter(rng, 0.2), tube=0.035)
    R, H = p["radius"], p["height"]
    top = 0.75 * R
    patches = [
        Frustum(r0=R, r1=top, height=H, tag="body"),
        Disk(radius=R, tag="bottom"),
        Disk(center=(0.0, 0.0, H), radius=top, tag="lid"),
        TorusArc(center=(-0.88 * R, 0.0, 0.55 * H), axis=(-1.0, 0.0, 0.0), major=p["loop"], minor=p["tube"], tag="handle"),
        Frustum(center=(0.9 * R, 0.0, 0.3 * H), axis=(1.0, 0.0, 0.8), r0=0.08, r1=0.04, height=0.35, tag="spout"),
    ]

    def label(pts, tags):
        lab = np.where(tags == "handle", RIGHT, NONE)
        front = (tags == "body") & (pts[:, 0] > 0.8 * R) & (pts[:, 2] < 0.5 * H)
        return np.where(front, LEFT, lab)

    return p, patches, label


def _vase(rng):
    p = dict(belly=_jitter(rng, 0.4), neck=_jitter(rng, 0.15), height=_jitter(rng, 1.0))
    Rb, Rn, H = p["belly"], p["neck"], p["height"]
    patches = [
        Frustum(r0=0.6 * Rb, r1=Rb, height=0.5 * H, tag="belly"),
        Frustum(center=(0.0, 0.0, 0.5 * H), r0=Rb, r1=Rn, height=0.5 * H, tag="neck"),
        Disk(radius=0.6 * Rb, tag="bottom"),
    ]

    def label(pts, tags):
        neck = (tags == "neck") & (pts[:, 2] > 0.8 * H) & (pts[:, 0] > 0.0)
        belly = (tags == "belly") & (pts[:, 0] < -0.6 * Rb) & (pts[:, 2] < 0.3 * H)
        return np.select([neck, belly], [RIGHT, LEFT], NONE)

    return p, patches, label


def _kitchen_pot(rng):
    p = dict(radius=_jitter(rng, 0.45), height=_jitter(rng, 0.5), handle=_jitter(rng, 0.5), loop=_jitter(rng, 0.09))
    R, H, L = p["radius"], p["height"], p["handle"]
    patches = [
        Frustum(r0=R, r1=R, height=H, tag="body"),
        Disk(radius=R, tag="bottom"),
        Disk(center=(0.0, 0.0, H), radius=R, tag="lid"),
        Sphere(center=(0.0, 0.0, H + 0.04), radius=0.04, tag="knob"),
        *box_faces((R, -0.03, 0.8 * H), (L, 0.06, 0.04), tag="handle"),
        TorusArc(center=(-R, 0.0, 0.8 * H), axis=(-1.0, 0.0, 0.0), major=p["loop"], minor=0.03, tag="helper"),
    ]

    def label(pts, tags):
        return np.select([tags == "handle", tags == "helper"], [RIGHT, LEFT], NONE)

    return p, patches, label


def _tool(rng):
    # tackle box: carried by the top handle and supported under the bottom
    p = dict(length=_jitter(rng, 0.8), depth=_jitter(rng, 0.4), height=_jitter(rng, 0.4), loop=_jitter(rng, 0.15))
    Lx, Dy, Hz = p["length"], p["depth"], p["height"]
    patches = [
        *box_faces((-Lx / 2, -Dy / 2, 0.0), (Lx, Dy, Hz), tag="box"),
        TorusArc(center=(0.0, 0.0, Hz), axis=(1.0, 0.0, 0.0), major=p["loop"], minor=0.025, phi0=0.0, phi1=np.pi, tag="handle"),
    ]

    def label(pts, tags):
        under = (tags == "box") & (pts[:, 2] < 1e-9) & (np.hypot(pts[:, 0], pts[:, 1]) < 0.25 * Lx)
        top = (tags == "handle") & (pts[:, 2] > Hz + 0.6 * p["loop"])
        return np.select([top, under], [RIGHT, LEFT], NONE)

    return p, patches, label


def _cad(rng):
    # L-shaped bracket
    p = dict(arm=_jitter(rng, 0.7), thick=_jitter(rng, 0.12), width=_jitter(rng, 0.3), rise=_jitter(rng, 0.6))
    A, T, W, Z = p["arm"], p["thick"], p["width"], p["rise"]
    patches = [
        *box_faces((-A / 2, -W / 2, 0.0), (A, W, T), tag="base"),
        *box_faces((-A / 2, -W / 2, T), (T, W, Z), tag="upright"),
    ]

    def label(pts, tags):
        right = (tags == "upright") & (pts[:, 2] > T + 0.7 * Z)
        left = (tags == "base") & (pts[:, 0] > A / 2 - 0.2 * A)
        return np.select([right, left], [RIGHT, LEFT], NONE)

    return p, patches, label


_BUILDERS = {
    "mug": _mug,
    "pot": _pot,
    "pan": _pan,
    "kettle": _kettle,
    "vase": _vase,
    "kitchen-pot": _kitchen_pot,
    "tool": _tool,
    "cad": _cad,
}


def make_object(category: str, seed: int) -> tuple[ParametricObject, callable]:
    if category not in _BUILDERS:
        raise ValueError(f"unknown category {category!r}; choose from {', '.join(CATEGORIES)}")
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    params, patches, labeler = _BUILDERS[category](rng)
    return ParametricObject(category, params, seed, patches), labeler


def saliency_bump(points: np.ndarray, anchor: np.ndarray, width: float = SALIENCY_WIDTH) -> np.ndarray:
    d2 = ((points - anchor) ** 2).sum(axis=1)
    return np.exp(-d2 / (2.0 * width**2))


def gen_object(category: str, seed: int, n: int = N_POINTS):
    """Returns (object, normalized cloud, labels, single-handed saliency s_o)."""
    obj, labeler = make_object(category, seed)
    raw, owner = sample_patches(obj.patches, n, seed)
    tags = np.array([obj.patches[i].tag for i in owner])
    labels = labeler(raw, tags).astype(np.int64)
    cloud = PointCloud.normalized(raw)
    if not (np.any(labels == RIGHT) and np.any(labels == LEFT)):
        raise RuntimeError(f"{category} seed {seed}: annotation lacks a hand class at n={n}")
    # peak on a right-hand point near the middle of the functional region, jittered by seed
    rng = np.random.default_rng([seed, 7])
    right = np.flatnonzero(labels == RIGHT)
    center = cloud.points[right].mean(axis=0)
    near = right[np.argsort(((cloud.points[right] - center) ** 2).sum(axis=1), kind="stable")]
    anchor = cloud.points[near[rng.integers(0, max(1, near.size // 4))]]
    s_o = saliency_bump(cloud.points, anchor)
    return obj, cloud, labels, s_o


def build_vector_gt(cloud: PointCloud, labels, n_cand: int = 1000, seed: int = 0) -> dict[int, np.ndarray]:
    """Candidate displacement vectors from each labeled point to opposite-hand points."""
    lab = np.asarray(labels)
    right, left = np.flatnonzero(lab == RIGHT), np.flatnonzero(lab == LEFT)
    if right.size == 0 or left.size == 0:
        raise ValueError("vector ground truth needs both right- and left-hand points")
    rng = np.random.default_rng(seed)
    pts = cloud.points
    out: dict[int, np.ndarray] = {}
    for i in np.flatnonzero(lab != NONE):
        opposite = left if lab[i] == RIGHT else right
        if opposite.size > n_cand:
            opposite = np.sort(rng.choice(opposite, n_cand, replace=False))
        out[int(i)] = pts[opposite] - pts[i]
    return out


def disturb_labels(labels, fraction: float = 0.75, seed: int = 0) -> np.ndarray:
    """Reassign a ``fraction`` of the labeled points to a random class.

    The default robustness setting is fraction = 0.75, i.e. three disturbed
    labels for every accurate one.
    """
    lab = np.asarray(labels, dtype=np.int64).copy()
    rng = np.random.default_rng(seed)
    labeled = np.flatnonzero(lab != NONE)
    k = int(round(fraction * labeled.size))
    if k == 0:
        return lab
    hit = rng.choice(labeled, k, replace=False)
    lab[hit] = rng.choice([NONE, RIGHT, LEFT], size=k)
    return lab

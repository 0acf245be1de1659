"""Point clouds, labels, the gravity line and parametric surface sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NONE, RIGHT, LEFT = 0, 1, 2


@dataclass(frozen=True)
class PointCloud:
    """N x 3 object-surface points. Use :meth:`normalized` on raw input."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {pts.shape}")
        if pts.shape[0] < 3:
            raise ValueError(f"a point cloud needs at least 3 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.n

    @classmethod
    def normalized(cls, points) -> "PointCloud":
        """Center at the centroid and scale the bounding-box diagonal to 1."""
        pts = np.asarray(points, dtype=np.float64)
        pts = pts - pts.mean(axis=0)
        diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        if diag <= 0:
            raise ValueError("degenerate cloud: zero bounding-box diagonal")
        return cls(pts / diag)

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.points[index])


def check_labels(labels, n: int | None = None, annotation: bool = False) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise ValueError("labels must be a 1-D array")
    if lab.size and not np.issubdtype(lab.dtype, np.integer):
        if not np.all(np.equal(np.mod(lab, 1), 0)):
            raise ValueError("labels must be integers")
    lab = lab.astype(np.int64)
    if np.any((lab < 0) | (lab > 2)):
        raise ValueError("labels must be in {0, 1, 2}")
    if n is not None and lab.size != n:
        raise ValueError(f"label count {lab.size} does not match {n} points")
    if annotation and not (np.any(lab == RIGHT) and np.any(lab == LEFT)):
        raise ValueError("an annotation needs at least one right-hand and one left-hand point")
    return lab


def check_saliency(values, n: int | None = None) -> np.ndarray:
    s = np.asarray(values, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("saliency must be a 1-D array")
    if n is not None and s.size != n:
        raise ValueError(f"saliency length {s.size} does not match {n} points")
    if not np.all((s >= 0.0) & (s <= 1.0)):
        raise ValueError("saliency values must lie in [0, 1]")
    return s


@dataclass(frozen=True)
class GravityLine:
    origin: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(d)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("gravity direction must be a non-zero finite vector")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d / norm)

    @classmethod
    def through_center(cls, cloud) -> "GravityLine":
        """Vertical line (canonical -z) through the cloud's geometric center."""
        return cls(centroid(cloud))


def _as_points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.atleast_2d(np.asarray(cloud, dtype=np.float64))


def centroid(cloud) -> np.ndarray:
    pts = _as_points(cloud)
    if pts.shape[0] == 0:
        raise ValueError("centroid of an empty cloud")
    return pts.mean(axis=0)


def point_line_distance(p, line: GravityLine) -> float:
    r = np.asarray(p, dtype=np.float64) - line.origin
    d = line.direction
    return float(np.linalg.norm(r - np.dot(r, d) * d))


def knn(cloud, query, k: int) -> list[tuple[int, float]]:
    """k nearest points as (index, distance), ascending; ties go to the lower index."""
    pts = _as_points(cloud)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"k must be in [1, {pts.shape[0]}], got {k}")
    dist = np.sqrt(((pts - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    return [(int(i), float(dist[i])) for i in order]


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`knn` for Q queries: (indices Q x k, distances Q x k)."""
    sq = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    idx = np.argsort(sq, axis=1, kind="stable")[:, :k]
    return idx, np.sqrt(np.take_along_axis(sq, idx, axis=1))


def soft_interpolate(cloud, field, query, k: int = 4, eps: float = 1e-6) -> float:
    """Inverse-distance weighted mean of ``field`` over the k nearest points."""
    pts = _as_points(cloud)
    values = np.asarray(field, dtype=np.float64)
    k = min(k, pts.shape[0])
    nbrs = knn(pts, query, k)
    w = np.array([1.0 / (d + eps) for _, d in nbrs])
    v = values[[i for i, _ in nbrs]]
    return float(np.dot(w, v) / w.sum())


# ---------------------------------------------------------------- parametric surfaces


def _frame(axis: Sequence[float]) -> np.ndarray:
    """Rotation whose third column is the unit ``axis``."""
    z = np.asarray(axis, dtype=np.float64)
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    return np.column_stack([x, np.cross(z, x), z])


@dataclass
class Patch:
    """A surface piece in a local frame: local (u, v, w) -> center + rot @ local."""

    center: Sequence[float] = (0.0, 0.0, 0.0)
    axis: Sequence[float] = (0.0, 0.0, 1.0)
    tag: str = ""

    @property
    def area(self) -> float:
        raise NotImplementedError

    def _local(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        rot = _frame(self.axis)
        return self._local(rng, n) @ rot.T + np.asarray(self.center, dtype=np.float64)


@dataclass
class Frustum(Patch):
    """Open lateral surface of a (possibly tapered) cylinder along the local axis."""

    r0: float = 1.0
    r1: float = 1.0
    height: float = 1.0
    theta0: float = 0.0
    theta1: float = 2 * np.pi

    @property
    def area(self) -> float:
        slant = np.hypot(self.height, self.r1 - self.r0)
        return 0.5 * (self.theta1 - self.theta0) * (self.r0 + self.r1) * slant

    def _local(self, rng, n):
        # density along the axis is proportional to the radius there
        u = rng.random(n)
        if np.isclose(self.r0, self.r1):
            t = u
        else:
            a, b = self.r0, self.r1 - self.r0
            t = (-a + np.sqrt(a * a + u * (2 * a * b + b * b))) / b
        r = self.r0 + (self.r1 - self.r0) * t
        th = self.theta0 + (self.theta1 - self.theta0) * rng.random(n)
        return np.column_stack([r * np.cos(th), r * np.sin(th), t * self.height])


@dataclass
class Disk(Patch):
    """Flat annulus (inner radius may be 0) in the local w = 0 plane."""

    radius: float = 1.0
    inner: float = 0.0

    @property
    def area(self) -> float:
        return np.pi * (self.radius**2 - self.inner**2)

    def _local(self, rng, n):
        r = np.sqrt(self.inner**2 + rng.random(n) * (self.radius**2 - self.inner**2))
        th = 2 * np.pi * rng.random(n)
        return np.column_stack([r * np.cos(th), r * np.sin(th), np.zeros(n)])


@dataclass
class Rect(Patch):
    """Planar rectangle spanned by two edge vectors from ``center`` (a corner)."""

    edge_u: Sequence[float] = (1.0, 0.0, 0.0)
    edge_v: Sequence[float] = (0.0, 1.0, 0.0)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    def sample(self, rng, n):
        a, b = rng.random(n), rng.random(n)
        return (
            np.asarray(self.center, dtype=np.float64)
            + np.outer(a, np.asarray(self.edge_u, dtype=np.float64))
            + np.outer(b, np.asarray(self.edge_v, dtype=np.float64))
        )


@dataclass
class TorusArc(Patch):
    """Tube of radius ``minor`` around a circular arc of radius ``major``.

    The arc lies in the local (u, w) plane, swept over [phi0, phi1] from +u,
    which is the natural shape of a loop handle.
    """

    major: float = 1.0
    minor: float = 0.1
    phi0: float = -np.pi / 2
    phi1: float = np.pi / 2

    @property
    def area(self) -> float:
        return 2 * np.pi * self.minor * self.major * (self.phi1 - self.phi0)

    def _local(self, rng, n):
        out = np.empty((0, 3))
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 8
            psi = 2 * np.pi * rng.random(m)
            keep = rng.random(m) * (self.major + self.minor) <= self.major + self.minor * np.cos(psi)
            psi = psi[keep]
            phi = self.phi0 + (self.phi1 - self.phi0) * rng.random(psi.size)
            rad = self.major + self.minor * np.cos(psi)
            pts = np.column_stack([rad * np.cos(phi), self.minor * np.sin(psi), rad * np.sin(phi)])
            out = np.vstack([out, pts])
        return out[:n]

    def sample(self, rng, n):
        loc = self._local(rng, n)
        # local frame: u along handle offset direction, v sideways, w up
        u = np.asarray(self.axis, dtype=np.float64)
        u = u / np.linalg.norm(u)
        w = np.array([0.0, 0.0, 1.0])
        v = np.cross(w, u)
        return loc[:, :1] * u + loc[:, 1:2] * v + loc[:, 2:3] * w + np.asarray(self.center, dtype=np.float64)


@dataclass
class Sphere(Patch):
    radius: float = 1.0

    @property
    def area(self) -> float:
        return 4 * np.pi * self.radius**2

    def _local(self, rng, n):
        g = rng.standard_normal((n, 3))
        return self.radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def box_faces(corner, size, tag="") -> list[Rect]:
    """Six faces of an axis-aligned box."""
    c = np.asarray(corner, dtype=np.float64)
    sx, sy, sz = size
    ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz * 1.0])
    return [
        Rect(center=c, edge_u=ex, edge_v=ey, tag=tag),
        Rect(center=c + ez, edge_u=ex, edge_v=ey, tag=tag),
        Rect(center=c, edge_u=ex, edge_v=ez, tag=tag),
        Rect(center=c + ey, edge_u=ex, edge_v=ez, tag=tag),
        Rect(center=c, edge_u=ey, edge_v=ez, tag=tag),
        Rect(center=c + ex, edge_u=ey, edge_v=ez, tag=tag),
    ]



def sample_patches(patches: Sequence[Patch], n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples; returns (points n x 3, patch index per point)."""
    if n < 3:
        raise ValueError(f"need at least 3 samples, got {n}")
    areas = np.array([p.area for p in patches], dtype=np.float64)
    total = areas.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("degenerate surface: zero total area")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, areas / total)
    chunks, owner = [], []
    for i, (patch, c) in enumerate(zip(patches, counts)):
        if c:
            chunks.append(patch.sample(rng, int(c)))
            owner.append(np.full(int(c), i))
    return np.vstack(chunks), np.concatenate(owner)


def sample_surface(model, n: int, seed: int) -> PointCloud:
    """Sample ``n`` points uniformly by area from ``model`` (anything with ``patches``)."""
    patches = model.patches if hasattr(model, "patches") else model
    pts, _ = sample_patches(patches, n, seed)
    return PointCloud(pts)

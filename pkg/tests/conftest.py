import numpy as np
import pytest

from bimanual_saliency.geom import LEFT, NONE, RIGHT, GravityLine, PointCloud


def toy_object(n: int = 64, seed: int = 0):
    """Points on a unit-ish sphere; right hand near +x, left hand near -x."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, 3))
    cloud = PointCloud.normalized(g / np.linalg.norm(g, axis=1, keepdims=True))
    x = cloud.points[:, 0]
    labels = np.full(n, NONE)
    labels[x > np.quantile(x, 0.85)] = RIGHT
    labels[x < np.quantile(x, 0.15)] = LEFT
    return cloud, labels


@pytest.fixture
def toy():
    cloud, labels = toy_object()
    return cloud, labels, GravityLine.through_center(cloud)

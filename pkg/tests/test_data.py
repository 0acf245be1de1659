import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bimanual_saliency.data.io import (
    AnnotationRecord,
    DataError,
    DatasetConfig,
    load_annotations,
    load_ply,
    load_split,
    make_dataset,
    regenerate,
    saliency_colors,
    save_annotations,
    save_ply,
)
from bimanual_saliency.data.shapes import (
    CATEGORIES,
    build_vector_gt,
    disturb_labels,
    gen_object,
    make_object,
)
from bimanual_saliency.geom import LEFT, NONE, RIGHT, PointCloud

FIXTURE = Path(__file__).parent / "fixtures" / "triangle.ply"


# ---------------------------------------------------------------- shapes


@pytest.mark.parametrize("category", CATEGORIES)
def test_generated_object_properties(category):
    _, cloud, labels, s_o = gen_object(category, 0)
    assert cloud.n == 5000 and labels.shape == (5000,) and s_o.shape == (5000,)
    assert np.any(labels == RIGHT) and np.any(labels == LEFT)
    assert np.all((s_o >= 0) & (s_o <= 1))
    # canonical frame: centroid at origin, unit bounding-box diagonal
    np.testing.assert_allclose(cloud.points.mean(axis=0), 0.0, atol=1e-12)
    span = cloud.points.max(axis=0) - cloud.points.min(axis=0)
    assert np.linalg.norm(span) == pytest.approx(1.0)
    assert labels[np.argmax(s_o)] == RIGHT


def test_generation_is_deterministic_and_seed_sensitive():
    a = gen_object("mug", 3, 500)
    b = gen_object("mug", 3, 500)
    c = gen_object("mug", 4, 500)
    np.testing.assert_array_equal(a[1].points, b[1].points)
    np.testing.assert_array_equal(a[2], b[2])
    assert not np.array_equal(a[1].points, c[1].points)


def test_unknown_category():
    with pytest.raises(ValueError):
        make_object("teapot", 0)


def test_vector_gt_points_to_opposite_hand():
    _, cloud, labels, _ = gen_object("pot", 1, 600)
    gt = build_vector_gt(cloud, labels, n_cand=7, seed=0)
    assert set(gt) == set(np.flatnonzero(labels != NONE).tolist())
    for i, vecs in gt.items():
        assert vecs.shape[0] <= 7
        targets = cloud.points[i] + vecs
        # every candidate lands exactly on a point of the opposite hand
        opposite = LEFT if labels[i] == RIGHT else RIGHT
        d = ((targets[:, None, :] - cloud.points[None, labels == opposite, :]) ** 2).sum(axis=2)
        assert np.all(d.min(axis=1) < 1e-24)


def test_vector_gt_needs_both_hands():
    cloud = PointCloud(np.eye(3))
    with pytest.raises(ValueError):
        build_vector_gt(cloud, np.array([1, 1, 0]))


def test_disturb_labels_changes_only_labeled_points():
    labels = np.array([0] * 20 + [1] * 10 + [2] * 10)
    out = disturb_labels(labels, 0.75, seed=1)
    assert np.array_equal(out[:20], labels[:20])
    assert set(np.unique(out)) <= {0, 1, 2}
    np.testing.assert_array_equal(disturb_labels(labels, 0.0), labels)
    np.testing.assert_array_equal(out, disturb_labels(labels, 0.75, seed=1))


# ---------------------------------------------------------------- PLY


def test_fixture_parses_to_documented_values():
    d = load_ply(FIXTURE)
    np.testing.assert_array_equal(d.cloud.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0.5]])
    np.testing.assert_array_equal(d.saliency, [0.25, 0.5, 1.0])
    np.testing.assert_array_equal(d.labels, [0, 1, 2])
    assert d.colors is None


@pytest.mark.parametrize("fmt", ["ascii", "binary_little_endian"])
def test_ply_round_trip_is_exact(tmp_path, fmt):
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((50, 3)).astype(np.float32).astype(np.float64)
    s = rng.random(50).astype(np.float32).astype(np.float64)
    lab = rng.integers(0, 3, 50)
    path = tmp_path / "x.ply"
    save_ply(path, PointCloud(pts), s, lab, colors=True, fmt=fmt)
    d = load_ply(path)
    np.testing.assert_array_equal(d.cloud.points, pts)
    np.testing.assert_array_equal(d.saliency, s)
    np.testing.assert_array_equal(d.labels, lab)
    np.testing.assert_array_equal(d.colors, saliency_colors(s))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=9, max_size=30))
def test_ascii_floats_round_trip(tmp_path_factory, values):
    n = len(values) // 3
    pts = np.array(values[: 3 * n], dtype=np.float64).reshape(n, 3)
    path = tmp_path_factory.mktemp("ply") / "a.ply"
    save_ply(path, PointCloud(pts), fmt="ascii")
    np.testing.assert_array_equal(load_ply(path).cloud.points, pts)


def test_saliency_colormap_endpoints():
    np.testing.assert_array_equal(saliency_colors([0.0, 1.0, 0.5]), [[0, 0, 255], [255, 0, 0], [128, 0, 127]])


HEADER = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n"


@pytest.mark.parametrize(
    "text",
    [
        "plx\n" + HEADER[4:],
        HEADER.replace("ascii", "binary_big_endian"),
        HEADER.replace("property float z\n", ""),
        HEADER.replace("end_header\n", ""),
        HEADER.replace("property float z", "property list uchar int z"),
        HEADER.replace("property float z", "property quad z"),
        HEADER.replace("element vertex 1", "element face 2\nelement vertex 1"),
        HEADER.replace("0 0 0\n", ""),
        HEADER.replace("element vertex 1", "element vertex 1\nelement vertex 1"),
    ],
)
def test_malformed_ply_rejected(tmp_path, text):
    path = tmp_path / "bad.ply"
    path.write_text(text)
    with pytest.raises(DataError):
        load_ply(path)


def test_truncated_binary_rejected(tmp_path):
    path = tmp_path / "b.ply"
    save_ply(path, PointCloud(np.eye(3)))
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(DataError):
        load_ply(path)


def test_out_of_range_values_rejected(tmp_path):
    path = tmp_path / "v.ply"
    path.write_text(HEADER.replace("property float z\n", "property float z\nproperty uchar label\n").replace("0 0 0\n", "0 0 0 7\n"))
    with pytest.raises(DataError):
        load_ply(path)


# ---------------------------------------------------------------- annotations


def test_annotation_round_trip(tmp_path):
    recs = [
        AnnotationRecord("mug-0", [0, 1, 2, 2], [0.0, 0.125, 1.0, 0.3], "a1"),
        AnnotationRecord("pot-1", [1, 0, 2]),
    ]
    path = tmp_path / "ann.json"
    save_annotations(path, recs)
    back = load_annotations(path)
    assert [r.object_id for r in back] == ["mug-0", "pot-1"]
    np.testing.assert_array_equal(back[0].labels, recs[0].labels)
    np.testing.assert_array_equal(back[0].saliency, recs[0].saliency)
    assert back[0].annotator == "a1" and back[1].saliency is None


def test_annotation_validation(tmp_path):
    path = tmp_path / "ann.json"
    with pytest.raises(DataError):
        save_annotations(path, [AnnotationRecord("x", [0, 0, 1])])  # no left hand
    save_annotations(path, [AnnotationRecord("x", [0, 0, 1])], bimanual=False)
    doc = json.loads(path.read_text())
    doc["records"][0]["num_points"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_annotations(path, bimanual=False)
    doc["records"][0].update(num_points=3, extra=1)
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_annotations(path, bimanual=False)
    path.write_text("{not json")
    with pytest.raises(DataError):
        load_annotations(path)


# ---------------------------------------------------------------- datasets


def test_dataset_seeds_disjoint():
    for seed in (0, 5, 1000):
        cfg = DatasetConfig(train_count=7, test_count=7, seed=seed)
        assert not set(cfg.seeds("train")) & set(cfg.seeds("test"))
    with pytest.raises(ValueError):
        DatasetConfig(categories=("mug", "teapot"))


def test_dataset_reproducible_and_verified(tmp_path):
    cfg = DatasetConfig(categories=("mug", "tool"), train_count=1, test_count=1, n_points=300)
    m1 = make_dataset(tmp_path / "a", cfg)
    m2 = make_dataset(tmp_path / "b", cfg)
    assert m1["train"].read_text() == m2["train"].read_text()
    assert regenerate(m1["test"], tmp_path / "c") == []
    split = load_split(m1["train"])
    assert [e["object_id"] for e, _ in split] == ["mug-0", "tool-0"]
    assert all(d.cloud.n == 300 for _, d in split)
    ply = tmp_path / "a" / split[0][0]["ply"]
    raw = bytearray(ply.read_bytes())
    raw[-1] ^= 1
    ply.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_split(m1["train"])
    assert regenerate(m1["train"], tmp_path / "d") == []

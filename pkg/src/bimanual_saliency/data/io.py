"""File formats: PLY point clouds, annotation documents and dataset manifests.

PLY files carry one ``vertex`` element. Written properties, in order:

    property float x
    property float y
    property float z
    property float saliency        (optional)
    property uchar label           (optional)
    property uchar red/green/blue  (optional, saliency through the blue->red map)

Both ``ascii 1.0`` and ``binary_little_endian 1.0`` are read and written.
Coordinates and saliency are stored as float32, so a round trip is exact for
float32 values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from ..geom import PointCloud, check_labels, check_saliency
from .shapes import CATEGORIES, N_POINTS, gen_object


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_FORMATS = ("ascii", "binary_little_endian")


@dataclass
class PlyData:
    cloud: PointCloud
    saliency: np.ndarray | None = None
    labels: np.ndarray | None = None
    colors: np.ndarray | None = None


def saliency_colors(s) -> np.ndarray:
    """Linear blue (0) to red (1) colormap, as uint8 RGB rows."""
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    red = np.rint(255.0 * s)
    return np.column_stack([red, np.zeros_like(red), 255.0 - red]).astype(np.uint8)


def save_ply(path, cloud: PointCloud, saliency=None, labels=None, colors: bool = False, fmt: str = "binary_little_endian") -> None:
    if fmt not in _FORMATS:
        raise ValueError(f"unsupported PLY format {fmt!r}")
    n = cloud.n
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    columns = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    if saliency is not None:
        saliency = check_saliency(saliency, n)
        fields.append(("saliency", "f4"))
        columns.append(saliency)
    if labels is not None:
        labels = check_labels(labels, n)
        fields.append(("label", "u1"))
        columns.append(labels)
    if colors:
        if saliency is None:
            raise ValueError("colored export needs a saliency map")
        rgb = saliency_colors(saliency)
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        columns += [rgb[:, 0], rgb[:, 1], rgb[:, 2]]

    names = {v: k for k, v in reversed(list(_PLY_TYPES.items()))}
    header = ["ply", f"format {fmt} 1.0", "comment bimanual-saliency", f"element vertex {n}"]
    header += [f"property {names[t]} {name}" for name, t in fields]
    header.append("end_header")

    table = np.empty(n, dtype=[(name, "<" + t) for name, t in fields])
    for (name, _), col in zip(fields, columns):
        table[name] = col
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if fmt == "binary_little_endian":
            fh.write(table.tobytes())
        else:
            for row in table:
                fh.write((" ".join(_ascii_value(row[name], t) for name, t in fields) + "\n").encode("ascii"))


def _ascii_value(value, t: str) -> str:
    # float32 repr round-trips exactly
    return repr(float(np.float32(value))) if t == "f4" else str(int(value))


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise DataError("not a PLY file")
    fmt, n, props, in_vertex = None, None, [], False
    while True:
        line = fh.readline()
        if not line:
            raise DataError("PLY header has no end_header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) != 3 or tokens[1] not in _FORMATS:
                raise DataError(f"unsupported PLY format line: {' '.join(tokens)}")
            fmt = tokens[1]
        elif key == "element":
            try:
                count = int(tokens[2])
            except (IndexError, ValueError) as exc:
                raise DataError("malformed element line") from exc
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                if n is not None:
                    raise DataError("duplicate vertex element")
                n = count
            elif n is None and count > 0:
                # data of an earlier element would precede the vertices
                raise DataError(f"unsupported element {tokens[1]!r} before vertices")
        elif key == "property":
            if not in_vertex:
                # elements after the vertices (faces, edges) are skipped
                continue
            if len(tokens) != 3 or tokens[1] == "list":
                raise DataError("list properties are not supported on vertices")
            if tokens[1] not in _PLY_TYPES:
                raise DataError(f"unknown property type {tokens[1]!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise DataError(f"unexpected header keyword {key!r}")
    if fmt is None or n is None:
        raise DataError("PLY header lacks format or vertex element")
    missing = {"x", "y", "z"} - {p for p, _ in props}
    if missing:
        raise DataError(f"vertex element lacks {sorted(missing)}")
    return fmt, n, props


def load_ply(path) -> PlyData:
    with open(path, "rb") as fh:
        fmt, n, props = _parse_header(fh)
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        if fmt == "binary_little_endian":
            raw = fh.read(n * dtype.itemsize)
            if len(raw) != n * dtype.itemsize:
                raise DataError(f"expected {n} vertices, file is truncated")
            table = np.frombuffer(raw, dtype=dtype)
        else:
            rows = [line.split() for line in fh.read().decode("ascii").splitlines() if line.strip()]
            if len(rows) < n or any(len(r) != len(props) for r in rows[:n]):
                raise DataError(f"expected {n} vertex rows of {len(props)} values")
            table = np.empty(n, dtype=dtype)
            for k, (name, t) in enumerate(props):
                table[name] = [r[k] for r in rows[:n]]
    pts = np.column_stack([table["x"], table["y"], table["z"]]).astype(np.float64)
    names = dtype.names
    saliency = table["saliency"].astype(np.float64) if "saliency" in names else None
    labels = table["label"].astype(np.int64) if "label" in names else None
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.column_stack([table["red"], table["green"], table["blue"]]).astype(np.uint8)
    try:
        cloud = PointCloud(pts)
        if labels is not None:
            check_labels(labels, n)
        if saliency is not None:
            check_saliency(saliency, n)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return PlyData(cloud, saliency, labels, colors)


# ---------------------------------------------------------------- annotations

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "records"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": "bimanual-annotations"},
        "version": {"const": 1},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["object_id", "num_points", "labels"],
                "additionalProperties": False,
                "properties": {
                    "object_id": {"type": "string", "minLength": 1},
                    "num_points": {"type": "integer", "minimum": 1},
                    "labels": {"type": "array", "items": {"enum": [0, 1, 2]}},
                    "saliency": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "annotator": {"type": "string"},
                },
            },
        },
    },
}


@dataclass
class AnnotationRecord:
    object_id: str
    labels: np.ndarray
    saliency: np.ndarray | None = None
    annotator: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.saliency is not None:
            self.saliency = np.asarray(self.saliency, dtype=np.float64)

    @property
    def num_points(self) -> int:
        return int(self.labels.size)

    def to_json(self) -> dict:
        out = dict(object_id=self.object_id, num_points=self.num_points, labels=self.labels.tolist())
        if self.saliency is not None:
            out["saliency"] = self.saliency.tolist()
        if self.annotator:
            out["annotator"] = self.annotator
        return out


def _validate_records(records: list[AnnotationRecord], bimanual: bool) -> None:
    for rec in records:
        try:
            check_labels(rec.labels, rec.num_points, annotation=bimanual)
            if rec.saliency is not None:
                check_saliency(rec.saliency, rec.num_points)
        except ValueError as exc:
            raise DataError(f"record {rec.object_id!r}: {exc}") from exc


def save_annotations(path, records: list[AnnotationRecord], bimanual: bool = True) -> None:
    _validate_records(records, bimanual)
    doc = dict(format="bimanual-annotations", version=1, records=[r.to_json() for r in records])
    Path(path).write_text(json.dumps(doc))


def load_annotations(path, bimanual: bool = True) -> list[AnnotationRecord]:
    try:
        doc = json.loads(Path(path).read_text())
        jsonschema.validate(doc, ANNOTATION_SCHEMA)
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    records = []
    for r in doc["records"]:
        if len(r["labels"]) != r["num_points"]:
            raise DataError(f"record {r['object_id']!r}: {len(r['labels'])} labels for {r['num_points']} points")
        if "saliency" in r and len(r["saliency"]) != r["num_points"]:
            raise DataError(f"record {r['object_id']!r}: saliency length mismatch")
        records.append(AnnotationRecord(r["object_id"], r["labels"], r.get("saliency"), r.get("annotator", "")))
    _validate_records(records, bimanual)
    return records


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetConfig:
    categories: tuple[str, ...] = ("mug", "pot", "pan", "tool")
    train_count: int = 2
    test_count: int = 1
    seed: int = 0
    n_points: int = N_POINTS
    fmt: str = "binary_little_endian"

    def __post_init__(self):
        self.categories = tuple(self.categories)
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown categories {sorted(unknown)}")
        if self.train_count < 1 or self.test_count < 0:
            raise ValueError("train_count must be >= 1 and test_count >= 0")

    def seeds(self, split: str) -> list[int]:
        # train seeds are even and test seeds odd, so the splits never share an object
        count = self.train_count if split == "train" else self.test_count
        parity = 0 if split == "train" else 1
        return [2 * (self.seed + i) + parity for i in range(count)]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_object(out_dir: Path, category: str, seed: int, n_points: int, fmt: str) -> dict:
    _, cloud, labels, s_o = gen_object(category, seed, n_points)
    object_id = f"{category}-{seed}"
    ply = out_dir / f"{object_id}.ply"
    save_ply(ply, cloud, s_o, labels, fmt=fmt)
    return dict(object_id=object_id, category=category, seed=seed, n_points=n_points, ply=ply.name, sha256=sha256_file(ply))


def make_dataset(out_dir, config: DatasetConfig) -> dict[str, Path]:
    """Generate train/test objects and write one manifest per split.

    Returns {split: manifest path}. Train and test seeds never overlap, and
    output bytes depend only on the config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split in ("train", "test"):
        entries = [
            write_object(out_dir, cat, seed, config.n_points, config.fmt)
            for cat in config.categories
            for seed in config.seeds(split)
        ]
        doc = dict(format="bimanual-manifest", version=1, split=split, fmt=config.fmt, entries=entries)
        path = out_dir / f"{split}.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        manifests[split] = path
    return manifests


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "split", "entries"],
    "properties": {
        "format": {"const": "bimanual-manifest"},
        "version": {"const": 1},
        "split": {"enum": ["train", "test"]},
        "fmt": {"enum": list(_FORMATS)},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["object_id", "category", "seed", "n_points", "ply", "sha256"],
                "properties": {
                    "category": {"enum": list(CATEGORIES)},
                    "seed": {"type": "integer"},
                    "n_points": {"type": "integer", "minimum": 3},
                },
            },
        },
    },
}


def load_manifest(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return doc


def load_split(manifest_path, verify: bool = True) -> list[tuple[dict, PlyData]]:
    """Load every object of a manifest, optionally checking file hashes."""
    manifest_path = Path(manifest_path)
    doc = load_manifest(manifest_path)
    out = []
    for entry in doc["entries"]:
        ply = manifest_path.parent / entry["ply"]
        if not ply.exists():
            raise DataError(f"missing object file {ply}")
        if verify and sha256_file(ply) != entry["sha256"]:
            raise DataError(f"hash mismatch for {ply}")
        data = load_ply(ply)
        if data.labels is None or data.saliency is None:
            raise DataError(f"{ply} lacks labels or saliency")
        out.append((entry, data))
    return out


def regenerate(manifest_path, out_dir) -> list[str]:
    """Rebuild every object of a manifest into ``out_dir``; returns ids whose bytes differ."""
    doc = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fmt = doc.get("fmt", "binary_little_endian")
    return [
        e["object_id"]
        for e in doc["entries"]
        if write_object(out_dir, e["category"], e["seed"], e["n_points"], fmt)["sha256"] != e["sha256"]
    ]

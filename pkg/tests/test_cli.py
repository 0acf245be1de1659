import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from bimanual_saliency.cli import OPTIONS, build_parser, main
from bimanual_saliency.data.io import AnnotationRecord, load_ply, load_split, save_annotations
from bimanual_saliency.nets import ModelWeights, NetConfig, save_weights
from bimanual_saliency.train import TrainConfig, prepare_object, train_joint

SMALL = NetConfig(encoder_widths=(64, 16), decoder_widths=(16,), refine_widths=(16, 16))


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "resolved_config.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def gen(out, *extra):
    return main(["gen-data", "--out", str(out), "--categories", "mug,pot", "--train-count", "1",
                 "--test-count", "1", "--n-points", "300", *extra])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert gen(out) == 0
    return out


@pytest.fixture(scope="module")
def zero_weights(tmp_path_factory):
    """Weights whose correction and saliency heads output exactly zero."""
    w = ModelWeights(SMALL, seed=0)
    w.zero_head("cm_dec")
    w.zero_head("dec_s")
    path = tmp_path_factory.mktemp("w") / "zero.bgsw"
    save_weights(w, path)
    return path


@pytest.fixture(scope="module")
def trained_weights(tmp_path_factory, dataset):
    """A briefly trained classifier that separates the two hands."""
    cfg = TrainConfig(epochs=300, K=10**6, lr=1e-2, n_cand=8)
    ds = [prepare_object(e["object_id"], d.cloud, d.labels, d.saliency, None, 8) for e, d in load_split(dataset / "train.json")]
    w = ModelWeights(SMALL, seed=0)
    w.zero_head("cm_dec")
    train_joint(w, ds, cfg)
    path = tmp_path_factory.mktemp("w") / "trained.bgsw"
    save_weights(w, path)
    return path


def test_gen_data_is_deterministic(tmp_path):
    assert gen(tmp_path / "a") == 0 and gen(tmp_path / "b") == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert gen(tmp_path / "c", "--seed", "1") == 0
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")
    # the echoed config differs only in the output path
    echoed = [json.loads((tmp_path / d / "resolved_config.json").read_text()) for d in "ab"]
    assert [e.pop("out") for e in echoed] == [str(tmp_path / "a"), str(tmp_path / "b")]
    assert echoed[0] == echoed[1]


def test_unknown_config_key_is_config_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out": str(tmp_path / "o"), "bogus": 1}))
    assert main(["gen-data", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"out": str(tmp_path / "o"), "seed": "zero"}))
    assert main(["gen-data", "--config", str(cfg)]) == 2
    assert main(["train", "--out", str(tmp_path / "o")]) == 2


def test_flags_override_config_and_config_is_echoed(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out": str(tmp_path / "o"), "seed": 4, "categories": ["mug"], "train_count": 1,
                               "test_count": 1, "n_points": 200}))
    assert main(["gen-data", "--config", str(cfg), "--seed", "9"]) == 0
    echoed = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert echoed["seed"] == 9 and echoed["categories"] == ["mug"]


def test_help_lists_every_key_with_defaults():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, options in OPTIONS.items():
        text = " ".join(sub.choices[name].format_help().split())
        for opt in options:
            assert opt.flag in text
            assert f"(default: {opt.default})" in text
    train = {o.name: o.default for o in OPTIONS["train"]}
    assert (train["lambda1"], train["lambda2"], train["w1"], train["w2"], train["w3"], train["w4"]) == (1, 1.5, 1, 1, 2, 1.5)
    assert (train["sigma_s"], train["sigma_p"]) == (0.8, 0.12)
    ev = {o.name: o.default for o in OPTIONS["eval"]}
    assert (ev["tau_c"], ev["w_r"]) == (0.7, 0.12)


def test_infer_length_mismatch_is_data_error(tmp_path, dataset, zero_weights):
    ply = next(dataset.rglob("*.ply"))
    n = load_ply(ply).cloud.n
    ann = tmp_path / "s.json"
    save_annotations(ann, [AnnotationRecord("x", [0] * (n - 1), [0.5] * (n - 1))], bimanual=False)
    args = ["infer", "--weights", str(zero_weights), "--input", str(ply), "--out", str(tmp_path / "o")]
    assert main(args + ["--saliency", str(ann)]) == 3
    assert main(args) == 0
    rec = json.loads((tmp_path / "o" / "contacts.jsonl").read_text())
    assert rec["n_points"] == n and not set(rec["left"]) & set(rec["right"])
    assert main(["infer", "--weights", str(tmp_path / "missing.bgsw"), "--input", str(ply), "--out", str(tmp_path / "p")]) == 3


def test_eval_on_zero_heads_matches_single_handed_baseline(tmp_path, dataset, zero_weights):
    manifest = dataset / "test.json"
    assert main(["eval", "--weights", str(zero_weights), "--data", str(manifest), "--out", str(tmp_path),
                 "--refine", "false"]) == 0
    expected = {}
    for entry, d in load_split(manifest):
        labeled = [i for i in range(d.cloud.n) if d.labels[i] != 0]
        hits = [i for i in labeled if min(max(d.saliency[i], 0.0), 1.0) >= 0.7]
        expected[entry["object_id"]] = 100.0 * len(hits) / len(labeled)
    records = [json.loads(line) for line in (tmp_path / "eval_report.jsonl").read_text().splitlines()]
    assert [r["object_id"] for r in records] == sorted(expected)
    for r in records:
        assert r["bcacr"] == pytest.approx(expected[r["object_id"]], abs=1e-9)
    summary = json.loads((tmp_path / "eval_summary.json").read_text())
    assert summary["mean_bcacr"] == pytest.approx(np.mean(list(expected.values())))


def test_refine_and_export_ply(tmp_path, dataset, trained_weights):
    ply = dataset / "mug-0.ply"
    assert main(["refine", "--weights", str(trained_weights), "--input", str(ply), "--out", str(tmp_path / "r"),
                 "--max-iters", "50"]) == 0
    rec = json.loads((tmp_path / "r" / "refine_report.jsonl").read_text())
    assert rec["left"] and rec["right"] and not set(rec["left"]) & set(rec["right"])
    out = tmp_path / "colored.ply"
    assert main(["export-ply", "--input", str(tmp_path / "r" / "refined.ply"), "--out", str(out)]) == 0
    d = load_ply(out)
    assert d.colors is not None and d.colors.shape == (d.cloud.n, 3)


def test_train_smoke(tmp_path, dataset):
    out = tmp_path / "t"
    args = ["train", "--data", str(dataset / "train.json"), "--out", str(out), "--epochs", "4", "--cm-epochs", "2",
            "--K", "2", "--M", "1", "--m-max", "2", "--n-points", "64", "--n-cand", "4"]
    assert main(args) == 0
    assert (out / "weights.bgsw").is_file()
    assert len((out / "trace.jsonl").read_text().splitlines()) >= 3
    assert main(args[:3] + ["--out", str(tmp_path / "u"), "--net", "huge"]) == 2

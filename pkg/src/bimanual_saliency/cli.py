"""Command-line interface.

Every subcommand takes an optional ``--config file.json`` whose keys are the
subcommand's options (unknown keys are rejected); flags given on the command
line override the file. The resolved configuration is logged and, for
commands with an output directory, written next to the results.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
The log level comes from the ``BIMANUAL_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .data.io import (
    DataError,
    DatasetConfig,
    load_annotations,
    load_ply,
    load_split,
    make_dataset,
    save_ply,
)
from .geom import GravityLine, PointCloud
from .losses import LossWeights
from .nets import COMPACT, ModelWeights, NetConfig, load_weights, save_weights
from .pipeline import (
    RefineConfig,
    balance_distance,
    bcacr,
    cluster_contacts,
    correct_saliency,
    grasp_coverage,
    mask_labels,
    physics_refine,
    predict,
)
from .train import TrainConfig, prepare_object, train_cm, train_joint, write_trace

log = logging.getLogger("bimanual_saliency")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
LOG_ENV = "BIMANUAL_LOG_LEVEL"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Option:
    name: str
    kind: type
    default: object
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    def schema(self) -> dict:
        if self.kind is bool:
            return {"type": "boolean"}
        if self.kind is int:
            return {"type": ["integer", "null"]} if self.default is None else {"type": "integer"}
        if self.kind is float:
            return {"type": "number"}
        if self.kind is list:
            return {"type": "array", "items": {"type": "string"}}
        return {"type": ["string", "null"]}


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


_LW = LossWeights()
_TC = TrainConfig()
_RC = RefineConfig()

REFINE_OPTIONS = [
    Option("w_r", float, _RC.w_r, "refinement stop threshold on the balance distance"),
    Option("max_iters", int, _RC.max_iters, "refinement iteration cap"),
    Option("refine_lr", float, _RC.lr, "refinement learning rate"),
    Option("refine_temp", float, _RC.temp, "initial soft-selection temperature"),
    Option("mu", float, _RC.mu, "proximity penalty on the adjustment R"),
]

OPTIONS: dict[str, list[Option]] = {
    "gen-data": [
        Option("out", str, None, "output directory"),
        Option("categories", list, ["mug", "pot", "pan", "tool"], "comma-separated object categories"),
        Option("train_count", int, 2, "training objects per category"),
        Option("test_count", int, 1, "test objects per category"),
        Option("seed", int, 0, "base seed"),
        Option("n_points", int, 5000, "points sampled per object"),
        Option("fmt", str, "binary_little_endian", "PLY encoding: ascii or binary_little_endian"),
    ],
    "train": [
        Option("data", str, None, "training manifest (train.json from gen-data)"),
        Option("out", str, None, "output directory"),
        Option("epochs", int, _TC.epochs, "joint training epochs"),
        Option("cm_epochs", int, _TC.cm_epochs, "correction-module epochs"),
        Option("lr", float, _TC.lr, "learning rate"),
        Option("optimizer", str, _TC.optimizer, "adam or sgd"),
        Option("K", int, _TC.K, "epoch of the first saliency update"),
        Option("M", int, _TC.M, "epochs between saliency updates"),
        Option("m_max", int, _TC.m_max, "maximum number of saliency updates"),
        Option("sigma_s", float, _TC.sigma_s, "stop rule: mean labeled saliency threshold"),
        Option("sigma_p", float, _TC.sigma_p, "stop rule: balance distance threshold"),
        Option("lambda1", float, _LW.lambda1, "weight of the corresponding-vector adjustment term"),
        Option("lambda2", float, _LW.lambda2, "weight of the saliency-preservation term"),
        Option("w1", float, _LW.w1, "weight of L_c"),
        Option("w2", float, _LW.w2, "weight of L_a"),
        Option("w3", float, _LW.w3, "weight of L_p"),
        Option("w4", float, _LW.w4, "weight of the classification term"),
        Option("softsel_temp", float, _LW.softsel_temp, "initial soft-selection temperature"),
        Option("temp_decay_every", int, _TC.temp_decay_every, "epochs between temperature halvings"),
        Option("n_points", int, None, "subsample each object to this many points (default: all)"),
        Option("n_cand", int, _TC.n_cand, "candidate vectors per labeled point"),
        Option("use_balance", bool, True, "include the physics-balance loss"),
        Option("net", str, "compact", "network widths: compact or full"),
        Option("bspn_saliency_input", bool, True, "append S as a fourth BSPN encoder input"),
        Option("checkpoint_every", int, 0, "save weights every N epochs (0: never)"),
        Option("seed", int, 0, "seed for initialization and sampling"),
    ],
    "infer": [
        Option("weights", str, None, "trained weight file"),
        Option("input", str, None, "object PLY; its saliency property is the single-handed map"),
        Option("saliency", str, None, "annotation JSON supplying the single-handed map instead"),
        Option("out", str, None, "output directory"),
        Option("tau", float, 0.5, "saliency mask threshold"),
        Option("passes", int, None, "BSPN passes (default: from the weight file)"),
    ],
    "refine": [
        Option("weights", str, None, "trained weight file"),
        Option("input", str, None, "object PLY; its saliency property is the single-handed map"),
        Option("saliency", str, None, "annotation JSON supplying the single-handed map instead"),
        Option("out", str, None, "output directory"),
        Option("passes", int, None, "BSPN passes (default: from the weight file)"),
        *REFINE_OPTIONS,
        Option("seed", int, 0, "clustering seed"),
    ],
    "eval": [
        Option("weights", str, None, "trained weight file"),
        Option("data", str, None, "dataset manifest"),
        Option("out", str, None, "output directory"),
        Option("tau_c", float, 0.7, "coverage threshold of BCACR"),
        Option("passes", int, None, "BSPN passes (default: from the weight file)"),
        Option("refine", bool, True, "also run refinement and clustering"),
        *REFINE_OPTIONS,
        Option("seed", int, 0, "clustering seed"),
    ],
    "export-ply": [
        Option("input", str, None, "PLY with a saliency property"),
        Option("out", str, None, "output PLY path"),
        Option("fmt", str, "ascii", "PLY encoding: ascii or binary_little_endian"),
    ],
}

REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "infer": ("weights", "input", "out"),
    "refine": ("weights", "input", "out"),
    "eval": ("weights", "data", "out"),
    "export-ply": ("input", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bimanual-saliency", description="Bimanual grasp saliency maps and contacts.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in OPTIONS.items():
        p = sub.add_parser(name, help=f"{name} (see {name} --help)")
        p.add_argument("--config", default=None, help="JSON file with option values")
        for opt in options:
            conv = {bool: _bool, list: _list}.get(opt.kind, opt.kind)
            # parsed default is None so that only explicit flags override the file
            p.add_argument(opt.flag, dest=opt.name, type=conv, default=None, help=f"{opt.help} (default: {opt.default})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    options = OPTIONS[command]
    resolved = {o.name: o.default for o in options}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        schema = {
            "type": "object",
            "additionalProperties": False,
            "properties": {o.name: o.schema() for o in options},
        }
        try:
            jsonschema.validate(doc, schema)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"{args.config}: {exc.message}") from exc
        resolved.update(doc)
    for o in options:
        value = getattr(args, o.name)
        if value is not None:
            resolved[o.name] = value
    missing = [k for k in REQUIRED[command] if resolved.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s) {', '.join(missing)}")
    return resolved


def _echo(cfg: dict, out_dir: Path | None) -> None:
    text = json.dumps(cfg, sort_keys=True)
    log.info("resolved config: %s", text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _refine_config(cfg: dict) -> RefineConfig:
    try:
        return RefineConfig(w_r=cfg["w_r"], max_iters=cfg["max_iters"], lr=cfg["refine_lr"], temp=cfg["refine_temp"], mu=cfg["mu"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_weights(path) -> ModelWeights:
    try:
        return load_weights(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load weights {path}: {exc}") from exc


def _load_object(cfg: dict):
    """Returns (cloud, single-handed map, labels or None) for infer/refine."""
    try:
        data = load_ply(cfg["input"])
    except OSError as exc:
        raise DataError(str(exc)) from exc
    s_o = data.saliency
    if cfg.get("saliency"):
        records = load_annotations(cfg["saliency"], bimanual=False)
        if len(records) != 1 or records[0].saliency is None:
            raise DataError(f"{cfg['saliency']}: expected one record with a saliency array")
        s_o = records[0].saliency
    if s_o is None:
        raise DataError("no single-handed saliency: the PLY has none and --saliency was not given")
    if len(s_o) != data.cloud.n:
        raise DataError(f"saliency has {len(s_o)} values for a cloud of {data.cloud.n} points")
    return data.cloud, np.asarray(s_o, dtype=np.float64), data.labels


def _passes(weights: ModelWeights, cfg: dict) -> int:
    return int(cfg["passes"]) if cfg.get("passes") is not None else int(weights.meta.get("inference_passes", 1))


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict) -> None:
    out = Path(cfg["out"])
    _echo(cfg, out)
    try:
        dcfg = DatasetConfig(tuple(cfg["categories"]), cfg["train_count"], cfg["test_count"], cfg["seed"], cfg["n_points"], cfg["fmt"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if dcfg.fmt not in ("ascii", "binary_little_endian"):
        raise ConfigError(f"unknown PLY format {dcfg.fmt!r}")
    for split, path in make_dataset(out, dcfg).items():
        log.info("%s manifest: %s", split, path)


def cmd_train(cfg: dict) -> None:
    out = Path(cfg["out"])
    _echo(cfg, out)
    if cfg["net"] not in ("compact", "full"):
        raise ConfigError("net must be compact or full")
    try:
        loss = LossWeights(**{k: cfg[k] for k in ("lambda1", "lambda2", "w1", "w2", "w3", "w4", "softsel_temp")})
        tcfg = TrainConfig(
            epochs=cfg["epochs"], cm_epochs=cfg["cm_epochs"], lr=cfg["lr"], optimizer=cfg["optimizer"],
            K=cfg["K"], M=cfg["M"], m_max=cfg["m_max"], sigma_s=cfg["sigma_s"], sigma_p=cfg["sigma_p"],
            seed=cfg["seed"], loss=loss, temp_decay_every=cfg["temp_decay_every"], n_points=cfg["n_points"],
            n_cand=cfg["n_cand"], use_balance=cfg["use_balance"], checkpoint_every=cfg["checkpoint_every"],
            checkpoint_dir=str(out / "checkpoints"),
        )
        widths = COMPACT if cfg["net"] == "compact" else {}
        net = NetConfig(**widths, bspn_saliency_input=cfg["bspn_saliency_input"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    dataset = [
        prepare_object(e["object_id"], d.cloud, d.labels, d.saliency, tcfg.n_points, tcfg.n_cand, tcfg.seed)
        for e, d in load_split(cfg["data"])
    ]
    weights = ModelWeights(net, seed=tcfg.seed)
    weights.meta["train_config"] = tcfg.to_dict()
    cm_hist = train_cm(weights, dataset, tcfg)
    log.info("correction module: loss %.4g -> %.4g", cm_hist[0], cm_hist[-1])
    state = train_joint(weights, dataset, tcfg, on_epoch=_progress(tcfg.epochs))
    log.info("joint training: %d epochs, %d saliency updates, stopped=%s", state.epoch + 1, state.t, state.stopped)
    save_weights(weights, out / "weights.bgsw")
    write_trace([{"epoch": i, "l_correct": v} for i, v in enumerate(cm_hist)], out / "cm_trace.jsonl")
    write_trace(state.history, out / "trace.jsonl")


def _progress(epochs: int):
    step = max(1, epochs // 20)

    def report(rec: dict) -> None:
        if rec["epoch"] % step == 0 or rec.get("updated"):
            log.info("epoch %d t=%s loss=%.4g", rec["epoch"], rec.get("t"), rec.get("l_classify", float("nan")))

    return report


def cmd_infer(cfg: dict) -> None:
    out = Path(cfg["out"])
    _echo(cfg, out)
    weights = _load_weights(cfg["weights"])
    cloud, s_o, _ = _load_object(cfg)
    s = correct_saliency(weights, cloud, s_o)
    b, labels_pred = predict(weights, cloud, s, _passes(weights, cfg))
    masked = mask_labels(b, labels_pred, cfg["tau"])
    save_ply(out / "prediction.ply", cloud, b, masked)
    rec = dict(
        input=str(cfg["input"]),
        n_points=cloud.n,
        right=np.flatnonzero(masked == 1).tolist(),
        left=np.flatnonzero(masked == 2).tolist(),
    )
    _write_jsonl(out / "contacts.jsonl", [rec])
    log.info("masked contacts: %d right, %d left", len(rec["right"]), len(rec["left"]))


def refine_object(weights, cloud: PointCloud, s_o, rcfg: RefineConfig, passes: int, seed: int) -> dict:
    """Prediction, refinement and clustering for one object; returns arrays plus a report."""
    gravity = GravityLine.through_center(cloud)
    s = correct_saliency(weights, cloud, s_o)
    b, labels_pred = predict(weights, cloud, s, passes)
    if not (np.any(labels_pred == 1) and np.any(labels_pred != 1)):
        raise DataError("prediction has no right-hand point or only right-hand points; nothing to refine")
    b_r, trace = physics_refine(weights, cloud, b, labels_pred, rcfg, gravity)
    left, right = cluster_contacts(cloud, b_r, labels_pred, seed)
    contact_labels = np.zeros(cloud.n, dtype=np.int64)
    contact_labels[right], contact_labels[left] = 1, 2
    report = dict(
        balance_pre=trace.distance[0],
        balance_post=balance_distance(cloud, left, right, gravity, b_r),
        pair_balance_post=min(trace.distance),
        refine_iterations=trace.iterations,
        refine_rejected=trace.rejected,
        warning=trace.warning,
    )
    return dict(b=b, b_r=b_r, labels_pred=labels_pred, left=left, right=right, contact_labels=contact_labels, report=report)


def cmd_refine(cfg: dict) -> None:
    out = Path(cfg["out"])
    _echo(cfg, out)
    rcfg = _refine_config(cfg)
    weights = _load_weights(cfg["weights"])
    cloud, s_o, _ = _load_object(cfg)
    res = refine_object(weights, cloud, s_o, rcfg, _passes(weights, cfg), cfg["seed"])
    save_ply(out / "refined.ply", cloud, res["b_r"], res["contact_labels"])
    rec = dict(input=str(cfg["input"]), right=res["right"].tolist(), left=res["left"].tolist(), **res["report"])
    _write_jsonl(out / "refine_report.jsonl", [rec])
    log.info("balance %.4f -> %.4f in %d iterations", rec["balance_pre"], rec["pair_balance_post"], rec["refine_iterations"])


def cmd_eval(cfg: dict) -> None:
    out = Path(cfg["out"])
    _echo(cfg, out)
    rcfg = _refine_config(cfg)
    weights = _load_weights(cfg["weights"])
    passes = _passes(weights, cfg)
    records = []
    for entry, data in sorted(load_split(cfg["data"]), key=lambda item: item[0]["object_id"]):
        cloud, s_o, labels = data.cloud, data.saliency, data.labels
        rec = dict(object_id=entry["object_id"])
        if cfg["refine"]:
            res = refine_object(weights, cloud, s_o, rcfg, passes, cfg["seed"])
            b = res["b"]
            rec.update(res["report"])
            rec["bcacr_refined"] = bcacr(res["b_r"], labels, cfg["tau_c"])
            single = np.flatnonzero(s_o >= cfg["tau_c"])
            if single.size:
                rec["grasp_coverage"] = grasp_coverage(single, np.concatenate([res["left"], res["right"]]))
        else:
            b, _ = predict(weights, cloud, correct_saliency(weights, cloud, s_o), passes)
        rec["bcacr"] = bcacr(b, labels, cfg["tau_c"])
        records.append(rec)
        log.info("%s: BCACR %.1f%%", rec["object_id"], rec["bcacr"])
    _write_jsonl(out / "eval_report.jsonl", records)
    summary = dict(objects=len(records), mean_bcacr=float(np.mean([r["bcacr"] for r in records])))
    if cfg["refine"]:
        summary["mean_balance_post"] = float(np.mean([r["pair_balance_post"] for r in records]))
        summary["warnings"] = int(sum(r["warning"] for r in records))
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


def cmd_export_ply(cfg: dict) -> None:
    _echo(cfg, None)
    if cfg["fmt"] not in ("ascii", "binary_little_endian"):
        raise ConfigError(f"unknown PLY format {cfg['fmt']!r}")
    data = load_ply(cfg["input"])
    if data.saliency is None:
        raise DataError(f"{cfg['input']} has no saliency property to color")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ply(out, data.cloud, data.saliency, data.labels, colors=True, fmt=cfg["fmt"])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "export-ply": cmd_export_ply,
}


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except FloatingPointError as exc:
        log.error("numerical error: %s", exc)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline driver.

Every run resolves its options (built-in defaults < config file < flags),
executes, and writes a manifest (resolved options + content hashes of the
input files) next to its artifacts, so any artifact can be regenerated
byte-for-byte from the manifest alone via ``flowcf rerun``.

Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import data as dt
from . import explainer as ex
from . import metrics as mt
from . import retrain as rt
from .model import (
    GraphTransformer,
    ModelConfig,
    NumericalError,
    TrainConfig,
    clone_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    stack_windows,
    train,
)

log = logging.getLogger("flowcf")

MANIFEST_SCHEMA = "flowcf-manifest-v1"
OUT_ROOT_ENV = "FLOWCF_OUT"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems instead of argparse's 2
        raise UsageError(message)


# ---- small IO helpers -------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(canonical_json(obj))


def write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()


def write_manifest(out_dir: Path, command: str, options: dict, inputs: list[str]) -> None:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "options": options,
        "inputs": {p: sha256_file(p) for p in inputs},
    }
    write_json(out_dir / "manifest.json", manifest)


def out_dir_for(options: dict, command: str) -> Path:
    out = options.get("out")
    if not out:
        root = os.environ.get(OUT_ROOT_ENV, "runs")
        out = str(Path(root) / command)
        options["out"] = out
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_config_file(path: str) -> dict:
    """KEY=VALUE lines; '#' starts a comment. Values stay strings and are
    coerced by the same converters as the flags."""
    values = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected KEY=VALUE, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(value, kind):
    if value is None or not isinstance(value, str):
        return value
    if kind is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return kind(value)


def resolve_options(args: argparse.Namespace, defaults: dict, kinds: dict) -> dict:
    """defaults < config file < explicit flags."""
    options = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        file_values = parse_config_file(config_path)
        for key, value in file_values.items():
            if key in options:
                options[key] = _coerce(value, kinds.get(key, str))
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            options[key] = flag_value
    return options


# ---- shared loading ----------------------------------------------------------


def _load_pair(options: dict) -> tuple:
    bundle = dt.load_bundle(options["bundle"])
    model = load_checkpoint(options["model"])
    if model.n_nodes != bundle.graph.n_nodes:
        raise UsageError(
            f"checkpoint has {model.n_nodes} nodes but bundle has {bundle.graph.n_nodes}"
        )
    return bundle, model


def sample_windows(bundle: dt.DatasetBundle, split: str, count: int, seed: int) -> list:
    pool = bundle.split(split)
    if not pool:
        raise UsageError(f"split {split!r} is empty")
    count = min(count, len(pool))
    idx = np.random.default_rng(seed).choice(len(pool), size=count, replace=False)
    return [pool[i] for i in sorted(idx.tolist())]


def _explainer_config(options: dict, dimension: str, seed: int) -> ex.ExplainerConfig:
    return ex.ExplainerConfig(
        dimension=dimension,
        beta=options["beta"],
        alpha=options["alpha"],
        iterations=options["iterations"],
        threshold=options["threshold"],
        validity_epsilon=options["tau_v"],
        validity_relative=options["tau_v_relative"],
        seed=seed,
        mask_init=options["mask_init"],
        jitter=options["jitter"],
        mask_targets=tuple(options["mask_targets"].split(",")),
    )


# ---- commands -----------------------------------------------------------------

SYNTH_DEFAULTS = {
    "nodes": 12, "density": 0.25, "length": 2000, "window": 12, "channels": 1,
    "seed": 0, "noise": 0.05, "signal": 2.0, "planted_edges": "", "planted_slices": "",
    "out": None,
}
SYNTH_KINDS = {"nodes": int, "density": float, "length": int, "window": int, "channels": int,
               "seed": int, "noise": float, "signal": float, "planted_edges": str,
               "planted_slices": str, "out": str}


def run_synth(options: dict) -> int:
    out = out_dir_for(options, "synth")
    planted_edges = tuple(
        tuple(int(v) for v in pair.split("-")) for pair in options["planted_edges"].split(",") if pair
    )
    planted_slices = tuple(int(v) for v in options["planted_slices"].split(",") if v)
    spec = dt.SyntheticSpec(
        n_nodes=options["nodes"], edge_density=options["density"],
        planted_edges=planted_edges, planted_slices=planted_slices,
        signal_strength=options["signal"], noise_std=options["noise"],
        series_length=options["length"], seed=options["seed"],
        window=options["window"], channels=options["channels"],
    )
    bundle = dt.generate(spec)
    dt.save_bundle(bundle, str(out / "bundle.npz"))
    write_json(out / "summary.json", {
        "n_nodes": bundle.graph.n_nodes,
        "n_edges": bundle.graph.edge_count,
        "windows": {"train": len(bundle.train), "val": len(bundle.val), "test": len(bundle.test)},
        "stride": bundle.stride,
    })
    write_manifest(out, "synth", options, inputs=[])
    log.info("bundle written to %s", out / "bundle.npz")
    return 0


INGEST_DEFAULTS = {"adjacency": None, "flow": None, "window": 12, "out": None}
INGEST_KINDS = {"adjacency": str, "flow": str, "window": int, "out": str}


def run_ingest(options: dict) -> int:
    if not options["adjacency"] or not options["flow"]:
        raise UsageError("ingest needs --adjacency and --flow")
    out = out_dir_for(options, "ingest")
    bundle = dt.ingest_csv(options["adjacency"], options["flow"], window=options["window"])
    dt.save_bundle(bundle, str(out / "bundle.npz"))
    write_json(out / "summary.json", {
        "n_nodes": bundle.graph.n_nodes,
        "n_edges": bundle.graph.edge_count,
        "timesteps": int(bundle.series.shape[0]),
        "channels": int(bundle.series.shape[2]),
    })
    write_manifest(out, "ingest", options, inputs=[options["adjacency"], options["flow"]])
    return 0


TRAIN_DEFAULTS = {
    "bundle": None, "epochs": 60, "batch_size": 8, "lr": 1e-3, "seed": 0,
    "hidden": 16, "blocks": 2, "heads": 1, "out": None,
}
TRAIN_KINDS = {"bundle": str, "epochs": int, "batch_size": int, "lr": float, "seed": int,
               "hidden": int, "blocks": int, "heads": int, "out": str}


def run_train(options: dict) -> int:
    if not options["bundle"]:
        raise UsageError("train needs --bundle")
    out = out_dir_for(options, "train")
    bundle = dt.load_bundle(options["bundle"])
    config = ModelConfig(
        hidden=options["hidden"], blocks=options["blocks"], heads=options["heads"],
        channels=bundle.series.shape[2], window=bundle.window, seed=options["seed"],
    )
    model = GraphTransformer(bundle.graph.n_nodes, config)
    result = train(model, bundle, TrainConfig(
        epochs=options["epochs"], batch_size=options["batch_size"],
        lr=options["lr"], seed=options["seed"],
    ))
    save_checkpoint(result.model, str(out / "checkpoint.json"), seed=options["seed"])
    write_csv(out / "history.csv", result.history, ["epoch", "train_mse", "val_mse"])
    write_json(out / "summary.json", {
        "best_val_mse": result.best_val_mse,
        "best_epoch": result.best_epoch,
        "epochs": options["epochs"],
    })
    write_manifest(out, "train", options, inputs=[options["bundle"]])
    return 0


EXPLAIN_DEFAULTS = {
    "bundle": None, "model": None, "dimension": "spatial", "beta": 0.5, "alpha": 0.1,
    "iterations": 300, "threshold": 0.5, "tau_v": None, "tau_v_relative": 0.05,
    "mask_init": 0.5, "jitter": 0.0, "mask_targets": "gcn,geo,sem",
    "seeds": "0", "num_windows": 8, "split": "test", "jobs": 1, "out": None,
}
EXPLAIN_KINDS = {"bundle": str, "model": str, "dimension": str, "beta": float, "alpha": float,
                 "iterations": int, "threshold": float, "tau_v": float, "tau_v_relative": float,
                 "mask_init": float, "jitter": float, "mask_targets": str, "seeds": str,
                 "num_windows": int, "split": str, "jobs": int, "out": str}


def run_explain(options: dict) -> int:
    if not options["bundle"] or not options["model"]:
        raise UsageError("explain needs --bundle and --model")
    out = out_dir_for(options, "explain")
    bundle, model = _load_pair(options)
    seeds = [int(s) for s in options["seeds"].split(",") if s != ""]

    def one(seed: int) -> ex.CounterfactualResult:
        windows = sample_windows(bundle, options["split"], options["num_windows"], seed)
        config = _explainer_config(options, options["dimension"], seed)
        # each job gets a private model so frozen-flag flips cannot race
        return ex.search(clone_model(model), bundle.graph, windows, config, stats=bundle.stats)

    if options["jobs"] > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=options["jobs"]) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]

    for seed, result in zip(seeds, results):
        write_json(out / f"result_{seed}.json", result.to_dict())
        write_csv(out / f"trace_{seed}.csv", result.trace_rows(),
                  ["iteration", "loss_pred", "loss_dist", "distance", "valid"])
    report = mt.explanation_report(results, bundle.graph, explainer_id="mask_search")
    write_json(out / "report.json", report.to_dict())
    write_csv(out / "report_row.csv", [report.csv_row()],
              ["explainer", "n", "fidelity", "e_size", "sparsity", "delta_mae"])
    write_manifest(out, "explain", options, inputs=[options["bundle"], options["model"]])
    return 0


BASELINE_DEFAULTS = {
    "bundle": None, "model": None, "kind": "random", "seeds": "0", "center": None,
    "top_k": None, "beta": 0.5, "alpha": 0.1, "iterations": 300, "threshold": 0.5,
    "tau_v": None, "tau_v_relative": 0.05, "mask_init": 0.5, "jitter": 0.0,
    "mask_targets": "gcn,geo,sem", "num_windows": 8, "split": "test", "out": None,
}
BASELINE_KINDS = {**{k: v for k, v in EXPLAIN_KINDS.items() if k in BASELINE_DEFAULTS},
                  "kind": str, "center": int, "top_k": int}


def run_baseline(options: dict) -> int:
    if not options["bundle"] or not options["model"]:
        raise UsageError("baseline needs --bundle and --model")
    out = out_dir_for(options, "baseline")
    bundle, model = _load_pair(options)
    seeds = [int(s) for s in options["seeds"].split(",") if s != ""]
    results = []
    for seed in seeds:
        windows = sample_windows(bundle, options["split"], options["num_windows"], seed)
        config = _explainer_config(options, "spatial", seed)
        kind = bl.BaselineKind(options["kind"], seed=seed, center=options["center"],
                               top_k=options["top_k"])
        result = bl.run_baseline(kind, model, bundle.graph, windows, config=config, stats=bundle.stats)
        results.append(result)
        write_json(out / f"result_{seed}.json", result.to_dict())
    report = mt.explanation_report(results, bundle.graph, explainer_id=results[0].explainer_id)
    write_json(out / "report.json", report.to_dict())
    write_csv(out / "report_row.csv", [report.csv_row()],
              ["explainer", "n", "fidelity", "e_size", "sparsity", "delta_mae"])
    write_manifest(out, "baseline", options, inputs=[options["bundle"], options["model"]])
    return 0


RETRAIN_DEFAULTS = {
    "bundle": None, "model": None, "explanation": None, "gamma_edge": 0.5, "gamma_time": 0.5,
    "renormalize": False, "epochs": 60, "batch_size": 8, "lr": 1e-3, "seed": 0, "out": None,
}
RETRAIN_KINDS = {"bundle": str, "model": str, "explanation": str, "gamma_edge": float,
                 "gamma_time": float, "renormalize": bool, "epochs": int, "batch_size": int,
                 "lr": float, "seed": int, "out": str}


def run_retrain(options: dict) -> int:
    for need in ("bundle", "model", "explanation"):
        if not options[need]:
            raise UsageError(f"retrain needs --{need}")
    out = out_dir_for(options, "retrain")
    bundle, model = _load_pair(options)
    explanation = json.loads(Path(options["explanation"]).read_text())
    result = rt.retrain(
        model, bundle,
        delta_a=[tuple(e[:2]) for e in explanation.get("delta_a", [])],
        delta_x=explanation.get("delta_x", []),
        embed_config=rt.EmbeddingConfig(
            gamma_edge=options["gamma_edge"], gamma_time=options["gamma_time"],
            renormalize=options["renormalize"],
        ),
        train_config=TrainConfig(
            epochs=options["epochs"], batch_size=options["batch_size"],
            lr=options["lr"], seed=options["seed"],
        ),
    )
    save_checkpoint(result.model, str(out / "checkpoint.json"), seed=options["seed"])
    write_json(out / "comparison.json", result.side_by_side())
    rows = [
        {"variant": "baseline", **result.baseline_report.to_dict()},
        {"variant": "retrained", **result.retrained_report.to_dict()},
    ]
    write_csv(out / "comparison.csv", rows, ["variant", "mae", "mape_percent", "rmse", "horizon", "split"])
    write_manifest(out, "retrain", options,
                   inputs=[options["bundle"], options["model"], options["explanation"]])
    return 0


EVAL_DEFAULTS = {"bundle": None, "model": None, "split": "test", "pred": None, "truth": None, "out": None}
EVAL_KINDS = {"bundle": str, "model": str, "split": str, "pred": str, "truth": str, "out": str}


def run_eval(options: dict) -> int:
    out = out_dir_for(options, "eval")
    inputs: list[str] = []
    if options["pred"] and options["truth"]:
        y_hat = np.load(options["pred"])
        y = np.load(options["truth"])
        report = mt.prediction_metrics(y, y_hat, split="files")
        inputs = [options["pred"], options["truth"]]
    elif options["bundle"] and options["model"]:
        bundle, model = _load_pair(options)
        windows = bundle.split(options["split"])
        preds = predict(model, bundle.graph, windows)
        _, ys = stack_windows(windows)
        report = mt.prediction_metrics(
            dt.denormalize(ys, bundle.stats), dt.denormalize(preds, bundle.stats),
            split=options["split"],
        )
        inputs = [options["bundle"], options["model"]]
    else:
        raise UsageError("eval needs either --pred/--truth or --bundle/--model")
    write_json(out / "metrics.json", report.to_dict())
    write_manifest(out, "eval", options, inputs=inputs)
    return 0


REPORT_DEFAULTS = {"inputs": "", "out": None}
REPORT_KINDS = {"inputs": str, "out": str}


def run_report(options: dict) -> int:
    paths = [p for p in options["inputs"].split(",") if p]
    if not paths:
        raise UsageError("report needs --inputs as a comma list of report_row.csv files")
    out = out_dir_for(options, "report")
    rows = []
    for path in paths:
        with open(path, newline="") as fh:
            rows.extend(list(csv.DictReader(fh)))
    by_explainer: dict[str, list[dict]] = {}
    for row in rows:
        by_explainer.setdefault(row["explainer"], []).append(row)
    table = []
    for explainer in sorted(by_explainer):
        group = by_explainer[explainer]
        table.append({
            "explainer": explainer,
            "runs": len(group),
            "fidelity": float(np.mean([float(r["fidelity"]) for r in group])),
            "e_size": float(np.mean([float(r["e_size"]) for r in group])),
            "sparsity": float(np.mean([float(r["sparsity"]) for r in group])),
            "delta_mae": float(np.mean([float(r["delta_mae"]) for r in group])),
        })
    write_csv(out / "comparison.csv", table,
              ["explainer", "runs", "fidelity", "e_size", "sparsity", "delta_mae"])
    write_json(out / "comparison.json", table)
    write_manifest(out, "report", options, inputs=paths)
    return 0


COMMANDS = {
    "synth": (run_synth, SYNTH_DEFAULTS, SYNTH_KINDS),
    "ingest": (run_ingest, INGEST_DEFAULTS, INGEST_KINDS),
    "train": (run_train, TRAIN_DEFAULTS, TRAIN_KINDS),
    "explain": (run_explain, EXPLAIN_DEFAULTS, EXPLAIN_KINDS),
    "baseline": (run_baseline, BASELINE_DEFAULTS, BASELINE_KINDS),
    "retrain": (run_retrain, RETRAIN_DEFAULTS, RETRAIN_KINDS),
    "eval": (run_eval, EVAL_DEFAULTS, EVAL_KINDS),
    "report": (run_report, REPORT_DEFAULTS, REPORT_KINDS),
}


def run_rerun(manifest_path: str, out_override: str | None) -> int:
    payload = json.loads(Path(manifest_path).read_text())
    if payload.get("schema") != MANIFEST_SCHEMA:
        raise UsageError(f"{manifest_path}: unknown manifest schema {payload.get('schema')!r}")
    command = payload["command"]
    if command not in COMMANDS:
        raise UsageError(f"{manifest_path}: unknown command {command!r}")
    options = dict(payload["options"])
    if out_override:
        options["out"] = out_override
    runner, _, _ = COMMANDS[command]
    return runner(options)


def build_parser() -> _Parser:
    parser = _Parser(prog="flowcf", description=__doc__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command")

    for name, (_runner, defaults, kinds) in COMMANDS.items():
        p = sub.add_parser(name, add_help=True)
        p.add_argument("--config", default=None, help="KEY=VALUE file; flags win")
        for key, default in defaults.items():
            kind = kinds.get(key, str)
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, type=kind, default=None,
                               help=f"default: {default}")
    rerun = sub.add_parser("rerun")
    rerun.add_argument("--manifest", required=True)
    rerun.add_argument("--out", default=None)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level.upper(), logging.WARNING))
        if not args.command:
            raise UsageError("a command is required (synth, ingest, train, explain, baseline, retrain, eval, report, rerun)")
        if args.command == "rerun":
            return run_rerun(args.manifest, args.out)
        runner, defaults, kinds = COMMANDS[args.command]
        options = resolve_options(args, defaults, kinds)
        return runner(options)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())

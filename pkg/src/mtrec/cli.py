"""Operator surface: seeded, reproducible commands over a JSON run config.

Subcommands: gen-data, train, eval, bucket-split, analyze.  Every run writes
its fully-resolved config (defaults filled) next to its outputs, and that file
is itself a valid input reproducing the run.  Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import copy
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    candidate_pairs,
    distance_histogram,
    pair_distances,
    select_contradictory,
    write_histogram_csv,
)
from .data import (
    Dataset,
    RemapTable,
    SyntheticConfig,
    frequency_filter,
    generate_synthetic_with_info,
    load_csv,
    split,
    write_csv,
)
from .errors import ConfigError, DataError, NumericError
from .evaluation import (
    compute_metrics,
    format_metrics_table,
    mtl_gain,
    subset_aucs,
    subset_split,
    write_bucket_split_csv,
    write_metrics_csv,
    write_predictions_csv,
)
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, fit, write_training_log

_DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": None,
    "data": {
        "path": None,
        "min_count": 10,
        "synthetic": {
            "num_users": 1000,
            "num_items": 500,
            "num_samples": 100000,
            "num_extra_fields": 2,
            "extra_field_vocab": 50,
            "latent_dim": 8,
            "correlation": -0.8,
            "task_bias": [0.0, 0.0],
            "target_positive_ratio": None,
            "ratios": [0.8, 0.1, 0.1],
        },
    },
    "model": {
        "variant": None,
        "num_tasks": 2,
        "task_index": None,
        "embedding_dim": 16,
        "num_task_experts": 1,
        "num_shared_experts": 1,
        "expert_hidden": [64, 64],
        "tower_hidden": [32, 16],
        "gate_input_mode": "sum",
        "sg_enabled": True,
        "field_task_specific_mask": None,
    },
    "train": {
        "learning_rate": 1e-3,  # a list triggers grid mode
        "batch_size": 256,
        "max_epochs": 10,
        "early_stop_patience": 2,
        "l2_embedding": 1e-6,
        "task_loss_weights": None,
    },
    "eval": {
        "checkpoint": None,
        "single_task_checkpoints": None,  # [path for task_a, path for task_b]
        "task_a": 0,
        "task_b": 1,
        "focus_task": None,  # default: task_a
        "lo": -4,
        "hi": 6,
        "n_buckets": 10,
    },
    "analysis": {
        "single_task_a": None,
        "single_task_b": None,
        "mtl_checkpoints": [],
        "top_frac": 0.4,
        "bottom_frac": 0.4,
        "bins": 20,
        "user_field": 0,
        "item_field": 1,
    },
}


def _merge_with_defaults(user: dict, defaults: dict, path: str = "") -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    for key in user:
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
    merged = {}
    for key, default in defaults.items():
        if key in user and isinstance(default, dict) and user[key] is not None:
            merged[key] = _merge_with_defaults(user[key], default, f"{path}{key}.")
        elif key in user:
            merged[key] = copy.deepcopy(user[key])
        else:
            merged[key] = copy.deepcopy(default)
    return merged


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return _merge_with_defaults(raw, _DEFAULT_CONFIG)


def _prepare_out_dir(config: dict, force: bool) -> Path:
    out = config.get("out_dir")
    if not out:
        raise ConfigError("out_dir is required (config key or --out)")
    out_dir = Path(out)
    if out_dir.exists():
        if not force:
            raise ConfigError(f"output directory {out_dir} exists; pass --force to overwrite")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    return out_dir


def _write_resolved_config(config: dict, out_dir: Path) -> None:
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(manifest: dict, out_dir: Path) -> None:
    with open(out_dir / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ------------------------------------------------------------------ commands

def cmd_gen_data(config: dict, force: bool = False) -> Path:
    out_dir = _prepare_out_dir(config, force)
    syn = dict(config["data"]["synthetic"])
    ratios = tuple(syn.pop("ratios"))
    for key in ("task_bias", "target_positive_ratio"):
        if syn[key] is not None:
            syn[key] = tuple(syn[key])
    syn_cfg = SyntheticConfig(seed=config["seed"], **syn)
    dataset, info = generate_synthetic_with_info(syn_cfg)
    train_ds, val_ds, test_ds = split(dataset, ratios, seed=config["seed"])
    write_csv(train_ds, out_dir / "train.csv")
    write_csv(val_ds, out_dir / "val.csv")
    write_csv(test_ds, out_dir / "test.csv")
    info["split_sizes"] = [len(train_ds), len(val_ds), len(test_ds)]
    info["ratios"] = list(ratios)
    _write_manifest(info, out_dir)
    _write_resolved_config(config, out_dir)
    return out_dir


def _load_training_data(config: dict) -> tuple[Dataset, Dataset, RemapTable]:
    data_path = config["data"]["path"]
    if not data_path:
        raise ConfigError("data.path is required for this command")
    data_dir = Path(data_path)
    train_raw = load_csv(data_dir / "train.csv")
    remap, train_ds = frequency_filter(train_raw, config["data"]["min_count"])
    val_ds = remap.apply(load_csv(data_dir / "val.csv"))
    return train_ds, val_ds, remap


def _model_config(config: dict, num_tasks_in_data: int) -> ModelConfig:
    raw = dict(config["model"])
    if not raw.get("variant"):
        raise ConfigError("model.variant is required")
    if raw["num_tasks"] != num_tasks_in_data:
        raise ConfigError(
            f"model.num_tasks = {raw['num_tasks']} but dataset has "
            f"{num_tasks_in_data} label columns"
        )
    for key in ("expert_hidden", "tower_hidden"):
        raw[key] = tuple(raw[key])
    if raw["field_task_specific_mask"] is not None:
        raw["field_task_specific_mask"] = tuple(raw["field_task_specific_mask"])
    return ModelConfig(**raw)


def _run_single_training(
    variant: ModelConfig, train_ds, val_ds, remap: RemapTable, tcfg: TrainConfig, run_dir: Path
) -> float:
    result = fit(variant, train_ds, val_ds, tcfg)
    save_checkpoint(result.model, run_dir / "checkpoint.npz")
    write_training_log(result, run_dir / "training_log.csv")
    remap.save_csv(run_dir / "remap.csv")
    return result.best_avg_auc


def cmd_train(config: dict, force: bool = False) -> Path:
    out_dir = _prepare_out_dir(config, force)
    train_ds, val_ds, remap = _load_training_data(config)
    variant = _model_config(config, train_ds.num_tasks)
    tr = dict(config["train"])
    lrs = tr.pop("learning_rate")
    if tr["task_loss_weights"] is not None:
        tr["task_loss_weights"] = tuple(tr["task_loss_weights"])
    grid = list(lrs) if isinstance(lrs, (list, tuple)) else [lrs]

    results = {}
    for lr in grid:
        tcfg = TrainConfig(learning_rate=float(lr), seed=config["seed"], **tr)
        run_dir = out_dir if len(grid) == 1 else out_dir / f"lr_{lr:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        results[f"lr_{lr:g}"] = _run_single_training(
            variant, train_ds, val_ds, remap, tcfg, run_dir
        )
    if len(grid) > 1:
        best = max(results, key=lambda k: results[k])
        with open(out_dir / "best.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(
                {"best": best, "checkpoint": f"{best}/checkpoint.npz", "val_avg_auc": results},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
    _write_resolved_config(config, out_dir)
    return out_dir


def _load_eval_model(checkpoint_path: str, test_raw: Dataset) -> tuple[Model, Dataset]:
    """Load a checkpoint and remap the raw test set the way it was trained."""
    ckpt = Path(checkpoint_path)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    remap_path = ckpt.parent / "remap.csv"
    test_ds = RemapTable.load_csv(remap_path).apply(test_raw) if remap_path.exists() else test_raw
    if test_ds.schema.vocab_sizes != model.schema.vocab_sizes:
        raise ConfigError(
            f"checkpoint {ckpt} was trained on vocabulary {model.schema.vocab_sizes}, "
            f"test data has {test_ds.schema.vocab_sizes}"
        )
    return model, test_ds


def _single_task_scores(config: dict, test_raw: Dataset) -> tuple[np.ndarray, np.ndarray, dict]:
    ev = config["eval"]
    paths = ev["single_task_checkpoints"]
    if not paths or len(paths) != 2:
        raise ConfigError(
            "eval.single_task_checkpoints must list the task-A and task-B checkpoints"
        )
    task_a, task_b = ev["task_a"], ev["task_b"]
    reports = {}
    scores = {}
    for path, task in zip(paths, (task_a, task_b)):
        st_model, st_test = _load_eval_model(path, test_raw)
        if task not in st_model.routing.tower_tasks:
            raise ConfigError(f"checkpoint {path} does not predict task {task}")
        s = st_model.predict(st_test)
        scores[task] = s[task]
        reports[task] = compute_metrics({task: s[task]}, st_test.labels)
    return scores[task_a], scores[task_b], reports


def cmd_eval(config: dict, force: bool = False) -> Path:
    out_dir = _prepare_out_dir(config, force)
    ev = config["eval"]
    if not ev["checkpoint"]:
        raise ConfigError("eval.checkpoint is required")
    data_path = config["data"]["path"]
    if not data_path:
        raise ConfigError("data.path is required for eval")
    test_raw = load_csv(Path(data_path) / "test.csv")
    model, test_ds = _load_eval_model(ev["checkpoint"], test_raw)

    scores = model.predict(test_ds)
    report = compute_metrics(scores, test_ds.labels)
    rows: list[tuple[str, str, str, float | None]] = []
    for task, m in report.per_task.items():
        rows.append((f"task{task}", "auc", "all", m.auc))
        rows.append((f"task{task}", "logloss", "all", m.logloss))
    rows.append(("average", "auc", "all", report.average_auc))

    manifest: dict = {"checkpoint": ev["checkpoint"], "num_test_samples": len(test_ds)}
    if ev["single_task_checkpoints"]:
        f_a, f_b, st_reports = _single_task_scores(config, test_raw)
        bsplit = subset_split(f_a, f_b, lo=ev["lo"], hi=ev["hi"], n_buckets=ev["n_buckets"])
        write_bucket_split_csv(bsplit, out_dir / "bucket_split.csv")
        focus = ev["focus_task"] if ev["focus_task"] is not None else ev["task_a"]
        if focus not in scores:
            raise ConfigError(f"focus task {focus} is not predicted by the checkpoint")
        per_subset = subset_aucs(scores[focus], test_ds.labels[:, focus], bsplit)
        for name, value in per_subset.items():
            rows.append((f"task{focus}", "auc", name, value))
        if set(st_reports) == set(report.per_task):
            gain = mtl_gain(report, st_reports)
            rows.append(("average", "mtl_gain", "all", gain))
            manifest["mtl_gain"] = gain
        manifest["subset_counts"] = bsplit.counts()
        manifest["focus_task"] = focus

    write_metrics_csv(rows, out_dir / "metrics.csv")
    write_predictions_csv(scores, test_ds.labels, out_dir / "predictions.csv")
    print(format_metrics_table(rows))
    _write_manifest(manifest, out_dir)
    _write_resolved_config(config, out_dir)
    return out_dir


def cmd_bucket_split(config: dict, force: bool = False) -> Path:
    """The split stage of eval on its own: bucket CSV plus subset counts."""
    out_dir = _prepare_out_dir(config, force)
    ev = config["eval"]
    data_path = config["data"]["path"]
    if not data_path:
        raise ConfigError("data.path is required for bucket-split")
    test_raw = load_csv(Path(data_path) / "test.csv")
    f_a, f_b, _ = _single_task_scores(config, test_raw)
    bsplit = subset_split(f_a, f_b, lo=ev["lo"], hi=ev["hi"], n_buckets=ev["n_buckets"])
    write_bucket_split_csv(bsplit, out_dir / "bucket_split.csv")
    _write_manifest({"subset_counts": bsplit.counts(), "lo": ev["lo"], "hi": ev["hi"]}, out_dir)
    _write_resolved_config(config, out_dir)
    return out_dir


def cmd_analyze(config: dict, force: bool = False) -> Path:
    out_dir = _prepare_out_dir(config, force)
    an = config["analysis"]
    if not an["single_task_a"] or not an["single_task_b"]:
        raise ConfigError("analysis.single_task_a and analysis.single_task_b are required")
    if not an["mtl_checkpoints"]:
        raise ConfigError("analysis.mtl_checkpoints must list at least one model")
    data_path = config["data"]["path"]
    if not data_path:
        raise ConfigError("data.path is required for analyze")
    test_raw = load_csv(Path(data_path) / "test.csv")

    labelled = [("single_task_a", an["single_task_a"]), ("single_task_b", an["single_task_b"])]
    labelled += [
        (f"mtl{i}_{Path(p).parent.name or 'model'}", p)
        for i, p in enumerate(an["mtl_checkpoints"])
    ]
    models = {}
    test_ds = None
    for label, path in labelled:
        model, remapped = _load_eval_model(path, test_raw)
        if test_ds is not None and not np.array_equal(remapped.features, test_ds.features):
            raise ConfigError(f"checkpoint {path} was trained with a different remap table")
        test_ds = remapped
        models[label] = model

    pairs = candidate_pairs(test_ds, an["user_field"], an["item_field"])

    def sole_table(label: str) -> np.ndarray:
        model = models[label]
        if "emb.shared" not in model.params:
            raise ConfigError(f"checkpoint {label} lacks table emb.shared")
        return model.params["emb.shared"].value

    selected = select_contradictory(
        pairs, sole_table("single_task_a"), sole_table("single_task_b"),
        top_frac=an["top_frac"], bottom_frac=an["bottom_frac"],
    )

    manifest = {
        "num_candidates": selected.provenance["num_candidates"],
        "num_selected": selected.provenance["num_selected"],
        "selected_fraction": selected.provenance["selected_fraction"],
        "pair_universe": selected.provenance["pair_universe"],
        "mean_distances": {},
    }
    for label, model in models.items():
        for table in model.embedding_tables:
            key = table.removeprefix("emb.")
            rows = distance_histogram(selected, pairs, model.params[table].value, an["bins"])
            write_histogram_csv(rows, f"{label}.{key}", out_dir / f"hist_{label}_{key}.csv")
            manifest["mean_distances"][f"{label}.{key}"] = float(
                np.mean(pair_distances(model.params[table].value, selected.pairs))
            )
    _write_manifest(manifest, out_dir)
    _write_resolved_config(config, out_dir)
    return out_dir


# ---------------------------------------------------------------- entrypoint

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bucket-split": cmd_bucket_split,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtrec",
        description="Multi-task recommender engine: data generation, training, "
        "evaluation, bucket splitting, and embedding-distance analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
        p.add_argument("--force", action="store_true", help="overwrite an existing out dir")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = load_config(args.config)
    if args.out is not None:
        config["out_dir"] = args.out
    if args.seed is not None:
        config["seed"] = args.seed
    _COMMANDS[args.command](config, force=args.force)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

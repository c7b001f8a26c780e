"""Command-line driver: synthetic data, parameter planning, training, sweeps.

Every subcommand is deterministic given its flags and seed — report files
rerun byte-identically; wall-clock timings go to a separate log file so the
main artifacts stay reproducible.  Exit codes: 0 ok, 2 usage or config
error, 3 at least one training run aborted.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datapipe as dp
from . import harness as hz
from .attention import AttentionKind, MsaConfig
from .backbones import (CNN_FAMILIES, DEFAULT_LEVEL, PUBLISHED_TABLES, LevelTable,
                        ModelConfig, attention_param_count,
                        attention_placement, build_model,
                        computed_level_table, feature_param_count,
                        level_trend, module_channels, select_level)
from .core import tensor as T

TASK_ALIASES = {"cls": "classification", "classification": "classification",
                "reg": "regression", "regression": "regression"}

# config-file keys accepted by train/sweep, with documented defaults
CONFIG_KEYS = {
    "family": "resnet", "level": None, "attention": "none", "fraction": 0,
    "msa_d_model": 32, "msa_heads": 4, "msa_ff": 128, "msa_layers": 2,
    "dataset": None, "task": None,
    "synth_cases": 0, "synth_samples_per_case": 8, "synth_seed": 0,
    "synth_difficulty": 1.0, "synth_prevalence": 0.05,
    "test_fraction": 0.2, "split_seed": 0,
    "epochs": 20, "seed": 0, "batch_size": 128, "lr0": 1e-3,
    "time_mode": "virtual", "dtype": "float32",
    "matrix": "paper13", "seeds": 5, "base_seed": 0,
    "out_dir": "physiobench-out", "workers": None,
}
_INT_KEYS = {"level", "fraction", "msa_d_model", "msa_heads", "msa_ff",
             "msa_layers", "synth_cases", "synth_samples_per_case",
             "synth_seed", "split_seed", "epochs", "seed", "batch_size",
             "seeds", "base_seed", "workers"}
_FLOAT_KEYS = {"synth_difficulty", "synth_prevalence", "test_fraction", "lr0"}


class CliError(Exception):
    """Config or usage problem; maps to exit code 2."""


def _fail(msg: str) -> "CliError":
    return CliError(msg)


# ---------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------

def load_config(path: str) -> dict:
    """Parse a flat key=value file; unknown keys are rejected."""
    values: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise _fail(f"cannot read config {path}: {exc}")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise _fail(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise _fail(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise _fail(f"{path}:{lineno}: bad value for {key}: {value!r}")
    return values


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill flags the user left unset from --config, then from defaults."""
    file_values = load_config(args.config) if getattr(args, "config", None) else {}
    for key, default in CONFIG_KEYS.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) is None:
            setattr(args, key, file_values.get(key, default))
    return args


def _opt(parser, flag, key, typ, help_text):
    parser.add_argument(flag, dest=key, type=typ, default=None,
                        help=f"{help_text} [config key: {key}, default: {CONFIG_KEYS[key]}]")


# ---------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------

def _resolve_task(value: str) -> str:
    task = TASK_ALIASES.get(value)
    if task is None:
        raise _fail(f"unknown task {value!r} (use classification/cls or regression/reg)")
    return task


def _model_config(args, task: str) -> ModelConfig:
    kind = AttentionKind(args.attention)
    msa = None
    if args.family == "msa_only" or kind is AttentionKind.MSA:
        msa = MsaConfig(args.msa_d_model, args.msa_heads, args.msa_ff,
                        args.msa_layers)
    level = args.level
    if level is None:
        level = DEFAULT_LEVEL.get(args.family, 1)
    return ModelConfig(args.family, level, kind, args.fraction, msa=msa, task=task)


def _load_or_generate(args) -> dp.SignalDataset:
    if args.dataset:
        return dp.decode_dataset(Path(args.dataset).read_bytes())
    if args.synth_cases and args.synth_cases > 0:
        task = _resolve_task(args.task or "classification")
        return dp.generate_synthetic(
            n_cases=args.synth_cases, samples_per_case=args.synth_samples_per_case,
            task=task, seed=args.synth_seed, difficulty=args.synth_difficulty,
            prevalence=args.synth_prevalence)
    raise _fail("no input data: pass --dataset FILE or --synth-cases N")


def _bundle(args) -> tuple[hz.ArrayBundle, str]:
    ds = _load_or_generate(args)
    train_ds, test_ds = dp.split_by_case(ds, test_fraction=args.test_fraction,
                                         seed=args.split_seed)
    return hz.prepare(train_ds, test_ds), ds.task


def _set_dtype(name: str) -> None:
    if name not in ("float32", "float64"):
        raise _fail(f"dtype must be float32 or float64, got {name!r}")
    T.set_default_dtype(np.float32 if name == "float32" else np.float64)


def _write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    task = _resolve_task(args.task)
    if args.cases <= 0:
        raise _fail("--cases must be positive")
    if args.samples_per_case <= 0:
        raise _fail("--samples-per-case must be positive")
    ds = dp.generate_synthetic(n_cases=args.cases,
                               samples_per_case=args.samples_per_case,
                               task=task, seed=args.seed,
                               difficulty=args.difficulty,
                               prevalence=args.prevalence)
    out = Path(args.out)
    try:
        _write(out, dp.encode_dataset(ds))
    except OSError as exc:
        raise _fail(f"cannot write {out}: {exc}")
    manifest = dict(ds.meta)
    manifest["n_records"] = len(ds.records)
    manifest["format"] = "psd1"
    _write(out.with_suffix(out.suffix + ".manifest"), dp.format_manifest(manifest))
    print(f"wrote {len(ds.records)} records to {out}")
    return 0


def cmd_preprocess(args) -> int:
    try:
        ds = dp.decode_dataset(Path(args.infile).read_bytes())
    except OSError as exc:
        raise _fail(f"cannot read {args.infile}: {exc}")
    kept, drops = [], {}
    for rec in ds.records:
        decision = dp.filter_segment(rec.ecg, rec.ppg)
        reason = decision.reason
        if decision.keep and ds.task == "regression":
            sv_ml = rec.label * dp.bsa_dubois(rec.height, rec.weight)
            if not dp.SV_MIN_ML <= sv_ml <= dp.SV_MAX_ML:
                reason = "sv_out_of_range"
        if reason is None:
            kept.append(rec)
        else:
            drops[reason] = drops.get(reason, 0) + 1
    out_ds = dp.SignalDataset(task=ds.task, records=tuple(kept),
                              meta={**ds.meta, "preprocessed": True})
    out = Path(args.out)
    try:
        _write(out, dp.encode_dataset(out_ds))
    except OSError as exc:
        raise _fail(f"cannot write {out}: {exc}")
    manifest = {"task": ds.task, "n_in": len(ds.records), "n_kept": len(kept)}
    manifest.update({f"dropped_{k}": v for k, v in sorted(drops.items())})
    _write(out.with_suffix(out.suffix + ".manifest"), dp.format_manifest(manifest))
    print(f"kept {len(kept)}/{len(ds.records)} records"
          + ("" if not drops else f" (dropped: {drops})"))
    return 0


def _planning_table(family: str, source: str) -> LevelTable:
    if source == "published":
        if family not in PUBLISHED_TABLES:
            raise _fail(f"no published level table for family {family!r}")
        return PUBLISHED_TABLES[family]
    return computed_level_table(family)


def cmd_count_params(args) -> int:
    if args.family not in CNN_FAMILIES:
        raise _fail(f"--family must be one of {CNN_FAMILIES}, got {args.family!r}")
    table = _planning_table(args.family, args.table)
    kind = AttentionKind(args.attention)
    chosen = select_level(table)
    print(f"family: {args.family}  (counts: {args.table})")
    header = "level  feature_params"
    if kind is not AttentionKind.NONE:
        header += f"  with_{kind.value}@{args.fraction}%"
    print(header)
    for level, count in table.counts:
        line = f"{level:>5}  {count:>14}"
        if kind is not AttentionKind.NONE:
            base = feature_param_count(args.family, level)
            chans = module_channels(args.family, level)
            extra = sum(attention_param_count(kind, chans[m - 1])
                        for m in attention_placement(level, args.fraction))
            line += f"  {base + extra:>14}"
        if level == len(table.counts) and count == table.default_count:
            line += "  (default)"
        if level == chosen:
            line += "  <- selected"
        print(line)
    print(f"default count: {table.default_count}")
    print(f"threshold (default/5): {table.threshold}")
    print(f"selected level: {chosen}")
    print(f"trend: {level_trend(table)}")
    return 0


def cmd_select_level(args) -> int:
    if args.counts:
        try:
            counts = [int(c) for c in args.counts.split(",")]
        except ValueError:
            raise _fail(f"--counts must be comma-separated integers: {args.counts!r}")
        default = args.default if args.default is not None else counts[-1]
        table = LevelTable("custom", tuple(enumerate(counts, start=1)), default)
    elif args.family:
        table = _planning_table(args.family, args.table)
    else:
        raise _fail("pass --family or --counts")
    print(select_level(table))
    return 0


def _save_weights(path: Path, model, cfg: ModelConfig, bundle: hz.ArrayBundle) -> None:
    meta = {"config": {
        "family": cfg.family, "level": cfg.level, "attention": cfg.attention.value,
        "fraction": cfg.fraction, "task": cfg.task,
        "msa": None if cfg.msa is None else [cfg.msa.d_model, cfg.msa.n_heads,
                                             cfg.msa.d_ff, cfg.msa.n_layers]}}
    arrays = {k.replace("/", "."): v for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    arrays["__demo_mean__"] = bundle.demo_mean
    arrays["__demo_std__"] = bundle.demo_std
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_weights(path: Path):
    reserved = ("__meta__", "__demo_mean__", "__demo_std__")
    with np.load(path, allow_pickle=False) as zf:
        meta = json.loads(str(zf["__meta__"]))
        demo_stats = (zf["__demo_mean__"], zf["__demo_std__"])
        state = {k.replace(".", "/"): zf[k] for k in zf.files if k not in reserved}
    c = meta["config"]
    msa = MsaConfig(*c["msa"]) if c["msa"] else None
    cfg = ModelConfig(c["family"], c["level"], AttentionKind(c["attention"]),
                      c["fraction"], msa=msa, task=c["task"])
    return cfg, state, demo_stats


def cmd_train(args) -> int:
    _merge_config(args)
    _set_dtype(args.dtype)
    bundle, task = _bundle(args)
    if args.task and _resolve_task(args.task) != task:
        raise _fail(f"--task {args.task} does not match dataset task {task}")
    cfg = _model_config(args, task)
    spec = hz.TrainSpec.for_config(cfg, epochs=args.epochs, seed=args.seed,
                                   lr0=args.lr0, batch_size=args.batch_size,
                                   time_mode=args.time_mode)
    model = build_model(cfg, rng=args.seed)
    result = hz.train(model, bundle, spec)

    out_dir = Path(args.out_dir)
    history = "".join(
        json.dumps({"epoch": i + 1, "loss": result.losses[i],
                    "metric": result.metrics[i],
                    "seconds": result.epoch_seconds[i]}, sort_keys=True) + "\n"
        for i in range(result.epochs_run))
    _write(out_dir / "history.jsonl", history)
    summary = {
        "family": cfg.family, "level": cfg.level,
        "attention": cfg.attention.value, "fraction": cfg.fraction,
        "task": task, "metric_name": result.metric_name,
        "optimizer": spec.optimizer, "loss": spec.loss,
        "epochs_requested": spec.epochs, "epochs_run": result.epochs_run,
        "final_metric": result.final_metric,
        "convergence_s": result.convergence_s, "seed": spec.seed,
        "aborted": result.aborted, "abort_reason": result.abort_reason,
        "test_prevalence": result.test_prevalence,
        "params": model.num_params(),
    }
    _write(out_dir / "run.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _write(out_dir / "timings.log", f"wall_seconds={result.wall_seconds:.3f}\n")
    _save_weights(out_dir / "weights.npz", model, cfg, bundle)
    print(f"{result.metric_name}={result.final_metric:.6f} "
          f"epochs={result.epochs_run} aborted={result.aborted}")
    return 3 if result.aborted else 0


def cmd_evaluate(args) -> int:
    """Score saved weights on a whole dataset file, using the demographic
    standardization captured at training time."""
    _merge_config(args)
    _set_dtype(args.dtype)
    try:
        cfg, state, (demo_mean, demo_std) = _load_weights(Path(args.weights))
    except OSError as exc:
        raise _fail(f"cannot read weights {args.weights}: {exc}")
    ds = _load_or_generate(args)
    if cfg.task != ds.task:
        raise _fail(f"weights are for task {cfg.task}, dataset is {ds.task}")
    x, demo, y = ds.arrays()
    demo = dp.apply_demo_stats(demo, demo_mean, demo_std)
    model = build_model(cfg, rng=0)
    model.load_state_dict(state)
    scores = hz.predict(model, x, demo)
    if ds.task == "classification":
        print(json.dumps({"auroc": hz.auroc(y, scores), "n": len(y)}, sort_keys=True))
    else:
        print(json.dumps({"mape": hz.mape(y, scores), "n": len(y)}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    _merge_config(args)
    _set_dtype(args.dtype)
    if args.list_only:  # listing needs no data
        task = _resolve_task(args.task) if args.task else "classification"
    else:
        bundle, task = _bundle(args)

    if args.matrix == "paper13":
        levels = None
        if args.level is not None:
            levels = {f: args.level for f in CNN_FAMILIES}
        msa = MsaConfig(args.msa_d_model, args.msa_heads, args.msa_ff,
                        args.msa_layers)
        entries = hz.entries_from_configs(
            hz.paper13_matrix(task=task, levels=levels, msa=msa))
    elif args.matrix == "msa-grid":
        entries = hz.msa_grid_entries(task=task)
    else:
        raise _fail(f"--matrix must be paper13 or msa-grid, got {args.matrix!r}")

    if args.families:
        wanted = set(args.families.split(","))
        known = set(CNN_FAMILIES) | {"msa_only"}
        if not wanted <= known:
            raise _fail(f"unknown families: {sorted(wanted - known)}")
        entries = [e for e in entries if e.family in wanted]
    if args.max_entries is not None:
        entries = entries[:args.max_entries]
    if args.list_only:
        for e in entries:
            status = "ok" if e.error is None else f"invalid: {e.error}"
            print(f"{e.family},{e.attention},{e.fraction},{e.level},"
                  f"{e.label or '-'},{status}")
        print(f"total: {len(entries)}")
        return 0

    seeds = [args.base_seed + i for i in range(args.seeds)]
    report = hz.run_sweep(entries, bundle, epochs=args.epochs, seeds=seeds,
                          time_mode=args.time_mode, lr0=args.lr0,
                          batch_size=args.batch_size, workers=args.workers)
    out_dir = Path(args.out_dir)
    _write(out_dir / "report.csv", hz.report_to_csv(report))
    _write(out_dir / "runs.jsonl", hz.report_to_jsonl(report))
    trained_aborts = sum(r.aborted for row in report.rows for r in row.runs)
    print(f"wrote {len(report.rows)} rows to {out_dir / 'report.csv'} "
          f"(aborted runs: {trained_aborts})")
    return 3 if trained_aborts else 0


# ---------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------

def _add_data_flags(p: argparse.ArgumentParser) -> None:
    _opt(p, "--dataset", "dataset", str, "PSD1 dataset file")
    _opt(p, "--task", "task", str, "expected task (classification/cls, regression/reg)")
    _opt(p, "--synth-cases", "synth_cases", int, "generate synthetic data with this many cases")
    _opt(p, "--synth-samples-per-case", "synth_samples_per_case", int, "segments per synthetic case")
    _opt(p, "--synth-seed", "synth_seed", int, "synthetic data seed")
    _opt(p, "--synth-difficulty", "synth_difficulty", float, "planted-feature difficulty")
    _opt(p, "--synth-prevalence", "synth_prevalence", float, "synthetic positive prevalence")
    _opt(p, "--test-fraction", "test_fraction", float, "case fraction held out for test")
    _opt(p, "--split-seed", "split_seed", int, "case-split seed")
    _opt(p, "--dtype", "dtype", str, "float32 or float64 math")
    _opt(p, "--out-dir", "out_dir", str, "directory for report artifacts")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    _opt(p, "--family", "family", str, "backbone family (vgg/resnet/inception/msa_only)")
    _opt(p, "--level", "level", int, "backbone truncation level")
    _opt(p, "--attention", "attention", str, "attention kind (none/se/nl/cbam/msa)")
    _opt(p, "--fraction", "fraction", int, "attention fraction percent (0/25/50/75/100)")
    _opt(p, "--msa-d-model", "msa_d_model", int, "MSA token width")
    _opt(p, "--msa-heads", "msa_heads", int, "MSA head count")
    _opt(p, "--msa-ff", "msa_ff", int, "MSA feed-forward width")
    _opt(p, "--msa-layers", "msa_layers", int, "MSA encoder depth")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    _opt(p, "--epochs", "epochs", int, "training epochs")
    _opt(p, "--seed", "seed", int, "training seed")
    _opt(p, "--batch-size", "batch_size", int, "mini-batch size")
    _opt(p, "--lr0", "lr0", float, "initial learning rate")
    _opt(p, "--time-mode", "time_mode", str, "virtual (1 s/epoch, reproducible) or wall")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physiobench",
        description="1D CNN/attention benchmark on physiological waveforms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic PSD1 dataset")
    p.add_argument("--task", required=True, help="classification/cls or regression/reg")
    p.add_argument("--cases", type=int, required=True, help="number of synthetic cases")
    p.add_argument("--samples-per-case", type=int, default=8,
                   help="segments per case (default: 8)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--difficulty", type=float, default=1.0,
                   help="planted-feature strength in (0,1] (default: 1.0)")
    p.add_argument("--prevalence", type=float, default=0.05,
                   help="positive-class prevalence (default: 0.05)")
    p.add_argument("--out", required=True, help="output PSD1 path")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="filter a PSD1 dataset by signal-quality rules")
    p.add_argument("--in", dest="infile", required=True, help="input PSD1 path")
    p.add_argument("--out", required=True, help="output PSD1 path")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("count-params", help="per-level parameter table and level selection")
    p.add_argument("--family", required=True, help="vgg, resnet, or inception")
    p.add_argument("--attention", default="none",
                   help="include attention parameters of this kind (default: none)")
    p.add_argument("--fraction", type=int, default=100,
                   help="attention fraction percent (default: 100)")
    p.add_argument("--table", choices=("published", "computed"), default="published",
                   help="feature-count source for the selection rule (default: published)")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("select-level", help="apply the default/5 level-selection rule")
    p.add_argument("--family", help="use this family's level table")
    p.add_argument("--counts", help="comma-separated per-level counts (level 1 first)")
    p.add_argument("--default", type=int, help="default (full) count; last of --counts if omitted")
    p.add_argument("--table", choices=("published", "computed"), default="published",
                   help="count source when using --family (default: published)")
    p.set_defaults(func=cmd_select_level)

    p = sub.add_parser("train", help="train one model; writes history.jsonl, run.json, weights.npz")
    p.add_argument("--config", help="key=value config file (flags override)")
    _add_data_flags(p); _add_model_flags(p); _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score saved weights on a whole dataset file")
    p.add_argument("--config", help="key=value config file (flags override)")
    p.add_argument("--weights", required=True, help="weights.npz from train")
    _add_data_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train a config matrix; writes report.csv + runs.jsonl")
    p.add_argument("--config", help="key=value config file (flags override)")
    _opt(p, "--matrix", "matrix", str, "paper13 or msa-grid")
    _opt(p, "--seeds", "seeds", int, "seeds per config (base_seed + 0..n-1)")
    _opt(p, "--base-seed", "base_seed", int, "first seed")
    _opt(p, "--workers", "workers", int, "parallel worker processes")
    p.add_argument("--max-entries", type=int, help="truncate the matrix (smoke tests)")
    p.add_argument("--families", help="comma-separated family filter, e.g. resnet,msa_only")
    p.add_argument("--list-only", action="store_true",
                   help="print the matrix entries without training")
    _add_data_flags(p); _add_model_flags(p); _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: train, generate, forecast, evaluate, ablate, plot.

Every command is deterministic given (config, seed, inputs). Exit codes:
0 success, 2 usage/config/data errors, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import ensure_config_matches, load_checkpoint
from .config import (
    QUANTILE_PRESETS,
    apply_overrides,
    config_hash,
    load_run_config,
    model_config_from,
    train_config_from,
    validate_run_config,
)
from .datagen import (
    SourcePool,
    kernelsynth_corpus,
    load_jsonl,
    make_window_sampler,
    tsmixup_corpus,
    write_jsonl,
)
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    GenError,
    MaskError,
    NumericError,
    PatchFMError,
)
from .evaluate import EvalCase, aggregate, model_quantile_forecast, run_cases
from .plotting import plot_forecast_svg
from .train import train_loop

ABLATION_AXES = ("mask_ratio", "n_cpm", "context", "depth", "width", "quantiles", "data")


def _load_exclusions(path: str | Path | None) -> frozenset[str]:
    """Exclusion list: JSONL series (ids are taken) or one id per line."""
    if path is None:
        return frozenset()
    ids: set[str] = set()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read exclusion list {path}: {e}") from e
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("{"):
            try:
                ids.add(str(json.loads(line)["id"]))
            except (json.JSONDecodeError, KeyError) as e:
                raise DataError(f"{path}: bad exclusion line: {e}") from e
        else:
            ids.add(line)
    return frozenset(ids)


def build_pools(data_cfg: dict, base_seed: int) -> list[SourcePool]:
    """Materialize the configured source mixture (desk scale: in memory)."""
    exclusions = _load_exclusions(data_cfg.get("clean_exclusions"))
    pools: list[SourcePool] = []
    for i, src in enumerate(data_cfg.get("sources", [])):
        kind = src["kind"]
        weight = float(src.get("weight", 1.0))
        seed = int(src.get("seed", base_seed * 1000 + i))
        if kind == "real":
            series = load_jsonl(src["path"])
        elif kind == "kernelsynth":
            series = kernelsynth_corpus(seed, int(src["num"]), int(src["length"]))
        else:  # tsmixup
            pool = load_jsonl(src["path"])
            series = tsmixup_corpus(
                seed, int(src["num"]), int(src["length"]), pool, exclude=exclusions
            )
        pools.append(SourcePool(name=f"{kind}[{i}]", series=series, weight=weight))
    if not pools:
        raise ConfigError("data.sources is empty")
    return pools


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        validate_run_config(cfg)
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg)

    pools = build_pools(cfg.get("data", {}), train_cfg.seed)
    sampler = make_window_sampler(
        pools, model_cfg.context_length, model_cfg.patch_size,
        train_cfg.n_cpm, train_cfg.mask_ratio,
    )

    start = None
    if args.resume:
        bundle = load_checkpoint(args.resume)
        ensure_config_matches(bundle.model_config, model_cfg)
        if bundle.state is None:
            raise ConfigError(f"{args.resume} carries no optimizer state; cannot resume")
        start = (bundle.weights, bundle.state, bundle.step)

    result = train_loop(
        model_cfg, train_cfg, sampler, out_dir=args.out, start=start,
        log_every=args.log_every,
    )
    summary = {
        "seed": train_cfg.seed,
        "steps": train_cfg.total_steps,
        "final_loss": result.metrics[-1]["loss"] if result.metrics else None,
        "final_checkpoint": str(Path(args.out) / "final.ptfm"),
        "parameters": result.weights.param_count(),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    if args.num < 0:
        raise ConfigError("--num must be >= 0")
    exclusions = _load_exclusions(args.exclude)
    if args.kind == "kernelsynth":
        series = kernelsynth_corpus(args.seed, args.num, args.length)
    else:
        if not args.pool:
            raise ConfigError("tsmixup generation needs --pool POOL.jsonl")
        pool = load_jsonl(args.pool)
        series = tsmixup_corpus(args.seed, args.num, args.length, pool, exclude=exclusions)
    written = write_jsonl(series, args.out)
    overlap = sorted({sid for s in series for sid in s.sources} & exclusions)
    summary = {
        "kind": args.kind,
        "written": written,
        "seed": args.seed,
        "length": args.length,
        "exclusion_overlap": overlap,  # verified empty in clean mode
        "out": str(args.out),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_forecast(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    config = bundle.model_config
    bound = config.context_length - config.patch_size
    if args.horizon < 1 or args.horizon > bound:
        raise ConfigError(
            f"horizon must be within [1, T - L] = [1, {bound}] for this checkpoint"
        )
    levels = list(config.quantile_levels)
    if args.levels:
        wanted = [float(x) for x in args.levels.split(",")]
        cols = []
        for tau in wanted:
            matches = [i for i, lv in enumerate(levels) if abs(lv - tau) < 1e-9]
            if not matches:
                raise ConfigError(f"level {tau} not among the checkpoint's levels {levels}")
            cols.append(matches[0])
    else:
        wanted, cols = levels, list(range(len(levels)))

    series = load_jsonl(args.input)
    n = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for s in series:
            extended = np.concatenate([s.values, np.zeros(args.horizon)])
            grid = model_quantile_forecast(
                extended, bundle.weights, config, args.horizon,
                isotonic=not args.no_sort, series_id=s.id,
            )
            record = {
                "id": s.id,
                "start": s.start,
                "levels": wanted,
                "values": [[float(v) for v in row[cols]] for row in grid],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            n += 1
    print(json.dumps({"written": n, "horizon": args.horizon, "out": str(args.out)}, sort_keys=True))
    return 0


def _report_meta(args, config) -> dict:
    return {
        "checkpoint": str(args.ckpt),
        "dataset": str(args.dataset),
        "seasonality": args.seasonality,
        "horizon": args.horizon,
        "windows": args.windows,
        "mase_variant": args.mase_variant,
        "quantile_levels": list(config.quantile_levels),
    }


def cmd_evaluate(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    series = load_jsonl(args.dataset)
    dataset_id = Path(args.dataset).stem
    case = EvalCase(
        dataset_id=dataset_id, seasonality=args.seasonality,
        horizon=args.horizon, windows=args.windows,
    )
    results = run_cases(
        bundle.weights, bundle.model_config, {dataset_id: series}, [case],
        mase_variant=args.mase_variant,
    )
    report = aggregate(results)
    doc = report.to_dict()
    doc["meta"] = _report_meta(args, bundle.model_config)
    Path(args.report).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for method in sorted(doc["aggregates"]):
        agg = doc["aggregates"][method]
        print(
            f"{method}: norm_mase={_fmt(agg['mase'])} norm_crps={_fmt(agg['crps'])} "
            f"rank={_fmt(agg['rank'])}"
        )
    return 0


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def _parse_axis_values(axis: str, values: str) -> list:
    parts = [v.strip() for v in values.split(",") if v.strip()]
    if not parts:
        raise ConfigError("--values must list at least one value")
    if axis == "mask_ratio":
        return [float(v) for v in parts]
    if axis in ("n_cpm", "context", "depth", "width", "quantiles"):
        return [int(v) for v in parts]
    return parts  # data axis: source-kind subsets like real+kernelsynth


def _apply_axis(cfg: dict, axis: str, value) -> dict:
    cfg = copy.deepcopy(cfg)
    if axis == "mask_ratio":
        cfg["train"]["mask_ratio"] = value
    elif axis == "n_cpm":
        cfg["train"]["n_cpm"] = value
    elif axis == "context":
        cfg["model"]["T"] = value
    elif axis == "depth":
        cfg["model"]["n_layer"] = value
    elif axis == "width":
        cfg["model"]["d"] = value
    elif axis == "quantiles":
        cfg["model"].pop("quantile_levels", None)
        cfg["model"]["K"] = value
    elif axis == "data":
        kinds = set(str(value).split("+"))
        sources = [s for s in cfg.get("data", {}).get("sources", []) if s["kind"] in kinds]
        if not sources:
            raise ConfigError(f"data axis value {value!r} matches no configured source")
        cfg["data"]["sources"] = sources
    return validate_run_config(cfg)


def cmd_ablate(args) -> int:
    base_cfg = load_run_config(args.config)
    if args.set:
        base_cfg = apply_overrides(base_cfg, args.set)
    if "eval" not in base_cfg:
        raise ConfigError("ablation needs an 'eval' section (dataset/seasonality/horizon)")
    values = _parse_axis_values(args.axis, args.values)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    eval_cfg = base_cfg["eval"]
    eval_series = load_jsonl(eval_cfg["dataset"])
    dataset_id = Path(eval_cfg["dataset"]).stem
    case = EvalCase(
        dataset_id=dataset_id,
        seasonality=eval_cfg["seasonality"],
        horizon=eval_cfg["horizon"],
        windows=eval_cfg.get("windows", 1),
    )
    # cross-K comparisons are scored on the shared coarse grid
    q_eval = list(QUANTILE_PRESETS[9]) if args.axis == "quantiles" else None

    variants = []
    trained: dict[str, tuple] = {}
    for value in values:
        tag = f"{args.axis}={value}"
        entry = {"value": value, "tag": tag}
        try:
            cfg = _apply_axis(base_cfg, args.axis, value)
            model_cfg = model_config_from(cfg)
            train_cfg = train_config_from(cfg)
            if case.horizon > model_cfg.context_length - model_cfg.patch_size:
                raise ConfigError(
                    f"eval horizon {case.horizon} incompatible with T={model_cfg.context_length}"
                )
        except (ConfigError, PatchFMError) as e:
            entry.update(skipped=True, reason=str(e))
            variants.append(entry)
            print(f"skip {tag}: {e}", file=sys.stderr)
            continue
        pools = build_pools(cfg.get("data", {}), train_cfg.seed)
        sampler = make_window_sampler(
            pools, model_cfg.context_length, model_cfg.patch_size,
            train_cfg.n_cpm, train_cfg.mask_ratio,
        )
        var_dir = out_root / tag.replace("=", "_")
        result = train_loop(model_cfg, train_cfg, sampler, out_dir=var_dir, log_every=args.log_every)
        entry.update(
            skipped=False,
            config_hash=config_hash(cfg),
            parameters=result.weights.param_count(),
            out_dir=str(var_dir),
            final_loss=result.metrics[-1]["loss"],
        )
        variants.append(entry)
        trained[tag] = (result.weights, model_cfg)

    if not trained:
        raise ConfigError("every ablation variant was skipped")

    # one combined scoring pass: variants are ranked against each other
    # plus the statistical baselines, within this experiment only
    results = run_cases(
        None, None, {dataset_id: eval_series}, [case],
        q_eval=q_eval,
        mase_variant=eval_cfg.get("mase_variant", "paper"),
        extra_models=trained,
    )
    report = aggregate(results)
    doc = {
        "axis": args.axis,
        "values": [str(v) for v in values],
        "seed": base_cfg["train"].get("seed", 0),
        "variants": variants,
        "report": report.to_dict(),
    }
    out_file = out_root / "ablation_report.json"
    out_file.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for method in sorted(doc["report"]["aggregates"]):
        agg = doc["report"]["aggregates"][method]
        print(f"{method}: norm_crps={_fmt(agg['crps'])} rank={_fmt(agg['rank'])}")
    print(json.dumps({"out": str(out_file)}, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    records = []
    try:
        with open(args.forecast, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read forecast file {args.forecast}: {e}") from e
    if not records:
        raise DataError(f"{args.forecast} holds no forecast records")
    record = records[0]
    if args.id is not None:
        matches = [r for r in records if r.get("id") == args.id]
        if not matches:
            raise DataError(f"no forecast with id {args.id!r} in {args.forecast}")
        record = matches[0]

    truth = None
    if args.truth:
        for s in load_jsonl(args.truth):
            if s.id == record.get("id"):
                truth = s.values
                break
        if truth is None:
            raise DataError(f"id {record.get('id')!r} not found in truth file {args.truth}")
    plot_forecast_svg(record, args.out, truth=truth)
    print(json.dumps({"out": str(args.out)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchfm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"patchfm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config leaf, e.g. train.mask_ratio=0.6")
    p.add_argument("--log-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="write synthetic series as JSONL")
    p.add_argument("kind", choices=["kernelsynth", "tsmixup"])
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool", default=None, help="source series for tsmixup")
    p.add_argument("--exclude", default=None, help="ids excluded from mixing (clean mode)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("forecast", help="quantile forecasts for JSONL inputs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--levels", default=None, help="comma-separated subset of levels")
    p.add_argument("--no-sort", action="store_true", help="disable isotonic quantile sort")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score a checkpoint against the baselines")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seasonality", type=int, required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--windows", type=int, default=1)
    p.add_argument("--mase-variant", choices=["paper", "seasonal-insample"], default="paper")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train/evaluate one variant per axis value")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    p.add_argument("--log-every", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render a forecast record to SVG")
    p.add_argument("--forecast", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--id", default=None, help="series id to plot (default: first record)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ConfigError, DataError, FormatError, GenError, MaskError, PatchFMError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

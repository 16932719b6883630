"""Probabilistic forecast evaluation.

Per case (dataset x horizon), MASE and CRPS are averaged over all series
and rolling windows, normalized by Seasonal Naive's value for the same
case, then aggregated across cases with a geometric mean; ranks are
assigned per case by CRPS (ties share the average rank) and averaged
arithmetically. CRPS is approximated as the mean weighted quantile loss
over the evaluated levels. Degenerate cases (zero or non-finite
normalizer) are excluded from the geometric means and listed in the
report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .model import ModelConfig, ModelWeights, forward, isotonic_sort
from .preprocess import TimeSeries, WindowedSample, denormalize, make_windowed_sample, pad_or_truncate

MODEL_METHOD = "model"
SEASONAL_NAIVE = "seasonal_naive"
NAIVE = "naive"


@dataclass(frozen=True)
class EvalCase:
    dataset_id: str
    seasonality: int
    horizon: int
    windows: int = 1

    def __post_init__(self):
        if self.horizon < 1 or self.seasonality < 1 or self.windows < 1:
            raise ConfigError("horizon, seasonality and windows must be >= 1")

    @property
    def case_id(self) -> str:
        return f"{self.dataset_id}|H={self.horizon}"


@dataclass
class CaseResult:
    case: EvalCase
    raw: dict[str, dict[str, float]]
    n_samples: int


@dataclass
class EvalReport:
    baseline: str
    per_case: list[dict] = field(default_factory=list)
    aggregates: dict[str, dict[str, float | None]] = field(default_factory=dict)
    excluded_cases: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            if isinstance(x, float) and not math.isfinite(x):
                return None
            return x

        return clean(
            {
                "baseline": self.baseline,
                "per_case": self.per_case,
                "aggregates": self.aggregates,
                "excluded_cases": self.excluded_cases,
            }
        )


# ---------------------------------------------------------------------------
# baselines and metrics
# ---------------------------------------------------------------------------

def seasonal_naive(context: np.ndarray, seasonality: int, horizon: int) -> np.ndarray:
    """Repeat the value from `seasonality` steps earlier, recursively."""
    context = np.asarray(context, dtype=np.float64)
    if context.size < seasonality:
        raise DataError(f"context ({context.size}) shorter than seasonality ({seasonality})")
    ext = np.concatenate([context, np.empty(horizon)])
    for i in range(context.size, context.size + horizon):
        ext[i] = ext[i - seasonality]
    return ext[context.size :]


def mase(median_forecast: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error of the median scaled by the target's own
    lag-1 naive error. Constant targets give +inf (excluded upstream)."""
    target = np.asarray(target, dtype=np.float64)
    median_forecast = np.asarray(median_forecast, dtype=np.float64)
    if target.size < 2:
        raise DataError("mase needs a horizon of at least 2")
    if target.shape != median_forecast.shape:
        raise DataError("mase: forecast/target length mismatch")
    denom = np.abs(np.diff(target)).mean()
    if denom == 0.0:
        return math.inf
    return float(np.abs(target - median_forecast).mean() / denom)


def mase_seasonal_insample(
    median_forecast: np.ndarray, target: np.ndarray, history: np.ndarray, seasonality: int
) -> float:
    """Benchmark-style variant: scale by seasonal differences over the
    training history instead of lag-1 differences over the target."""
    history = np.asarray(history, dtype=np.float64)
    if history.size <= seasonality:
        raise DataError("history shorter than one season")
    denom = np.abs(history[seasonality:] - history[:-seasonality]).mean()
    if denom == 0.0:
        return math.inf
    return float(np.abs(np.asarray(target) - np.asarray(median_forecast)).mean() / denom)


def _level_column(levels, tau: float) -> int:
    for i, lv in enumerate(levels):
        if abs(lv - tau) < 1e-9:
            return i
    raise ConfigError(f"quantile level {tau} not among {list(levels)}")


def wql(forecast: np.ndarray, target: np.ndarray, levels, tau: float) -> float:
    """Weighted quantile loss at one level:
    2 * sum((tau - 1(x < q)) * (x - q)) / sum(|x|)."""
    forecast = np.asarray(forecast, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    denom = np.abs(target).sum()
    if denom == 0.0:
        raise DataError("wql: sum of |target| is zero")
    q = forecast[:, _level_column(levels, tau)]
    return float(2.0 * np.sum((tau - (target < q)) * (target - q)) / denom)


def crps(forecast: np.ndarray, target: np.ndarray, levels, q_eval=None) -> float:
    """Mean wql over the evaluated levels (CRPS approximation)."""
    q_eval = list(levels) if q_eval is None else list(q_eval)
    if not q_eval:
        raise ConfigError("crps: empty evaluation level set")
    return float(np.mean([wql(forecast, target, levels, tau) for tau in q_eval]))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ascending ranks starting at 1; ties share the average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def aggregate(case_results: list[CaseResult], baseline: str = SEASONAL_NAIVE) -> EvalReport:
    """Normalize per case by the baseline, geometric-mean across cases,
    and rank per case by CRPS."""
    if not case_results:
        raise DataError("no cases to aggregate")
    methods = sorted(case_results[0].raw.keys())
    for cr in case_results:
        for m in methods:
            if m not in cr.raw:
                raise ConfigError(f"missing metrics for method {m!r} on case {cr.case.case_id!r}")
        extra = set(cr.raw) - set(methods)
        if extra:
            raise ConfigError(f"case {cr.case.case_id!r} has unknown methods {sorted(extra)}")
    if baseline not in methods:
        raise ConfigError(f"baseline {baseline!r} not among methods {methods}")

    report = EvalReport(baseline=baseline)
    excluded = {"mase": [], "crps": []}
    normalized: dict[str, dict[str, list[float]]] = {
        m: {"mase": [], "crps": []} for m in methods
    }
    rank_lists: dict[str, list[float]] = {m: [] for m in methods}

    for cr in case_results:
        entry = {
            "dataset": cr.case.dataset_id,
            "seasonality": cr.case.seasonality,
            "horizon": cr.case.horizon,
            "windows": cr.case.windows,
            "n_samples": cr.n_samples,
            "raw": {m: dict(cr.raw[m]) for m in methods},
            "normalized": {},
            "rank": {},
        }
        for metric in ("mase", "crps"):
            base = cr.raw[baseline][metric]
            values = np.array([cr.raw[m][metric] for m in methods])
            ok = math.isfinite(base) and base > 0.0 and np.all(np.isfinite(values))
            if not ok:
                excluded[metric].append(cr.case.case_id)
                entry["normalized"] = {
                    **entry["normalized"],
                    **{m: {**entry["normalized"].get(m, {}), metric: math.inf} for m in methods},
                }
                continue
            for m in methods:
                entry["normalized"].setdefault(m, {})[metric] = cr.raw[m][metric] / base
                normalized[m][metric].append(cr.raw[m][metric] / base)
            if metric == "crps":
                ranks = _average_ranks(values)
                for m, r in zip(methods, ranks):
                    entry["rank"][m] = float(r)
                    rank_lists[m].append(float(r))
        report.per_case.append(entry)

    for m in methods:
        agg = {}
        for metric in ("mase", "crps"):
            vals = normalized[m][metric]
            agg[metric] = float(np.exp(np.mean(np.log(vals)))) if vals else math.inf
        agg["rank"] = float(np.mean(rank_lists[m])) if rank_lists[m] else math.inf
        report.aggregates[m] = agg
    report.excluded_cases = excluded
    return report


# ---------------------------------------------------------------------------
# model evaluation protocol
# ---------------------------------------------------------------------------

def build_forecast_window(
    values: np.ndarray, T: int, horizon: int, series_id: str = ""
) -> WindowedSample:
    """Last-T window with the final `horizon` positions as targets."""
    values = np.asarray(values, dtype=np.float64)
    view = TimeSeries(id=series_id or "window", freq="", start="", values=values[-T:])
    vals, pad, miss = pad_or_truncate(view, T)
    pred = np.zeros(T, dtype=bool)
    pred[-horizon:] = True
    if (pred & pad).any():
        raise DataError("window shorter than the forecast horizon")
    return make_windowed_sample(vals, pad, miss, pred, series_id=series_id)


def model_quantile_forecast(
    values: np.ndarray,
    weights: ModelWeights,
    config: ModelConfig,
    horizon: int,
    isotonic: bool = True,
    series_id: str = "",
) -> np.ndarray:
    """Original-scale quantile grid [horizon, K] for the last `horizon`
    steps of the window, in one forward pass."""
    sample = build_forecast_window(values, config.context_length, horizon, series_id)
    q_norm = forward(sample, weights, config)
    y = denormalize(q_norm, sample.stats)[-horizon:]
    return isotonic_sort(y) if isotonic else y


def run_cases(
    weights: ModelWeights | None,
    config: ModelConfig | None,
    datasets: dict[str, list[TimeSeries]],
    cases: list[EvalCase],
    q_eval=None,
    mase_variant: str = "paper",
    isotonic: bool = True,
    extra_models: dict | None = None,
) -> list[CaseResult]:
    """Score the model (if given) and the statistical baselines on every case.

    ``extra_models`` maps method name -> (weights, config) for side-by-side
    comparisons (ablations). ``q_eval`` restricts CRPS to a shared subset of
    levels across models with different K.
    """
    if mase_variant not in ("paper", "seasonal-insample"):
        raise ConfigError(f"unknown mase variant {mase_variant!r}")
    models: dict[str, tuple[ModelWeights, ModelConfig]] = {}
    if weights is not None:
        models[MODEL_METHOD] = (weights, config)
    if extra_models:
        models.update(extra_models)
    for name, (_, cfg) in models.items():
        for case in cases:
            if case.horizon > cfg.context_length - cfg.patch_size:
                raise ConfigError(
                    f"horizon {case.horizon} exceeds context_length - patch_size "
                    f"= {cfg.context_length - cfg.patch_size} for {name!r}"
                )
        levels = cfg.quantile_levels
        _level_column(levels, 0.5)  # MASE scores the predicted median
        for tau in q_eval or []:
            _level_column(levels, tau)

    results = []
    for case in cases:
        if case.dataset_id not in datasets:
            raise ConfigError(f"unknown dataset {case.dataset_id!r}")
        per_method: dict[str, dict[str, list[float]]] = {}
        n_samples = 0
        for series in datasets[case.dataset_id]:
            v = series.values
            for w in range(case.windows):
                end = v.size - w * case.horizon
                t_start = end - case.horizon
                if t_start < case.seasonality:
                    raise DataError(
                        f"series {series.id!r}: not enough context for window {w} "
                        f"(needs >= {case.seasonality} before the target)"
                    )
                target = v[t_start:end]
                context = v[:t_start]
                if not np.all(np.isfinite(target)):
                    continue
                n_samples += 1

                # each entry: (median[H], grid[H, K], levels)
                forecasts: dict[str, tuple[np.ndarray, np.ndarray, tuple[float, ...]]] = {}
                for name, (mw, mc) in models.items():
                    grid = model_quantile_forecast(
                        v[:end], mw, mc, case.horizon, isotonic=isotonic, series_id=series.id
                    )
                    med = grid[:, _level_column(mc.quantile_levels, 0.5)]
                    forecasts[name] = (med, grid, mc.quantile_levels)
                for name, point in (
                    (SEASONAL_NAIVE, seasonal_naive(context, case.seasonality, case.horizon)),
                    (NAIVE, seasonal_naive(context, 1, case.horizon)),
                ):
                    ref_levels = tuple(q_eval) if q_eval else (0.5,)
                    grid = np.tile(point[:, None], (1, len(ref_levels)))
                    forecasts[name] = (point, grid, ref_levels)

                for name, (med, grid, levels) in forecasts.items():
                    if mase_variant == "paper":
                        m_val = mase(med, target)
                    else:
                        m_val = mase_seasonal_insample(med, target, context, case.seasonality)
                    c_val = crps(grid, target, levels, q_eval=q_eval)
                    per_method.setdefault(name, {"mase": [], "crps": []})
                    per_method[name]["mase"].append(m_val)
                    per_method[name]["crps"].append(c_val)
        if n_samples == 0:
            raise DataError(f"case {case.case_id!r} produced no scoreable windows")
        raw = {
            name: {metric: float(np.mean(vals)) for metric, vals in metrics.items()}
            for name, metrics in per_method.items()
        }
        results.append(CaseResult(case=case, raw=raw, n_samples=n_samples))
    return results


def evaluate_model(
    weights: ModelWeights | None,
    config: ModelConfig | None,
    datasets: dict[str, list[TimeSeries]],
    cases: list[EvalCase],
    q_eval=None,
    mase_variant: str = "paper",
    isotonic: bool = True,
    extra_models: dict | None = None,
) -> EvalReport:
    """Full protocol: per-case scoring, normalization, aggregation."""
    case_results = run_cases(
        weights, config, datasets, cases, q_eval=q_eval, mase_variant=mase_variant,
        isotonic=isotonic, extra_models=extra_models,
    )
    return aggregate(case_results)

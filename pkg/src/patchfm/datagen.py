"""Synthetic pretraining data and series I/O.

KernelSynth draws one sample from a zero-mean Gaussian process whose kernel
is a random composition (sums/products) from a small bank: periodic, RBF,
linear, white, constant. Long series are drawn on a coarse anchor grid
(dense Cholesky is cubic) and linearly interpolated. TSMixup produces a
convex combination of standardized windows from up to three source series,
tagged with provenance ids so a clean (exclusion-filtered) corpus can be
verified. Real series travel as JSONL, one object per line:
``{"id", "freq", "start", "values": [number|null, ...]}``.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, GenError
from .preprocess import (
    TimeSeries,
    WindowedSample,
    adaptive_cpm_block,
    make_windowed_sample,
    pad_or_truncate,
    sample_cpm_mask,
)

KERNEL_KINDS = ("periodic", "rbf", "linear", "white", "constant")
PERIOD_GRID = (7, 12, 24, 48, 52, 96, 168)
MAX_ANCHORS = 2048
MAX_SPEC_RETRIES = 5
# escalation ladder, scaled by trace/n; the last rung is the spec bound
JITTERS = (1e-12, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class KernelSpec:
    """Composition chain: kernels combined left-to-right with + or *."""

    components: tuple[tuple[str, float], ...]
    ops: tuple[str, ...]

    def __post_init__(self):
        if not self.components:
            raise GenError("kernel spec needs at least one component")
        if len(self.ops) != len(self.components) - 1:
            raise GenError("need exactly one operator between consecutive kernels")
        for kind, param in self.components:
            if kind not in KERNEL_KINDS:
                raise GenError(f"unknown kernel kind {kind!r}")
            if param <= 0:
                raise GenError(f"kernel parameter must be > 0, got {param} for {kind}")


@dataclass(frozen=True)
class MixupSpec:
    sources: tuple[str, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights)
        if len(self.sources) != w.size or w.size == 0:
            raise DataError("mixup weights must match sources")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise DataError("mixup weights must be a convex combination")


def sample_kernel_spec(rng: np.random.Generator, length: int, max_components: int = 5) -> KernelSpec:
    """Draw 1..max_components kernels and random combination operators."""
    j = int(rng.integers(1, max_components + 1))
    comps = []
    for _ in range(j):
        kind = KERNEL_KINDS[int(rng.integers(0, len(KERNEL_KINDS)))]
        if kind == "periodic":
            periods = [p for p in PERIOD_GRID if p <= length / 2]
            param = float(periods[int(rng.integers(0, len(periods)))]) if periods else max(2.0, length / 4)
        elif kind == "rbf":
            lo, hi = math.log(max(2.0, length / 100)), math.log(max(4.0, length / 2))
            param = math.exp(rng.uniform(lo, hi))
        elif kind == "linear":
            param = math.exp(rng.uniform(math.log(0.1), math.log(10.0)))
        elif kind == "white":
            param = math.exp(rng.uniform(math.log(0.01), math.log(1.0)))
        else:  # constant
            param = math.exp(rng.uniform(math.log(0.1), math.log(5.0)))
        comps.append((kind, param))
    ops = tuple("+" if rng.random() < 0.5 else "*" for _ in range(j - 1))
    return KernelSpec(components=tuple(comps), ops=ops)


def _gram(kind: str, param: float, t: np.ndarray, length: int) -> np.ndarray:
    d = t[:, None] - t[None, :]
    if kind == "periodic":
        return np.exp(-2.0 * np.sin(math.pi * d / param) ** 2)
    if kind == "rbf":
        return np.exp(-(d * d) / (2.0 * param * param))
    if kind == "linear":
        s = t / max(1, length)
        return param * (s[:, None] * s[None, :])
    if kind == "white":
        return param * np.eye(t.size)
    return np.full((t.size, t.size), param)  # constant


def kernel_gram(spec: KernelSpec, t: np.ndarray, length: int) -> np.ndarray:
    k = _gram(*spec.components[0], t, length)
    for (kind, param), op in zip(spec.components[1:], spec.ops):
        g = _gram(kind, param, t, length)
        k = k + g if op == "+" else k * g
    return k


def _draw_gp(rng: np.random.Generator, spec: KernelSpec, t: np.ndarray, length: int) -> np.ndarray | None:
    k = kernel_gram(spec, t, length)
    n = t.size
    scale = max(float(np.trace(k)) / n, 1e-12)
    for jit in JITTERS:
        try:
            chol = np.linalg.cholesky(k + jit * scale * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        return chol @ rng.standard_normal(n)
    return None


def kernelsynth_generate(
    rng: np.random.Generator,
    length: int,
    spec: KernelSpec | None = None,
    spec_sampler=None,
    augment: bool = True,
    series_id: str = "kernelsynth",
    freq: str = "H",
    start: str = "2000-01-01T00:00:00",
) -> TimeSeries:
    """One GP draw; deterministic per rng state.

    Lengths beyond 2048 are drawn on a coarse anchor grid and linearly
    interpolated. A non-PSD Gram (after the jitter ladder) retries with a
    fresh spec a bounded number of times, then raises GenError.
    """
    if length < 2:
        raise DataError(f"series length must be >= 2, got {length}")
    if spec_sampler is None:
        spec_sampler = sample_kernel_spec

    n_anchor = min(length, MAX_ANCHORS)
    t = np.arange(length, dtype=np.float64) if n_anchor == length else np.linspace(
        0.0, length - 1.0, n_anchor
    )

    attempts = 1 if spec is not None else MAX_SPEC_RETRIES
    y = None
    for _ in range(attempts):
        active = spec if spec is not None else spec_sampler(rng, length)
        y = _draw_gp(rng, active, t, length)
        if y is not None:
            break
    if y is None:
        raise GenError(f"no PSD Gram after {attempts} kernel specs (length {length})")

    if n_anchor != length:
        y = np.interp(np.arange(length, dtype=np.float64), t, y)

    if augment:
        # each applied with probability 0.1; draw order is fixed for determinism
        gates = rng.random(3)
        std = float(y.std()) or 1.0
        if gates[0] < 0.1:
            y = y * math.exp(rng.uniform(math.log(0.25), math.log(4.0)))
        if gates[1] < 0.1:
            y = y + np.linspace(0.0, rng.normal(0.0, std), length)
        if gates[2] < 0.1:
            y = y + rng.normal(0.0, 0.1 * std, length)

    return TimeSeries(id=series_id, freq=freq, start=start, values=y)


def tsmixup_generate(
    rng: np.random.Generator,
    pool: list[TimeSeries],
    length: int,
    exclude: frozenset[str] | set[str] = frozenset(),
    max_sources: int = 3,
    alpha: float = 1.5,
    series_id: str = "tsmixup",
    freq: str = "H",
    start: str = "2000-01-01T00:00:00",
) -> TimeSeries:
    """Convex combination of standardized windows from 1..3 source series.

    Sources on the exclusion list (or shorter than the window) are never
    used; the output carries the contributing ids in ``sources``.
    """
    eligible = [s for s in pool if s.id not in exclude and s.values.size >= length]
    if not eligible:
        raise DataError("tsmixup: no eligible source series (pool empty after filtering)")
    k = int(rng.integers(1, min(max_sources, len(eligible)) + 1))
    picks = rng.choice(len(eligible), size=k, replace=False)
    weights = rng.dirichlet(np.full(k, alpha))

    mixed = np.zeros(length)
    ids = []
    for w, idx in zip(weights, picks):
        src = eligible[int(idx)]
        window = None
        for _ in range(10):
            s0 = int(rng.integers(0, src.values.size - length + 1))
            cand = src.values[s0 : s0 + length]
            if np.isfinite(cand).sum() >= 2:
                window = cand
                break
        if window is None:
            raise DataError(f"tsmixup: source {src.id!r} has no usable window of length {length}")
        finite = window[np.isfinite(window)]
        mu = float(finite.mean())
        sd = max(float(finite.std()), 1e-6)
        mixed = mixed + w * (window - mu) / sd
        ids.append(src.id)
    return TimeSeries(id=series_id, freq=freq, start=start, values=mixed, sources=tuple(ids))


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------

def iter_jsonl(path: str | Path):
    """Yield TimeSeries from a JSONL file; DataError names the bad line."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: invalid JSON: {e}") from e
            if not isinstance(obj, dict):
                raise DataError(f"{path}: line {lineno}: expected an object")
            for key in ("id", "freq", "start", "values"):
                if key not in obj:
                    raise DataError(f"{path}: line {lineno}: missing key {key!r}")
            if not isinstance(obj["values"], list):
                raise DataError(f"{path}: line {lineno}: 'values' must be a list")
            values = np.array(
                [np.nan if v is None else float(v) for v in obj["values"]], dtype=np.float64
            )
            try:
                yield TimeSeries(
                    id=str(obj["id"]),
                    freq=str(obj["freq"]),
                    start=str(obj["start"]),
                    values=values,
                    sources=tuple(obj.get("sources", ())),
                )
            except DataError as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e


def load_jsonl(path: str | Path) -> list[TimeSeries]:
    return list(iter_jsonl(path))


def write_jsonl(series: list[TimeSeries] | "iter", path: str | Path) -> int:
    """Write series as JSONL (NaN -> null); returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in series:
            obj = {
                "id": s.id,
                "freq": s.freq,
                "start": s.start,
                "values": [None if not math.isfinite(v) else float(v) for v in s.values],
            }
            if s.sources:
                obj["sources"] = list(s.sources)
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
            count += 1
    return count


# ---------------------------------------------------------------------------
# corpus + window sampling
# ---------------------------------------------------------------------------

def max_workers() -> int:
    """Internal parallelism cap from PATCHFM_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("PATCHFM_THREADS", "1")))
    except ValueError:
        return 1


def _indexed_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0, index)))


def kernelsynth_corpus(
    seed: int, num: int, length: int, id_prefix: str = "kernelsynth", freq: str = "H"
) -> list[TimeSeries]:
    """num independent KernelSynth draws; stream i depends only on (seed, i),
    so the result is identical regardless of worker count."""

    def gen(i: int) -> TimeSeries:
        return kernelsynth_generate(
            _indexed_rng(seed, i), length, series_id=f"{id_prefix}-{i:06d}", freq=freq
        )

    workers = max_workers()
    if workers == 1 or num < 4:
        return [gen(i) for i in range(num)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(gen, range(num)))


def tsmixup_corpus(
    seed: int,
    num: int,
    length: int,
    pool: list[TimeSeries],
    exclude: frozenset[str] | set[str] = frozenset(),
    id_prefix: str = "tsmixup",
    freq: str = "H",
) -> list[TimeSeries]:
    return [
        tsmixup_generate(
            _indexed_rng(seed, i), pool, length, exclude=exclude,
            series_id=f"{id_prefix}-{i:06d}", freq=freq,
        )
        for i in range(num)
    ]


def sample_training_window(
    rng: np.random.Generator,
    series: TimeSeries,
    T: int,
    L: int,
    n_cpm: int,
    mask_ratio: float,
) -> WindowedSample:
    """Random window -> padding/masks -> CPM -> normalization, one sample."""
    if series.n_observed() < 2:
        raise DataError(f"series {series.id!r} has fewer than 2 observed values")
    vals = series.values
    if vals.size > T:
        end = int(rng.integers(T, vals.size + 1))
        window_vals = vals[end - T : end]
    else:
        window_vals = vals
    t_x = min(vals.size, T)
    view = TimeSeries(id=series.id, freq=series.freq, start=series.start, values=window_vals)
    values, pad, miss = pad_or_truncate(view, T)
    n_eff = adaptive_cpm_block(t_x, L, n_cpm)
    valid = ~pad & ~miss
    pred = sample_cpm_mask(rng, T, L, n_eff, mask_ratio, valid)
    return make_windowed_sample(values, pad, miss, pred, series_id=series.id)


@dataclass
class SourcePool:
    name: str
    series: list[TimeSeries]
    weight: float = 1.0


def make_window_sampler(pools: list[SourcePool], T: int, L: int, n_cpm: int, mask_ratio: float):
    """Batch sampler over a weighted mixture of series pools."""
    pools = [p for p in pools if p.series]
    if not pools:
        raise DataError("no non-empty source pools")
    weights = np.array([max(0.0, p.weight) for p in pools], dtype=np.float64)
    if weights.sum() <= 0:
        raise DataError("source pool weights sum to zero")
    weights = weights / weights.sum()

    def sample_batch(rng: np.random.Generator, batch_size: int) -> list[WindowedSample]:
        out = []
        for _ in range(batch_size):
            pool = pools[int(rng.choice(len(pools), p=weights))]
            series = pool.series[int(rng.integers(0, len(pool.series)))]
            out.append(sample_training_window(rng, series, T, L, n_cpm, mask_ratio))
        return out

    return sample_batch

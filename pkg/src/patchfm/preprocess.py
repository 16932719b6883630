"""Raw series -> model inputs.

Pipeline: left-pad or truncate to the context length, derive the three
component masks (prediction targets, inherent missing values, padding),
sample contiguous patch masks, compute visible-only normalization stats,
apply the asinh transform, and zero-fill hidden positions in the model
input copy. The inverse transform maps normalized quantiles back to the
original scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DataWarning, ShapeError

SIGMA_FLOOR_SCALE = 1e-6


@dataclass
class TimeSeries:
    """Univariate series; NaN marks a missing observation."""

    id: str
    freq: str
    start: str
    values: np.ndarray
    sources: tuple[str, ...] = ()  # provenance for mixup-generated series

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise DataError(f"series {self.id!r}: values must be a non-empty 1-D array")

    def n_observed(self) -> int:
        return int(np.isfinite(self.values).sum())


@dataclass
class MaskSet:
    """Component masks over a context window; True = hidden from the model."""

    pred: np.ndarray
    miss: np.ndarray
    pad: np.ndarray

    def __post_init__(self):
        for name in ("pred", "miss", "pad"):
            arr = np.asarray(getattr(self, name), dtype=bool)
            setattr(self, name, arr)
        if not (self.pred.shape == self.miss.shape == self.pad.shape):
            raise ShapeError("mask components must share one shape")
        if np.any(self.pred & self.pad):
            raise DataError("prediction targets must never fall on padding")

    @property
    def union(self) -> np.ndarray:
        return self.pred | self.miss | self.pad


@dataclass
class NormStats:
    """Mean/std of the visible points only; sigma is floor-clamped."""

    mu: float
    sigma: float


@dataclass
class WindowedSample:
    """One model-ready window.

    ``x_norm`` is the asinh-normalized input with every hidden position
    zero-filled; ``values`` keeps the original-scale window (missing and
    padded positions stored as 0.0) so targets can be recovered.
    """

    x_norm: np.ndarray
    masks: MaskSet
    stats: NormStats
    values: np.ndarray
    series_id: str = ""

    @property
    def targets(self) -> np.ndarray:
        """Original-scale values at prediction positions."""
        return self.values[self.masks.pred]


def pad_or_truncate(series: TimeSeries, T: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left-pad with zeros or keep the most recent T points.

    Returns (values[T], m_pad[T], m_miss[T]); missing observations are
    stored as 0.0 with the miss flag set.
    """
    raw = series.values
    if raw.size == 0:
        raise DataError(f"series {series.id!r} is empty")
    if raw.size >= T:
        window = raw[-T:]
        pad = np.zeros(T, dtype=bool)
    else:
        window = np.concatenate([np.zeros(T - raw.size), raw])
        pad = np.zeros(T, dtype=bool)
        pad[: T - raw.size] = True
    miss = ~np.isfinite(window) & ~pad
    values = np.where(np.isfinite(window), window, 0.0)
    return values, pad, miss


def adaptive_cpm_block(T_x: int, L: int, n_cpm: int) -> int:
    """Effective block count: min(ceil(ceil(T_x / L) / 4), n_cpm)."""
    if T_x < 1 or L < 1 or n_cpm < 1:
        raise DataError("adaptive_cpm_block arguments must be >= 1")
    return min(math.ceil(math.ceil(T_x / L) / 4), n_cpm)


def sample_cpm_mask(
    rng: np.random.Generator,
    T: int,
    L: int,
    n_cpm_eff: int,
    ratio: float,
    valid: np.ndarray,
) -> np.ndarray:
    """Sample a prediction mask: a random tail plus contiguous blocks.

    A tail of U{0, ..., 4*n_cpm_eff} observed timestamps is always masked.
    Blocks of ``n_cpm_eff * L`` consecutive positions, starting at multiples
    of L inside the valid region, are then added (non-overlapping and
    non-adjacent, so interior masked runs have exactly the block length)
    until the masked fraction of valid observations first reaches ``ratio``.
    ``valid`` flags observed (non-pad, non-missing) positions. At least two
    valid positions are always left visible for the normalization stats.
    """
    if not 0.0 < ratio < 1.0:
        raise DataError(f"mask ratio must be in (0, 1), got {ratio}")
    valid = np.asarray(valid, dtype=bool)
    valid_idx = np.flatnonzero(valid)
    n_valid = valid_idx.size
    if n_valid == 0:
        raise DataError("valid region is empty")

    pred = np.zeros(T, dtype=bool)
    block = n_cpm_eff * L
    budget = max(0, n_valid - 2)  # visible floor for NormStats

    tail = int(rng.integers(0, 4 * n_cpm_eff + 1))
    tail = min(tail, budget)
    if tail:
        pred[valid_idx[-tail:]] = True

    if n_valid < block:
        # Too short for even one block: fall back to a pure tail mask.
        warnings.warn(
            f"valid region ({n_valid}) shorter than one CPM block ({block}); masking tail only",
            DataWarning,
            stacklevel=2,
        )
        want = min(budget, max(tail, math.ceil(ratio * n_valid)))
        if want:
            pred[valid_idx[-want:]] = True
        return pred

    def masked_valid() -> int:
        return int(np.count_nonzero(pred & valid))

    first_valid = valid_idx[0]
    start_min = ((first_valid + L - 1) // L) * L
    starts = np.arange(start_min, T, L)
    target = ratio * n_valid

    while masked_valid() < target and starts.size:
        placed = False
        for _ in range(1000):
            s = int(starts[rng.integers(0, starts.size)])
            lo, hi = s, min(s + block, T)
            # reject overlap and adjacency: interior runs stay exactly one block
            if pred[max(0, lo - 1) : min(T, hi + 1)].any():
                continue
            new = int(np.count_nonzero(valid[lo:hi] & ~pred[lo:hi]))
            if masked_valid() + new > n_valid - 2:
                continue
            pred[lo:hi] = True
            placed = True
            break
        if not placed:
            # saturated non-overlapping placement: merge into the best start
            best_s, best_new = -1, 0
            current = masked_valid()
            for s in starts:
                lo, hi = int(s), min(int(s) + block, T)
                new = int(np.count_nonzero(valid[lo:hi] & ~pred[lo:hi]))
                if new > best_new and current + new <= n_valid - 2:
                    best_s, best_new = int(s), new
            if best_new == 0:
                break
            pred[best_s : min(best_s + block, T)] = True
    return pred


def mask_aware_stats(values: np.ndarray, m_union: np.ndarray) -> NormStats:
    """Mean and population std over visible points only.

    Values at masked positions cannot influence the result (they are never
    read). Sigma is clamped to 1e-6 * max(1, |mu|).
    """
    visible = np.asarray(values, dtype=np.float64)[~np.asarray(m_union, dtype=bool)]
    if visible.size < 2:
        raise DataError(f"need >= 2 visible points for normalization, got {visible.size}")
    mu = float(visible.mean())
    sigma = float(np.sqrt(np.mean((visible - mu) ** 2)))
    floor = SIGMA_FLOOR_SCALE * max(1.0, abs(mu))
    return NormStats(mu=mu, sigma=max(sigma, floor))


def normalize_asinh(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """asinh((x - mu) / sigma), elementwise."""
    return np.arcsinh((np.asarray(values, dtype=np.float64) - stats.mu) / stats.sigma)


def denormalize(q_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse transform back to the original scale: sinh(q) * sigma + mu."""
    return np.sinh(np.asarray(q_norm, dtype=np.float64)) * stats.sigma + stats.mu


def patchify(
    x_norm: np.ndarray, masks: MaskSet, L: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reshape a window into non-overlapping patches.

    Returns (patches[N, L], patch_mask[N, L], pad_patch[N]); pad_patch flags
    patches made entirely of padding, which are dropped from attention.
    """
    x_norm = np.asarray(x_norm, dtype=np.float64)
    T = x_norm.size
    if T % L != 0:
        raise ShapeError(f"window length {T} not divisible by patch size {L}")
    n = T // L
    patches = x_norm.reshape(n, L)
    patch_mask = masks.union.reshape(n, L)
    pad_patch = masks.pad.reshape(n, L).all(axis=1)
    return patches, patch_mask, pad_patch


def make_windowed_sample(
    values: np.ndarray,
    pad: np.ndarray,
    miss: np.ndarray,
    pred: np.ndarray,
    series_id: str = "",
) -> WindowedSample:
    """Assemble a WindowedSample: stats, asinh transform, zero-fill."""
    masks = MaskSet(pred=pred, miss=miss, pad=pad)
    stats = mask_aware_stats(values, masks.union)
    x_norm = np.where(masks.union, 0.0, normalize_asinh(values, stats))
    return WindowedSample(
        x_norm=x_norm, masks=masks, stats=stats, values=np.asarray(values, dtype=np.float64),
        series_id=series_id,
    )

"""Masked pinball-loss training.

The objective averages the quantile (pinball) loss over prediction targets
only; missing and padded positions contribute nothing, bit-exactly. The
optimizer is adaptive-moment with decoupled weight decay, driven by a
cosine schedule with linear warmup and global gradient-norm clipping.
Training is deterministic given the seed: the batch drawn at step s depends
only on (seed, s), which also makes resuming exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, ModelWeights, batch_inputs, forward_graph
from .preprocess import WindowedSample, normalize_asinh
from .tensor import Tensor

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int
    peak_lr: float = 3e-4
    min_lr: float = 1e-5
    warmup_fraction: float = 0.1
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    mask_ratio: float = 0.4
    n_cpm: int = 8
    seed: int = 0
    checkpoint_every: int | None = None  # default: total_steps // 20

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be >= 1")
        if not 0.0 < self.min_lr <= self.peak_lr:
            raise ConfigError(f"need 0 < min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.n_cpm < 1:
            raise ConfigError("n_cpm must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")

    @property
    def checkpoint_cadence(self) -> int:
        if self.checkpoint_every is not None:
            return max(1, int(self.checkpoint_every))
        return max(1, self.total_steps // 20)

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "peak_lr": self.peak_lr,
            "min_lr": self.min_lr,
            "warmup_fraction": self.warmup_fraction,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "grad_clip": self.grad_clip,
            "mask_ratio": self.mask_ratio,
            "n_cpm": self.n_cpm,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def pinball_loss(
    q_norm: Tensor,
    targets_norm: np.ndarray,
    m_pred: np.ndarray,
    m_miss: np.ndarray,
    m_pad: np.ndarray,
    levels,
) -> Tensor:
    """Masked quantile loss in normalized space.

    For each eligible position t (prediction target that is neither missing
    nor padding) and each level tau:
    (x_t - q_t^tau) * (tau - 1(x_t <= q_t^tau)), summed over levels and
    averaged over eligible positions. The gradient w.r.t. predictions at
    non-eligible positions is exactly zero.
    """
    levels = np.asarray(levels, dtype=np.float64)
    eligible = np.asarray(m_pred, bool) & ~np.asarray(m_miss, bool) & ~np.asarray(m_pad, bool)
    count = int(eligible.sum())
    if count == 0:
        raise DataError("pinball_loss: no eligible target positions")
    t3 = np.asarray(targets_norm, dtype=np.float64)[..., None]
    # the indicator is a constant w.r.t. the (a.e.) gradient
    coeff = (levels - (t3 <= q_norm.data)) * eligible[..., None] / count
    return tt.tensor_sum(tt.mul(tt.sub(Tensor(t3), q_norm), Tensor(coeff)))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup, then cosine decay to min_lr."""
    if not 0 <= step <= cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps}]")
    warmup = round(cfg.warmup_fraction * cfg.total_steps)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if cfg.total_steps == warmup:
        return cfg.peak_lr
    progress = (step - warmup) / (cfg.total_steps - warmup)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for g in grads.values():
        s = float(np.sum(g * g))
        if not math.isfinite(s):
            raise NumericError("non-finite gradient encountered")
        sq += s
    norm = math.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, weights: ModelWeights) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in weights.items()},
            v={n: np.zeros_like(t.data) for n, t in weights.items()},
        )


def optimizer_step(
    weights: ModelWeights,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """Bias-corrected adaptive update plus decoupled weight decay."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, tensor in weights.items():
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        tensor.data = tensor.data - lr * cfg.weight_decay * tensor.data - update


@dataclass
class Batch:
    values_patches: np.ndarray
    mask_patches: np.ndarray
    pad_patch: np.ndarray
    targets_norm: np.ndarray
    pred: np.ndarray
    miss: np.ndarray
    pad: np.ndarray


def make_batch(samples: list[WindowedSample], config: ModelConfig) -> Batch:
    values_patches, mask_patches, pad_patch = batch_inputs(samples, config)
    targets_norm = np.stack([normalize_asinh(s.values, s.stats) for s in samples])
    return Batch(
        values_patches=values_patches,
        mask_patches=mask_patches,
        pad_patch=pad_patch,
        targets_norm=targets_norm,
        pred=np.stack([s.masks.pred for s in samples]),
        miss=np.stack([s.masks.miss for s in samples]),
        pad=np.stack([s.masks.pad for s in samples]),
    )


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Generator for the batch drawn at ``step``; depends only on (seed, step)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2, step)))


def init_rng(seed: int) -> np.random.Generator:
    """Generator for weight initialization."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))


@dataclass
class TrainResult:
    weights: ModelWeights
    state: AdamState
    metrics: list[dict] = field(default_factory=list)


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sample_batch,
    out_dir: str | Path | None = None,
    start: tuple[ModelWeights, AdamState, int] | None = None,
    log_every: int | None = None,
) -> TrainResult:
    """Run the training loop.

    ``sample_batch(rng, batch_size)`` must return model-ready windows.
    Checkpoints are written to ``out_dir`` at the configured cadence plus a
    ``final.ptfm``; per-step metrics go to ``out_dir/metrics.jsonl``. On a
    NumericError the loop re-raises, leaving the last written checkpoint on
    disk.
    """
    from .checkpoint import save_checkpoint  # cycle: checkpoint stores TrainConfig

    if start is not None:
        weights, state, start_step = start
    else:
        weights = ModelWeights.init(model_cfg, init_rng(train_cfg.seed))
        state = AdamState.init(weights)
        start_step = 0

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_path / "metrics.jsonl", "a" if start_step else "w")

    result = TrainResult(weights=weights, state=state)
    cadence = train_cfg.checkpoint_cadence
    try:
        for step in range(start_step, train_cfg.total_steps):
            samples = sample_batch(step_rng(train_cfg.seed, step), train_cfg.batch_size)
            batch = make_batch(samples, model_cfg)
            weights.zero_grads()
            q = forward_graph(
                batch.values_patches, batch.mask_patches, batch.pad_patch, weights, model_cfg
            )
            loss = pinball_loss(
                q, batch.targets_norm, batch.pred, batch.miss, batch.pad,
                model_cfg.quantile_levels,
            )
            tt.backward(loss)
            grads = {
                n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in weights.items()
            }
            grads, grad_norm = clip_grad_norm(grads, train_cfg.grad_clip)
            lr = lr_at(step + 1, train_cfg)
            optimizer_step(weights, grads, state, lr, train_cfg)

            record = {
                "step": step + 1,
                "loss": float(loss.data.reshape(())),
                "lr": lr,
                "grad_norm": grad_norm,
            }
            result.metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
            if log_every and (step + 1) % log_every == 0:
                print(f"step {step + 1}/{train_cfg.total_steps} loss {record['loss']:.5f}")
            if out_path is not None and (step + 1) % cadence == 0:
                save_checkpoint(
                    out_path / f"step_{step + 1:06d}.ptfm", weights, model_cfg,
                    train_cfg=train_cfg, state=state, step=step + 1,
                )
        if out_path is not None:
            save_checkpoint(
                out_path / "final.ptfm", weights, model_cfg,
                train_cfg=train_cfg, state=state, step=train_cfg.total_steps,
            )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result

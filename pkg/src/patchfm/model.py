"""Encoder-only patch Transformer with a quantile head.

Patches plus their mask bits are projected by a residual block
(f_res(h) + f_out(sigmoid(f_in(h)))), learnable positional embeddings are
added, a pre-norm full-attention stack mixes patches (fully-padded patches
are excluded from the keys), and a second residual block decodes each patch
embedding into L*K normalized quantile values. One forward pass yields the
whole T x K grid; there is no autoregressive loop anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import ConfigError, MaskError, ShapeError
from .preprocess import WindowedSample, patchify
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    context_length: int
    patch_size: int
    n_layers: int
    d_model: int
    quantile_levels: tuple[float, ...]
    head_dim: int | None = None  # None: min(64, d_model)
    ffn_mult: int = 4

    def __post_init__(self):
        object.__setattr__(self, "quantile_levels", tuple(float(q) for q in self.quantile_levels))
        if self.context_length % self.patch_size != 0:
            raise ConfigError(
                f"context_length {self.context_length} not divisible by patch_size {self.patch_size}"
            )
        if self.n_layers < 0 or self.d_model < 1 or self.ffn_mult < 1:
            raise ConfigError("n_layers must be >= 0, d_model and ffn_mult >= 1")
        hd = self.effective_head_dim
        if self.d_model % hd != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by head_dim {hd}")
        q = self.quantile_levels
        if not q or any(not 0.0 < x < 1.0 for x in q) or any(b <= a for a, b in zip(q, q[1:])):
            raise ConfigError("quantile_levels must be strictly increasing within (0, 1)")

    @property
    def effective_head_dim(self) -> int:
        return self.head_dim if self.head_dim is not None else min(64, self.d_model)

    @property
    def n_heads(self) -> int:
        return self.d_model // self.effective_head_dim

    @property
    def n_patches(self) -> int:
        return self.context_length // self.patch_size

    @property
    def n_quantiles(self) -> int:
        return len(self.quantile_levels)

    def to_dict(self) -> dict:
        return {
            "context_length": self.context_length,
            "patch_size": self.patch_size,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "quantile_levels": list(self.quantile_levels),
            "head_dim": self.head_dim,
            "ffn_mult": self.ffn_mult,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            context_length=int(d["context_length"]),
            patch_size=int(d["patch_size"]),
            n_layers=int(d["n_layers"]),
            d_model=int(d["d_model"]),
            quantile_levels=tuple(d["quantile_levels"]),
            head_dim=None if d.get("head_dim") is None else int(d["head_dim"]),
            ffn_mult=int(d.get("ffn_mult", 4)),
        )


@dataclass
class ModelWeights:
    """All learnable tensors, keyed by a stable dotted name."""

    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params.keys())

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelWeights":
        L, d = config.patch_size, config.d_model
        out = L * config.n_quantiles
        params: dict[str, Tensor] = {}

        def linear(name, fan_in, fan_out):
            params[f"{name}_w"] = Tensor(
                rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)),
                requires_grad=True,
            )
            params[f"{name}_b"] = Tensor(np.zeros(fan_out), requires_grad=True)

        def norm(name):
            params[f"{name}_g"] = Tensor(np.ones(d), requires_grad=True)
            params[f"{name}_b"] = Tensor(np.zeros(d), requires_grad=True)

        linear("embed.res", 2 * L, d)
        linear("embed.in", 2 * L, d)
        linear("embed.out", d, d)
        params["pos"] = Tensor(rng.normal(0.0, 0.02, size=(config.n_patches, d)), requires_grad=True)
        for i in range(config.n_layers):
            norm(f"block{i}.ln1")
            for proj in ("wq", "wk", "wv", "wo"):
                linear(f"block{i}.attn.{proj}", d, d)
            norm(f"block{i}.ln2")
            linear(f"block{i}.ffn.w1", d, config.ffn_mult * d)
            linear(f"block{i}.ffn.w2", config.ffn_mult * d, d)
        norm("final.ln")
        linear("head.res", d, out)
        linear("head.in", d, out)
        linear("head.out", out, out)
        return cls(params=params)


def residual_block(h: Tensor, w_res, b_res, w_in, b_in, w_out, b_out) -> Tensor:
    """h -> f_res(h) + f_out(sigmoid(f_in(h)))."""
    res = tt.matmul(h, w_res) + b_res
    gate = tt.sigmoid(tt.matmul(h, w_in) + b_in)
    return res + (tt.matmul(gate, w_out) + b_out)


def embed_patches(
    values_patches: np.ndarray,
    mask_patches: np.ndarray,
    weights: ModelWeights,
) -> Tensor:
    """Project [.., N, L] value patches and their mask bits to [.., N, d].

    The 2L-wide input is the concatenation of zero-filled values and 0/1
    mask bits; positional embeddings are added per patch index.
    """
    x = np.concatenate(
        [np.asarray(values_patches, dtype=np.float64), np.asarray(mask_patches, dtype=np.float64)],
        axis=-1,
    )
    p = weights.params
    h = residual_block(
        Tensor(x),
        p["embed.res_w"], p["embed.res_b"],
        p["embed.in_w"], p["embed.in_b"],
        p["embed.out_w"], p["embed.out_b"],
    )
    pos = p["pos"]
    if h.shape[-2] != pos.shape[0]:
        raise ShapeError(f"{h.shape[-2]} patches but positional table has {pos.shape[0]} rows")
    return h + pos


def encode(h: Tensor, pad_patch: np.ndarray, weights: ModelWeights, config: ModelConfig) -> Tensor:
    """Pre-norm attention/FFN stack; fully-padded patches never serve as keys."""
    pad_patch = np.asarray(pad_patch, dtype=bool)
    if pad_patch.all(axis=-1).any():
        raise MaskError("a sample consists entirely of padded patches")
    p = weights.params
    n_heads, head_dim, d = config.n_heads, config.effective_head_dim, config.d_model
    scale = 1.0 / math.sqrt(head_dim)
    batched = h.ndim == 3
    n = h.shape[-2]
    keep = ~pad_patch  # [.., N]
    if batched:
        keep_keys = keep[:, None, None, :]  # broadcast over heads and queries
    else:
        keep_keys = keep[None, None, :]

    def split_heads(x: Tensor) -> Tensor:
        if batched:
            return tt.transpose(tt.reshape(x, (x.shape[0], n, n_heads, head_dim)), (0, 2, 1, 3))
        return tt.transpose(tt.reshape(x, (n, n_heads, head_dim)), (1, 0, 2))

    def merge_heads(x: Tensor) -> Tensor:
        if batched:
            return tt.reshape(tt.transpose(x, (0, 2, 1, 3)), (x.shape[0], n, d))
        return tt.reshape(tt.transpose(x, (1, 0, 2)), (n, d))

    for i in range(config.n_layers):
        a = tt.layer_norm(h, p[f"block{i}.ln1_g"], p[f"block{i}.ln1_b"])
        q = split_heads(tt.matmul(a, p[f"block{i}.attn.wq_w"]) + p[f"block{i}.attn.wq_b"])
        k = split_heads(tt.matmul(a, p[f"block{i}.attn.wk_w"]) + p[f"block{i}.attn.wk_b"])
        v = split_heads(tt.matmul(a, p[f"block{i}.attn.wv_w"]) + p[f"block{i}.attn.wv_b"])
        scores = tt.matmul(q, tt.transpose(k, (0, 1, 3, 2) if batched else (0, 2, 1))) * scale
        attn = tt.softmax_lastdim(scores, keep=keep_keys)
        ctx = merge_heads(tt.matmul(attn, v))
        h = h + (tt.matmul(ctx, p[f"block{i}.attn.wo_w"]) + p[f"block{i}.attn.wo_b"])

        b = tt.layer_norm(h, p[f"block{i}.ln2_g"], p[f"block{i}.ln2_b"])
        f = tt.matmul(tt.gelu(tt.matmul(b, p[f"block{i}.ffn.w1_w"]) + p[f"block{i}.ffn.w1_b"]),
                      p[f"block{i}.ffn.w2_w"]) + p[f"block{i}.ffn.w2_b"]
        h = h + f
    return tt.layer_norm(h, p["final.ln_g"], p["final.ln_b"])


def quantile_head(z: Tensor, weights: ModelWeights, config: ModelConfig) -> Tensor:
    """Decode [.., N, d] to quantile values [.., T, K]."""
    p = weights.params
    out = residual_block(
        z,
        p["head.res_w"], p["head.res_b"],
        p["head.in_w"], p["head.in_b"],
        p["head.out_w"], p["head.out_b"],
    )
    L, K = config.patch_size, config.n_quantiles
    if z.ndim == 3:
        b, n = z.shape[0], z.shape[1]
        return tt.reshape(out, (b, n * L, K))
    n = z.shape[0]
    return tt.reshape(out, (n * L, K))


def batch_inputs(
    samples: list[WindowedSample], config: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (values_patches, mask_patches, pad_patch) arrays."""
    vals, masks, pads = [], [], []
    for s in samples:
        if s.x_norm.size != config.context_length:
            raise ShapeError(
                f"sample length {s.x_norm.size} != context_length {config.context_length}"
            )
        pv, pm, pp = patchify(s.x_norm, s.masks, config.patch_size)
        vals.append(pv)
        masks.append(pm.astype(np.float64))
        pads.append(pp)
    return np.stack(vals), np.stack(masks), np.stack(pads)


def forward_graph(
    values_patches: np.ndarray,
    mask_patches: np.ndarray,
    pad_patch: np.ndarray,
    weights: ModelWeights,
    config: ModelConfig,
) -> Tensor:
    """Differentiable forward pass: patches -> normalized quantiles [.., T, K]."""
    h = embed_patches(values_patches, mask_patches, weights)
    z = encode(h, pad_patch, weights, config)
    return quantile_head(z, weights, config)


def forward(sample: WindowedSample, weights: ModelWeights, config: ModelConfig) -> np.ndarray:
    """Single-sample inference; returns normalized quantiles [T, K]."""
    pv, pm, pp = batch_inputs([sample], config)
    with tt.no_grad():
        q = forward_graph(pv, pm, pp, weights, config)
    return q.data[0]


def isotonic_sort(q: np.ndarray) -> np.ndarray:
    """Sort each row of quantile values; never worsens pinball loss."""
    return np.sort(np.asarray(q, dtype=np.float64), axis=-1)

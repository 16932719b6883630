"""Versioned binary checkpoints.

Layout: magic ``PTFM`` | u32 format version | u64 header length | JSON
header | contiguous little-endian tensor payloads. The header carries the
model/train configs, the step counter, and a tensor manifest (name, shape,
dtype, byte offset). Optimizer moments are stored under ``opt.m.*`` /
``opt.v.*`` so resuming replays the schedule exactly. The default payload
dtype is float64, which makes save -> load -> forward bit-identical; f4 is
accepted for smaller files at the cost of that guarantee.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import ModelConfig, ModelWeights
from .tensor import Tensor
from .train import AdamState, TrainConfig

MAGIC = b"PTFM"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "f4": "<f4"}


@dataclass
class CheckpointBundle:
    weights: ModelWeights
    model_config: ModelConfig
    train_config: TrainConfig | None
    state: AdamState | None
    step: int


def save_checkpoint(
    path: str | Path,
    weights: ModelWeights,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig | None = None,
    state: AdamState | None = None,
    step: int = 0,
    dtype: str = "f8",
) -> None:
    if dtype not in _DTYPES:
        raise ConfigError(f"unsupported checkpoint dtype {dtype!r} (use f8 or f4)")
    np_dtype = np.dtype(_DTYPES[dtype])

    arrays: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in weights.items()]
    if state is not None:
        arrays += [(f"opt.m.{n}", a) for n, a in state.m.items()]
        arrays += [(f"opt.v.{n}", a) for n, a in state.v.items()]
        step = max(step, state.step)

    manifest = []
    offset = 0
    payloads = []
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset,
             "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model_cfg.to_dict(),
        "train_config": None if train_cfg is None else train_cfg.to_dict(),
        "step": int(step),
        "opt_step": None if state is None else int(state.step),
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e

    if len(blob) < 16:
        raise FormatError(f"{path}: truncated at offset {len(blob)} (need 16-byte prologue)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at offset 4")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header at offset {len(blob)} (expected {header_end})")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt JSON header at offset 16: {e}") from e

    try:
        model_cfg = ModelConfig.from_dict(header["model_config"])
        train_cfg = (
            None if header.get("train_config") is None
            else TrainConfig.from_dict(header["train_config"])
        )
        manifest = header["tensors"]
        step = int(header.get("step", 0))
        opt_step = header.get("opt_step")
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed header fields: {e}") from e

    payload = blob[header_end:]
    params: dict[str, Tensor] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for entry in manifest:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            np_dtype = np.dtype(_DTYPES[entry["dtype"]])
            off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed manifest entry: {e}") from e
        if off + nbytes > len(payload):
            raise FormatError(
                f"{path}: truncated payload for {name!r} at offset {header_end + off}"
            )
        arr = np.frombuffer(payload, dtype=np_dtype, count=nbytes // np_dtype.itemsize, offset=off)
        try:
            arr = arr.reshape(shape).astype(np.float64)
        except ValueError as e:
            raise FormatError(f"{path}: shape mismatch for {name!r}: {e}") from e
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)

    weights = ModelWeights(params=params)
    state = None
    if opt_m:
        state = AdamState(m=opt_m, v=opt_v, step=int(opt_step if opt_step is not None else step))
    return CheckpointBundle(
        weights=weights, model_config=model_cfg, train_config=train_cfg, state=state, step=step
    )


def ensure_config_matches(loaded: ModelConfig, requested: ModelConfig) -> None:
    """Raise ConfigError naming the first field that differs."""
    for key, val in loaded.to_dict().items():
        other = requested.to_dict()[key]
        if val != other:
            raise ConfigError(
                f"checkpoint config mismatch on {key!r}: checkpoint has {val}, requested {other}"
            )

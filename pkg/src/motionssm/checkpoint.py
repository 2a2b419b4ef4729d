"""Checkpoint persistence: JSON manifest plus raw little-endian float32 blob.

The manifest records the format version, the full config snapshot, the
normalizer statistics, and a named-parameter index with shapes and byte
offsets; the blob holds the parameters at those offsets. A saved model
reloads to bitwise-identical forward outputs.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .blocks import MotionDenoiser
from .config import RunConfig, config_from_dict
from .data import Normalizer
from .rng import stream_rng

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


class CheckpointError(RuntimeError):
    pass


def model_from_config(cfg: RunConfig, rng: np.random.Generator | None = None) -> MotionDenoiser:
    rng = rng if rng is not None else stream_rng(cfg.seed, "init")
    return MotionDenoiser(
        d_motion=cfg.d_motion, d_model=cfg.d_model, n_blocks=cfg.n_blocks,
        stride=cfg.stride, timesteps=cfg.timesteps, vocab=cfg.vocab, rng=rng,
        scan_mode=cfg.scan_mode, groups=cfg.groupnorm_groups, d_state=cfg.d_state,
        d_conv=cfg.d_conv, expand=cfg.expand)


def save_checkpoint(directory, model: MotionDenoiser, cfg: RunConfig,
                    normalizer: Normalizer):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    chunks = []
    for name, param in model.named_parameters():
        flat = np.ascontiguousarray(param.data, dtype="<f4")
        index.append({"name": name, "shape": list(param.shape),
                      "offset": offset, "size": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size * 4
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "normalizer": {"mean": normalizer.mean.tolist(), "std": normalizer.std.tolist()},
        "params": index,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))


def load_checkpoint(directory) -> tuple[MotionDenoiser, RunConfig, Normalizer]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    blob_path = directory / BLOB_NAME
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"{directory}: not a checkpoint directory")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != {FORMAT_VERSION}")
    cfg = config_from_dict(manifest["config"])
    normalizer = Normalizer(mean=manifest["normalizer"]["mean"],
                            std=manifest["normalizer"]["std"])
    model = model_from_config(cfg)
    blob = blob_path.read_bytes()
    expected = sum(entry["size"] for entry in manifest["params"]) * 4
    if len(blob) != expected:
        raise CheckpointError(f"blob is {len(blob)} bytes, manifest expects {expected}")
    by_name = dict(model.named_parameters())
    if set(by_name) != {entry["name"] for entry in manifest["params"]}:
        raise CheckpointError("manifest parameter names do not match the model")
    for entry in manifest["params"]:
        param = by_name[entry["name"]]
        raw = np.frombuffer(blob, dtype="<f4", count=entry["size"],
                            offset=entry["offset"])
        if list(param.shape) != entry["shape"]:
            raise CheckpointError(f"{entry['name']}: shape {entry['shape']} != "
                                  f"model shape {list(param.shape)}")
        param.data = raw.reshape(entry["shape"]).astype(param.data.dtype)
    return model, cfg, normalizer

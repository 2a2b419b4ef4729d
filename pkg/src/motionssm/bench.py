"""Scan-strategy benchmark: parameter counts, forward wall-clock, and the
mirror-scan equivalence against its reference computation.
"""

from __future__ import annotations

import time

import numpy as np

from .config import RunConfig
from .rng import stream_rng
from .ssm import MambaBlock, ScanMode
from .tensor import Tensor, concat, no_grad, reverse, slice_axis

MODES = (ScanMode.FORWARD, ScanMode.BIDIR, ScanMode.MIRROR)


def _block_for(cfg: RunConfig, mode: ScanMode) -> MambaBlock:
    rng = stream_rng(cfg.seed, "init")
    return MambaBlock(cfg.d_model, rng, d_state=cfg.d_state, d_conv=cfg.d_conv,
                      expand=cfg.expand, bidirectional=mode is ScanMode.BIDIR)


def mirror_reference(block: MambaBlock, x: Tensor) -> Tensor:
    """Slice-of-concat reference: scan the reversed-plus-original sequence with
    the forward parameters and keep the last half."""
    length = x.shape[-2]
    doubled = concat([reverse(x, axis=-2), x], axis=-2)
    full = block(doubled, ScanMode.FORWARD)
    return slice_axis(full, axis=-2, start=length, stop=2 * length)


def bench_scan(cfg: RunConfig, lengths: list[int], repeats: int = 100,
               warmup: int = 10) -> dict:
    """Per mode and length: parameter count, mean seconds per forward, and the
    max |mirror - reference| deviation (must be 0)."""
    rng = stream_rng(cfg.seed, "eval")
    blocks = {mode: _block_for(cfg, mode) for mode in MODES}
    rows = []
    for mode in MODES:
        block = blocks[mode]
        for length in lengths:
            x = Tensor(rng.standard_normal((length, cfg.d_model)).astype(np.float32))
            with no_grad():
                for _ in range(warmup):
                    block(x, mode)
                start = time.perf_counter()
                for _ in range(repeats):
                    block(x, mode)
                mean_seconds = (time.perf_counter() - start) / repeats
                deviation = None
                if mode is ScanMode.MIRROR:
                    got = block(x, mode).numpy()
                    ref = mirror_reference(block, x).numpy()
                    deviation = float(np.max(np.abs(got - ref))) if got.size else 0.0
            rows.append({"mode": mode.value, "length": length,
                         "param_count": block.param_count(),
                         "mean_seconds": mean_seconds, "mirror_deviation": deviation})
    return {"rows": rows,
            "note": "timings cover the denoiser scan block only; text and "
                    "diffusion overhead are excluded"}


def format_report(report: dict) -> str:
    lines = [f"{'mode':>8} {'L':>5} {'params':>10} {'ms/fwd':>10} {'mirror dev':>11}"]
    for row in report["rows"]:
        dev = "-" if row["mirror_deviation"] is None else f"{row['mirror_deviation']:.1e}"
        lines.append(f"{row['mode']:>8} {row['length']:>5} {row['param_count']:>10} "
                     f"{row['mean_seconds'] * 1e3:>10.3f} {dev:>11}")
    lines.append(f"note: {report['note']}")
    return "\n".join(lines)

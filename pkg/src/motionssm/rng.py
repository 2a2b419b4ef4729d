"""Named counter-based random streams derived from one master seed.

Philox generators keyed by (master seed, stream id, extra) make every
stochastic draw reproducible and independent of scheduling order.
"""

from __future__ import annotations

import numpy as np

_STREAM_IDS = {"init": 0, "train": 1, "valid": 2, "sample": 3, "eval": 4}


def stream_rng(master_seed: int, stream: str, extra: int = 0) -> np.random.Generator:
    try:
        sid = _STREAM_IDS[stream]
    except KeyError:
        raise ValueError(f"unknown rng stream {stream!r}; "
                         f"choices: {', '.join(_STREAM_IDS)}") from None
    seq = np.random.SeedSequence([int(master_seed), sid, int(extra)])
    return np.random.Generator(np.random.Philox(seq))

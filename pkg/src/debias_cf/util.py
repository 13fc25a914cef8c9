"""Small shared helpers: seeded RNG streams, sigmoid, debug toggle."""

from __future__ import annotations

import os

import numpy as np


def rng_from(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic generator for (seed, purpose-tags).

    Distinct tag tuples yield independent streams, so subsystems never
    share or race on one generator.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def debug_enabled() -> bool:
    """Extra invariant checks (finite params, normalized inputs) when set."""
    return os.environ.get("DEBIAS_CF_DEBUG", "") not in ("", "0")

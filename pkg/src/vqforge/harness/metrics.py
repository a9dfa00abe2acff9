"""Metrics over soft assignment states."""

from __future__ import annotations

import math

import numpy as np

from .. import config
from ..convexopt import ratios


def histogram_edges(n: int, width: float = config.HIST_BIN_WIDTH) -> np.ndarray:
    """Bin edges of width ``width`` from ``1/n`` up to 1 (last bin may be narrower)."""
    lo = 1.0 / n
    bins = max(1, math.ceil(round((1.0 - lo) / width, 9)))
    edges = lo + width * np.arange(bins + 1)
    edges[-1] = 1.0
    return edges


def max_ratio_histogram(states, n: int = None, width: float = config.HIST_BIN_WIDTH):
    """Histogram of each sub-vector's largest ratio; confirmed sub-vectors count as 1.0.

    ``states`` is one SoftState or a list of them. Returns ``(edges, counts)``;
    the top bin is closed on the right so a ratio of exactly 1.0 lands in it.
    """
    if not isinstance(states, (list, tuple)):
        states = [states]
    n = n or states[0].n
    edges = histogram_edges(n, width)
    values = []
    for st in states:
        r = ratios(st.scores).max(axis=1).astype(np.float64)
        r[st.confirmed] = 1.0
        values.append(r)
    v = np.concatenate(values) if values else np.zeros(0)
    pos = np.searchsorted(edges, v, side="right") - 1
    pos = np.clip(pos, 0, len(edges) - 2)
    counts = np.bincount(pos, minlength=len(edges) - 1)
    return edges, counts

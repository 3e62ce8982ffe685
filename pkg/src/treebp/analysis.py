"""Test-set sweeps behind the sparsity table and the gradient histograms."""

import numpy as np

from . import gradients as ge
from .models import Tree3Config, forward, rng_for
from .tensor_core import Activation

STREAM_RESAMPLE = 8


def _bundle(params, config, x, y, keep_routes=False):
    trace = forward(params, config, x)
    if isinstance(config, Tree3Config) and (keep_routes or config.activation is Activation.RELU):
        return ge.route_backward(params, config, trace, y, keep_routes=keep_routes)
    return ge.backward_reference(params, config, trace, y)


def per_example_zero_fractions(params, config, dataset, batch=50, limit=None):
    """``{layer: array of per-example zero fractions}`` over the first ``limit`` examples.

    Gradients are those of each single example's loss (batch size 1 semantics);
    zero counts do not depend on the batch they are computed in.
    """
    n = len(dataset) if limit is None else min(limit, len(dataset))
    if not isinstance(config, Tree3Config):
        batch = 1  # weight-level counts are per batch, so go one example at a time
    out = {}
    for start in range(0, n, batch):
        stop = min(n, start + batch)
        x = dataset.pixels(slice(start, stop), params.dtype)
        b = _bundle(params, config, x, dataset.labels[start:stop])
        for layer, count in b.zero_counts.items():
            out.setdefault(layer, []).append(np.atleast_1d(count.fractions))
    return {k: np.concatenate(v) for k, v in out.items()}


def sparsity_table(fractions, samples=10, seed=0):
    """Mean zero fraction per layer and the std of the mean over ``samples`` random parts."""
    rows = []
    for layer, f in fractions.items():
        order = rng_for(seed, STREAM_RESAMPLE).permutation(f.size)
        parts = [f[p].mean() for p in np.array_split(order, samples) if p.size]
        std = float(np.std(parts, ddof=1)) if len(parts) > 1 else 0.0
        rows.append({"layer": layer, "fraction_zero": float(f.mean()), "std": std,
                     "samples": len(parts), "examples": int(f.size)})
    return rows


def _route_values(params, config, dataset, n, chunk):
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        x = dataset.pixels(slice(start, stop), params.dtype)
        b = _bundle(params, config, x, dataset.labels[start:stop], keep_routes=True)
        # undo the batch mean so values are single-example gradients
        for rv in b.routes.values():
            rv.values *= stop - start
        yield b


def gradient_histograms(params, config, dataset, layer="conv", examples=200, chunk=10, bins=1000):
    """Histograms of route-level |D| and |D/W| split by correct and wrong predictions.

    Two sweeps: the first finds the value range, the second bins into
    ``bins`` log-spaced bins. Returns ``{(mode, subset): GradHistogram}``;
    a key maps to ``None`` when that subset has no nonzero values.
    """
    if not isinstance(config, Tree3Config):
        raise ValueError("gradient histograms are defined on Tree-3 route instances")
    n = min(examples, len(dataset))
    keys = [(m, s) for m in ("abs", "relative") for s in ("correct", "wrong")]
    lo = {k: np.inf for k in keys}
    hi = {k: 0.0 for k in keys}
    for b in _route_values(params, config, dataset, n, chunk):
        for mode, subset in keys:
            v = ge._values_for(b, layer, mode, subset)
            v = v[np.isfinite(v)]
            if v.size:
                lo[(mode, subset)] = min(lo[(mode, subset)], float(v.min()))
                hi[(mode, subset)] = max(hi[(mode, subset)], float(v.max()))
    edges, counts = {}, {}
    for k in keys:
        if np.isfinite(lo[k]):
            top = hi[k] if hi[k] > lo[k] else lo[k] * (1 + 1e-9)
            edges[k] = np.geomspace(lo[k], top, bins + 1)
            counts[k] = np.zeros(bins, dtype=np.int64)
    for b in _route_values(params, config, dataset, n, chunk):
        for k in edges:
            v = ge._values_for(b, layer, *k)
            v = v[np.isfinite(v)]
            idx = np.clip(np.searchsorted(edges[k], v, side="right") - 1, 0, bins - 1)
            counts[k] += np.bincount(idx, minlength=bins)
    return {k: (ge.GradHistogram(edges[k], counts[k], k[0]) if k in edges else None) for k in keys}

"""Backward passes, gradient thresholding and gradient statistics.

Two engines compute the same gradients of the mean softmax cross-entropy:

``backward_reference``
    Layer-by-layer chain rule for Tree-3 and LeNet-5.
``backward_pruned_tree3``
    Enumerates only the active routes of a ReLU Tree-3. A route from a conv
    weight to the outputs is active when its conv pre-activation is positive,
    its conv unit wins the pooling window and its tree unit is positive. Each
    active route contributes ``input * w_tree * sum_o(w_fc[o] * delta[o])``.

With ``ordered=True`` the reference engine accumulates every sum sequentially
in a fixed index order. The pruned engine always accumulates in that order,
skipping only terms that are exactly zero, so in float64 the two agree bit for
bit.

Sparsity statistics count gradient instances per route, not per shared weight:
a conv filter tap receives one instance per branch and conv position.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor_core as tc
from .models import (ForwardTrace, LeNet5Config, LeNet5Trace, Tree3Config, forward,
                     check_params)
from .tensor_core import Activation

TREE3_LAYERS = ("conv", "tree", "fc")
TREE3_PARAM = {"conv": "w_conv", "tree": "w_tree", "fc": "w_fc"}
LENET5_LAYERS = ("conv1", "conv2", "fc1", "fc2", "fc3")


@dataclass
class LayerCount:
    """Per-example zero counts of one layer; ``total`` is the per-example instance count."""
    zeros: np.ndarray
    total: int

    @property
    def fractions(self):
        return self.zeros / self.total


@dataclass
class RouteValues:
    """Surviving (nonzero) route-level gradient instances of one layer."""
    values: np.ndarray
    weights: np.ndarray
    example: np.ndarray


@dataclass
class GradBundle:
    grads: dict
    zero_counts: dict
    loss: float = float("nan")
    routes: dict = None
    correct: np.ndarray = None
    route_totals: dict = field(default_factory=dict)

    def __getattr__(self, name):
        if name.startswith("g_"):
            grads = self.__dict__.get("grads", {})
            key = TREE3_PARAM.get(name[2:], name[2:])
            if key in grads:
                return grads[key]
        raise AttributeError(name)

    def arrays(self):
        return list(self.grads.values())

    def copy(self):
        routes = None
        if self.routes is not None:
            routes = {k: RouteValues(v.values.copy(), v.weights.copy(), v.example.copy())
                      for k, v in self.routes.items()}
        return GradBundle({k: v.copy() for k, v in self.grads.items()},
                          dict(self.zero_counts), self.loss, routes,
                          None if self.correct is None else self.correct.copy(),
                          dict(self.route_totals))


def _labels_delta(trace, labels):
    logits = np.atleast_2d(trace.logits)
    labels = np.atleast_1d(np.asarray(labels))
    loss, delta = tc.softmax_xent(logits, labels)
    correct = logits.argmax(axis=1) == labels
    return loss, delta, correct


def _winner_pre(conv_pre, argmax):
    n, ck, h, w = conv_pre.shape
    win = conv_pre.reshape(n, ck, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, ck, h // 2, w // 2, 4)
    return np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]


def tree3_route_counts(config, trace):
    """Gate-level zero counts per example for every Tree-3 layer.

    A conv instance is open when the pool winner's activation derivative and the
    tree unit's activation derivative are both nonzero; a tree instance when the
    pooled value and the tree derivative are nonzero; an fc instance when the
    tree output is nonzero.
    """
    g = config.geometry
    act = config.activation
    n = trace.x.shape[0]
    c, k, r, rh, p = g.channels, config.K, g.rects, g.rect_rows, g.pool_size
    unit_open = act.derivative(trace.tree_pre) != 0  # (n, nb, c, r)
    units_per_cr = unit_open.sum(axis=1)  # (n, c, r)
    cell_open = act.derivative(_winner_pre(trace.conv_pre, trace.pool.argmax)) != 0
    cells_per_cr = cell_open.reshape(n, c, k, r, rh, p).sum(axis=(2, 4, 5))
    pool_open = (trace.pool.output != 0).reshape(n, c, k, r, rh, p).sum(axis=(2, 4, 5))
    conv_nz = tc.TAPS * (units_per_cr * cells_per_cr).sum(axis=(1, 2))
    tree_nz = (units_per_cr * pool_open).sum(axis=(1, 2))
    per_unit = config.outputs // config.trees
    fc_nz = (trace.tree_out != 0).reshape(n, -1).sum(axis=1) * per_unit
    totals = _tree3_totals(config)
    return {
        "conv": LayerCount(totals["conv"] - conv_nz, totals["conv"]),
        "tree": LayerCount(totals["tree"] - tree_nz, totals["tree"]),
        "fc": LayerCount(totals["fc"] - fc_nz, totals["fc"]),
    }


def _tree3_totals(config):
    g = config.geometry
    nb = config.branches
    return {
        "conv": tc.TAPS * g.channels * config.K * g.conv_size ** 2 * nb,
        "tree": nb * g.channels * config.K * g.pool_size ** 2,
        "fc": config.hidden * (config.outputs // config.trees),
    }


def _tree3_reference(params, config, trace, labels, ordered):
    g = config.geometry
    act = config.activation
    dtype = params.dtype
    n = trace.x.shape[0]
    c, k, nb = g.channels, config.K, config.branches
    r, rh, p = g.rects, g.rect_rows, g.pool_size
    feat = k * rh * p
    loss, delta, correct = _labels_delta(trace, labels)
    flat = trace.tree_out.reshape(n, -1)
    w_fc = params.w_fc

    if ordered:
        dflat = np.zeros((n, w_fc.shape[0]), dtype=np.result_type(delta, w_fc))
        for o in range(w_fc.shape[1]):
            dflat += delta[:, o, None] * w_fc[None, :, o]
        g_fc = np.zeros(w_fc.shape, dtype=dflat.dtype)
        for i in range(n):
            g_fc += flat[i][:, None] * delta[i][None, :]
    else:
        dflat = delta @ w_fc.T
        g_fc = flat.T @ delta
    mask = config.fc_mask()
    if mask is not None:
        g_fc = g_fc * mask

    dtree = dflat.reshape(trace.tree_pre.shape) * act.derivative(trace.tree_pre)  # (n, nb, c, r)
    pool6 = trace.pool.output.reshape(n, c, k, r, rh, p)
    w6 = params.w_tree.reshape(nb, c, k, r, rh, p)

    if ordered:
        g_tree = np.zeros(w6.shape, dtype=dtree.dtype)
        for i in range(n):
            g_tree += dtree[i][:, :, None, :, None, None] * pool6[i][None]
        dpool = np.zeros(pool6.shape, dtype=dtree.dtype)
        for b in range(nb):
            dpool += w6[b][None] * dtree[:, b][:, :, None, :, None, None]
    else:
        g_tree = np.empty(w6.shape, dtype=np.result_type(dtree, pool6))
        dpool = np.empty(pool6.shape, dtype=np.result_type(dtree, w6))
        for ch in range(c):
            d = dtree[:, :, ch, :].transpose(2, 1, 0)  # (r, nb, n)
            pc = pool6[:, ch].transpose(2, 0, 1, 3, 4).reshape(r, n, feat)
            g_tree[:, ch] = np.matmul(d, pc).reshape(r, nb, k, rh, p).transpose(1, 2, 0, 3, 4)
            wc = w6[:, ch].transpose(2, 0, 1, 3, 4).reshape(r, nb, feat)
            dp = np.matmul(d.transpose(0, 2, 1), wc)  # (r, n, feat)
            dpool[:, ch] = dp.reshape(r, n, k, rh, p).transpose(1, 2, 0, 3, 4)

    dact = tc.maxpool2x2_backward(dpool.reshape(n, c * k, p, p), trace.pool.argmax)
    dconv = dact * act.derivative(trace.conv_pre)

    if ordered:
        cols = sliding_window_view(trace.x, (tc.KERNEL, tc.KERNEL), axis=(2, 3))
        cols = cols.reshape(n, c, 1, -1, tc.TAPS)
        terms = dconv.reshape(n, c, k, -1)[..., None] * cols
        idx = (np.arange(c * k).reshape(1, c, k, 1, 1) * tc.TAPS
               + np.arange(tc.TAPS).reshape(1, 1, 1, 1, tc.TAPS))
        idx = np.broadcast_to(idx, terms.shape)
        g_conv = np.bincount(idx.ravel(), terms.ravel(), minlength=c * k * tc.TAPS)
        g_conv = g_conv.reshape(params.w_conv.shape)
    else:
        g_conv = tc.conv2d_grouped_filter_grad(trace.x, dconv, k)

    grads = {"w_conv": g_conv.astype(dtype, copy=False),
             "w_tree": g_tree.reshape(params.w_tree.shape).astype(dtype, copy=False),
             "w_fc": g_fc.astype(dtype, copy=False)}
    return GradBundle(grads, tree3_route_counts(config, trace), loss, correct=correct)


def _lenet5_reference(params, config, trace, labels):
    act = config.activation
    loss, delta, correct = _labels_delta(trace, labels)
    h = trace.activations
    grads = {}
    grads["fc3_w"] = h["h2"].T @ delta
    grads["fc3_b"] = delta.sum(axis=0)
    d2 = (delta @ params.fc3_w.T) * act.derivative(trace.fc2_pre)
    grads["fc2_w"] = h["h1"].T @ d2
    grads["fc2_b"] = d2.sum(axis=0)
    d1 = (d2 @ params.fc2_w.T) * act.derivative(trace.fc1_pre)
    grads["fc1_w"] = h["flat"].T @ d1
    grads["fc1_b"] = d1.sum(axis=0)
    dflat = d1 @ params.fc1_w.T
    dpool2 = dflat.reshape(trace.pool2.output.shape)
    dconv2 = tc.maxpool2x2_backward(dpool2, trace.pool2.argmax) * act.derivative(trace.conv2_pre)
    dpool1, grads["conv2_w"], grads["conv2_b"] = tc.conv2d_full_backward(
        trace.pool1.output, params.conv2_w, dconv2)
    dconv1 = tc.maxpool2x2_backward(dpool1, trace.pool1.argmax) * act.derivative(trace.conv1_pre)
    _, grads["conv1_w"], grads["conv1_b"] = tc.conv2d_full_backward(
        trace.x, params.conv1_w, dconv1, need_input_grad=False)
    if not config.bias:
        for name in list(grads):
            if name.endswith("_b"):
                grads[name] = np.zeros_like(grads[name])
    ordered_grads = {name: grads[name].astype(params.dtype, copy=False) for name in params.names()}
    counts = {}
    for layer in LENET5_LAYERS:
        gw = ordered_grads[f"{layer}_w"]
        counts[layer] = LayerCount(np.array([np.count_nonzero(gw == 0)]), gw.size)
    return GradBundle(ordered_grads, counts, loss, correct=correct)


def backward_reference(params, config, trace, labels, ordered=False):
    """Exact gradients of the mean cross-entropy by the layer-wise chain rule."""
    check_params(params, config)
    if isinstance(config, LeNet5Config):
        if not isinstance(trace, LeNet5Trace):
            raise TypeError("LeNet-5 parameters need a LeNet-5 trace")
        return _lenet5_reference(params, config, trace, labels)
    if not isinstance(trace, ForwardTrace):
        raise TypeError("Tree-3 parameters need a Tree-3 trace")
    return _tree3_reference(params, config, trace, labels, ordered)


def backward_pruned_tree3(params, config, trace, labels, threshold=None, keep_routes=False):
    """Gradients from active single routes only (ReLU Tree-3).

    ``threshold`` drops every route-level instance whose magnitude is below it
    before accumulation. ``keep_routes`` records the surviving instances in
    ``bundle.routes`` for histograms and threshold calibration.
    """
    if not isinstance(config, Tree3Config):
        raise TypeError("the pruned engine only applies to Tree-3")
    if config.activation is not Activation.RELU:
        raise ValueError("pruned backward needs ReLU; use backward_reference for Sigmoid")
    check_params(params, config)
    return route_backward(params, config, trace, labels, threshold, keep_routes)


def route_backward(params, config, trace, labels, threshold=None, keep_routes=False):
    """Route enumeration with activation-derivative gates.

    For ReLU the gates are 0/1 and this is the pruned backward pass. For
    Sigmoid every gate is open and the derivatives enter the route products, so
    it yields route-level instances for gradient-magnitude statistics.
    """
    g = config.geometry
    act = config.activation
    dtype = params.dtype
    n = trace.x.shape[0]
    c, k, nb = g.channels, config.K, config.branches
    r, rh, p, hc = g.rects, g.rect_rows, g.pool_size, g.conv_size
    outputs = config.outputs
    loss, delta, correct = _labels_delta(trace, labels)
    w_fc = params.w_fc
    w6 = params.w_tree.reshape(nb, c, k, r, rh, p)
    pool = trace.pool.output

    # active tree units, in (n, branch, channel, band) order
    ugate = act.derivative(trace.tree_pre)
    un, ub, uc, ur = np.nonzero(ugate)
    rows = (ub * c + uc) * r + ur
    s = np.zeros(un.shape[0], dtype=np.result_type(delta, w_fc))
    for o in range(outputs):
        s += delta[un, o] * w_fc[rows, o]
    s = s * ugate[un, ub, uc, ur]
    t_out = trace.tree_out[un, ub, uc, ur]

    # pool cells beneath each active unit with a nonzero pooled value
    pool6 = pool.reshape(n, c, k, r, rh, p)
    pv = pool6[un, uc, :, ur]  # (A, K, rh, p)
    ra, rk, rhh, rq = np.nonzero(pv)
    pool_val = pv[ra, rk, rhh, rq]
    coef = w6[ub[ra], uc[ra], rk, ur[ra], rhh, rq] * s[ra]
    tree_idx = ((((ub[ra] * c + uc[ra]) * k + rk) * r + ur[ra]) * rh + rhh) * p + rq
    cell_idx = ((((un[ra] * c + uc[ra]) * k + rk) * r + ur[ra]) * rh + rhh) * p + rq
    cgate = act.derivative(_winner_pre(trace.conv_pre, trace.pool.argmax)).ravel()
    argmax = trace.pool.argmax.ravel()
    win = sliding_window_view(trace.x, (tc.KERNEL, tc.KERNEL), axis=(2, 3))

    def conv_position(cells):
        nn_, ck_, pi, pj = np.unravel_index(cells, (n, c * k, p, p))
        a = argmax[cells]
        i, j = 2 * pi + a // 2, 2 * pj + a % 2
        return nn_, ck_, i, j

    per_unit = outputs // config.trees
    fc_terms = t_out[:, None] * delta[un]  # (A, outputs)
    fc_idx = rows[:, None] * outputs + np.arange(outputs)
    if config.trees > 1:
        # only the owning tree's output is a route
        own = (ub // config.M)[:, None] == np.arange(outputs)[None, :]
        fc_terms, fc_idx = fc_terms[own].reshape(-1, 1), fc_idx[own].reshape(-1, 1)
    fc_ex = np.broadcast_to(un[:, None], fc_idx.shape)
    tree_terms = pool_val * s[ra]
    routes = None
    totals = _tree3_totals(config)

    if threshold is None and not keep_routes:
        e = np.bincount(cell_idx, coef, minlength=n * c * k * p * p)
        cells = np.unique(cell_idx)
        dconv = e[cells] * cgate[cells]
        nn_, ck_, i, j = conv_position(cells)
        order = np.argsort(((nn_ * (c * k) + ck_) * hc + i) * hc + j, kind="stable")
        nn_, ck_, i, j, dconv = nn_[order], ck_[order], i[order], j[order], dconv[order]
        patch = win[nn_, ck_ // k, i, j].reshape(-1, tc.TAPS)
        conv_terms = dconv[:, None] * patch
        conv_idx = ck_[:, None] * tc.TAPS + np.arange(tc.TAPS)
        g_conv = np.bincount(conv_idx.ravel(), conv_terms.ravel(), minlength=c * k * tc.TAPS)
        g_tree = np.bincount(tree_idx, tree_terms, minlength=params.w_tree.size)
        g_fc = np.bincount(fc_idx.ravel(), fc_terms.ravel(), minlength=w_fc.size)
        conv_nz = tc.TAPS * np.bincount(un[ra][cgate[cell_idx] != 0], minlength=n)
        tree_nz = np.bincount(un[ra], minlength=n)
        fc_nz = np.bincount(un[t_out != 0], minlength=n) * per_unit
    else:
        theta = 0.0 if threshold is None else float(threshold)
        # per-branch conv route coefficient; |input| <= xmax bounds each tap
        ccoef = coef * cgate[cell_idx]
        xmax = float(np.abs(trace.x).max()) if trace.x.size else 0.0
        keep = (np.abs(ccoef) * xmax >= theta) & (ccoef != 0)
        sel = np.nonzero(keep)[0]
        nn_, ck_, i, j = conv_position(cell_idx[sel])
        patch = win[nn_, ck_ // k, i, j].reshape(-1, tc.TAPS)
        conv_terms = ccoef[sel][:, None] * patch
        conv_idx = ck_[:, None] * tc.TAPS + np.arange(tc.TAPS)
        conv_ex = np.broadcast_to(nn_[:, None], conv_idx.shape)
        cm = (np.abs(conv_terms) >= theta) & (conv_terms != 0)
        g_conv = np.bincount(conv_idx[cm], conv_terms[cm], minlength=c * k * tc.TAPS)
        tm = (np.abs(tree_terms) >= theta) & (tree_terms != 0)
        g_tree = np.bincount(tree_idx[tm], tree_terms[tm], minlength=params.w_tree.size)
        fm = (np.abs(fc_terms) >= theta) & (fc_terms != 0)
        g_fc = np.bincount(fc_idx[fm], fc_terms[fm], minlength=w_fc.size)
        conv_nz = np.bincount(conv_ex[cm], minlength=n)
        tree_nz = np.bincount(un[ra][tm], minlength=n)
        fc_nz = np.bincount(fc_ex[fm], minlength=n)
        if keep_routes:
            wconv = params.w_conv.reshape(c * k, tc.TAPS)
            routes = {
                "conv": RouteValues(conv_terms[cm], np.broadcast_to(wconv[ck_], conv_idx.shape)[cm],
                                    conv_ex[cm]),
                "tree": RouteValues(tree_terms[tm], params.w_tree.ravel()[tree_idx[tm]], un[ra][tm]),
                "fc": RouteValues(fc_terms[fm], w_fc.ravel()[fc_idx[fm]], fc_ex[fm]),
            }

    mask = config.fc_mask()
    g_fc = g_fc.reshape(w_fc.shape)
    if mask is not None:
        g_fc = g_fc * mask
    grads = {"w_conv": g_conv.reshape(params.w_conv.shape).astype(dtype, copy=False),
             "w_tree": g_tree.reshape(params.w_tree.shape).astype(dtype, copy=False),
             "w_fc": g_fc.astype(dtype, copy=False)}
    counts = {
        "conv": LayerCount(totals["conv"] - conv_nz, totals["conv"]),
        "tree": LayerCount(totals["tree"] - tree_nz, totals["tree"]),
        "fc": LayerCount(totals["fc"] - fc_nz, totals["fc"]),
    }
    return GradBundle(grads, counts, loss, routes, correct,
                      {layer: totals[layer] * n for layer in TREE3_LAYERS})


def compute_gradients(params, config, x, labels, pruned=False, threshold=None, ordered=False):
    """Forward plus backward on a batch; picks the engine."""
    trace = forward(params, config, x)
    if pruned or threshold is not None:
        return backward_pruned_tree3(params, config, trace, labels, threshold=threshold)
    return backward_reference(params, config, trace, labels, ordered=ordered)


def loss_value(params, config, x, labels):
    trace = forward(params, config, x)
    loss, _ = tc.softmax_xent(np.atleast_2d(trace.logits), np.atleast_1d(labels))
    return loss


# ---------------------------------------------------------------- thresholding

def gradient_instances(bundle):
    """``(nonzero magnitudes, total instance count)``, route-level when available."""
    if bundle.routes is not None:
        mags = np.concatenate([np.abs(v.values).ravel() for v in bundle.routes.values()])
        total = sum(bundle.route_totals.values())
        return mags, total
    mags = np.concatenate([np.abs(a).ravel() for a in bundle.arrays()])
    return mags[mags != 0], mags.size


def threshold_gradients(bundle, theta):
    """Zero every gradient entry (and route instance) with magnitude below ``theta``.

    Returns ``(new_bundle, active_fraction)`` where the fraction is over all
    parameter entries.
    """
    if theta < 0:
        raise ValueError(f"threshold must be nonnegative, got {theta}")
    out = bundle.copy()
    for name, g in out.grads.items():
        g[np.abs(g) < theta] = 0
    if out.routes is not None:
        for layer, rv in out.routes.items():
            keep = np.abs(rv.values) >= theta
            out.routes[layer] = RouteValues(rv.values[keep], rv.weights[keep], rv.example[keep])
    total = sum(g.size for g in out.grads.values())
    active = sum(np.count_nonzero(g) for g in out.grads.values())
    return out, active / total


def find_threshold_for_fraction(bundles, target):
    """Smallest magnitude threshold leaving about ``target`` of the instances active."""
    bundles = list(bundles)
    if not bundles:
        raise ValueError("need at least one gradient bundle")
    if not 0 < target <= 1:
        raise ValueError(f"target fraction must lie in (0, 1], got {target}")
    pools, total = [], 0
    for b in bundles:
        mags, t = gradient_instances(b)
        pools.append(mags)
        total += t
    mags = np.concatenate(pools)
    keep = int(round(target * total))
    if keep >= mags.size:
        return 0.0
    if keep <= 0:
        return float(np.nextafter(mags.max(), np.inf)) if mags.size else 0.0
    return float(np.partition(mags, mags.size - keep)[mags.size - keep])


# ------------------------------------------------------------------ statistics

class SparsityStats:
    """Running mean and standard deviation of per-example zero fractions."""

    def __init__(self):
        self._n = {}
        self._mean = {}
        self._m2 = {}

    @property
    def sample_count(self):
        return max(self._n.values(), default=0)

    @property
    def fraction_zero(self):
        return dict(self._mean)

    @property
    def std(self):
        return {k: float(np.sqrt(self._m2[k] / (self._n[k] - 1))) if self._n[k] > 1 else 0.0
                for k in self._n}

    def update(self, bundle):
        for layer, count in bundle.zero_counts.items():
            for frac in np.atleast_1d(count.fractions):
                n = self._n.get(layer, 0) + 1
                mean = self._mean.get(layer, 0.0)
                d = frac - mean
                mean += d / n
                self._m2[layer] = self._m2.get(layer, 0.0) + d * (frac - mean)
                self._mean[layer] = float(mean)
                self._n[layer] = n
        return self

    def as_rows(self):
        std = self.std
        return [(layer, self._mean[layer], std[layer], self._n[layer]) for layer in self._mean]


def accumulate_sparsity(stats, bundle):
    if stats is None:
        stats = SparsityStats()
    return stats.update(bundle)


@dataclass
class GradHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mode: str = "abs"

    @property
    def total(self):
        return int(self.counts.sum())

    def delta0(self, mass=0.97):
        """Bin edge below which the cumulative mass is closest to ``mass``."""
        cum = np.concatenate([[0.0], np.cumsum(self.counts) / self.total])
        i = int(np.argmin(np.abs(cum - mass)))
        return float(self.edges[i]), float(cum[i])

    def rows(self):
        return list(zip(self.edges[:-1], self.edges[1:], self.counts))


def _values_for(bundle, layer, mode, subset):
    if bundle.routes is not None:
        rv = bundle.routes[layer]
        vals, w, ex = rv.values, rv.weights, rv.example
    else:
        name = TREE3_PARAM.get(layer, layer)
        vals = bundle.grads[name].ravel()
        w = None
        ex = None
    if subset is not None:
        if bundle.correct is None or ex is None:
            raise ValueError("correct/wrong split needs route-level values with predictions")
        want = bundle.correct if subset == "correct" else ~bundle.correct
        sel = want[ex]
        vals = vals[sel]
        w = w[sel]
    mag = np.abs(vals)
    if mode == "relative":
        if w is None:
            raise ValueError("relative mode needs route-level values carrying weights")
        ok = w != 0
        mag = mag[ok] / np.abs(w[ok])
    elif mode != "abs":
        raise ValueError(f"mode must be 'abs' or 'relative', got {mode!r}")
    return mag[mag != 0]


def histogram_gradients(bundles, mode="abs", layer="conv", bins=1000, subset=None):
    """Log-spaced histogram of nonzero gradient magnitudes (|D| or |D/W|)."""
    if isinstance(bundles, GradBundle):
        bundles = [bundles]
    mags = [_values_for(b, layer, mode, subset) for b in bundles]
    mags = np.concatenate(mags) if mags else np.empty(0)
    mags = mags[np.isfinite(mags)]
    if mags.size == 0:
        raise ValueError("no nonzero gradients observed")
    lo, hi = float(mags.min()), float(mags.max())
    if hi <= lo:
        hi = lo * (1 + 1e-9) if lo > 0 else lo + 1e-300
    edges = np.geomspace(lo, hi, bins + 1)
    counts, _ = np.histogram(mags, bins=edges)
    return GradHistogram(edges, counts, mode)


# ---------------------------------------------------------- finite differences

def _signature(params, config, x):
    trace = forward(params, config, x)
    act = config.activation
    if isinstance(config, LeNet5Config):
        parts = [trace.pool1.argmax, trace.pool2.argmax]
        if act is Activation.RELU:
            parts += [trace.conv1_pre > 0, trace.conv2_pre > 0, trace.fc1_pre > 0, trace.fc2_pre > 0]
    else:
        parts = [trace.pool.argmax]
        if act is Activation.RELU:
            parts += [trace.conv_pre > 0, trace.tree_pre > 0]
    return [np.asarray(p).copy() for p in parts]


def finite_difference_check(params, config, x, labels, eps=1e-5, analytic=None):
    """Central differences against an analytic gradient, one coordinate at a time.

    Returns ``{name: (max_abs_err, scale, kinks)}`` where ``scale`` is the largest
    analytic magnitude of that tensor and ``kinks`` counts coordinates whose
    perturbation changed a ReLU sign or a pool winner (those are excluded).
    """
    params = params.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    if analytic is None:
        analytic = backward_reference(params, config, forward(params, config, x), labels)
    base_sig = _signature(params, config, x)
    report = {}
    for name, w in params.items():
        an = analytic.grads[name]
        err = 0.0
        kinks = 0
        flat = w.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + eps
            lp = loss_value(params, config, x, labels)
            sp = _signature(params, config, x)
            flat[idx] = old - eps
            lm = loss_value(params, config, x, labels)
            sm = _signature(params, config, x)
            flat[idx] = old
            if any(not np.array_equal(a, b) for a, b in zip(base_sig, sp)) or \
                    any(not np.array_equal(a, b) for a, b in zip(base_sig, sm)):
                kinks += 1
                continue
            fd = (lp - lm) / (2 * eps)
            err = max(err, abs(fd - an.reshape(-1)[idx]))
        report[name] = (err, float(np.abs(an).max()), kinks)
    return report


def max_relative_error(report):
    """Largest per-tensor ``max_abs_err / max|analytic|`` in a finite-difference report."""
    worst = 0.0
    for err, scale, _ in report.values():
        worst = max(worst, err / scale if scale > 0 else err)
    return worst

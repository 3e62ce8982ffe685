"""Self-check suites: pruned-vs-reference equivalence and finite differences."""

from dataclasses import dataclass, field

import numpy as np

from . import gradients as ge
from .models import Geometry, LeNet5Config, Tree3Config, forward, init_params, rng_for
from .tensor_core import Activation

STREAM_CHECK = 7


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    cases: int = 0
    failures: list = field(default_factory=list)

    def line(self):
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'} (max err {self.max_error:.3g}, " \
               f"tol {self.tolerance:g}, {self.cases} cases)"


def random_instance(rng, max_k=15, max_m=16, geometry=None, batch=None):
    """A random small ReLU Tree-3 problem with inputs in [-1, 1]."""
    geometry = geometry or Geometry(rng.choice(["cifar", "mnist"]))
    config = Tree3Config(K=int(rng.integers(1, max_k + 1)), M=int(rng.integers(1, max_m + 1)),
                         activation=Activation.RELU, geometry=geometry)
    n = int(batch or rng.integers(1, 3))
    x = rng.uniform(-1, 1, (n,) + geometry.image_shape)
    y = rng.integers(0, 10, n)
    return config, x, y


def _rel(a, b):
    scale = max(float(np.abs(b).max()), 1e-30)
    return float(np.abs(a - b).max()) / scale


def _worst_coordinate(a, b):
    idx = np.unravel_index(int(np.argmax(np.abs(a - b))), a.shape)
    return tuple(int(i) for i in idx)


def oracle_suite(instances=200, seed=0, fault=None, max_k=15, max_m=16):
    """Compare the pruned engine with the reference on random instances.

    64-bit runs must agree bitwise with the ordered reference; 32-bit runs
    within 1e-5 relative of the fast reference. ``fault`` is an optional
    callable applied to the pruned bundle before comparison (test hook).
    """
    rng = rng_for(seed, STREAM_CHECK)
    worst64, worst32, failures = 0.0, 0.0, []
    for case in range(instances):
        config, x, y = random_instance(rng, max_k, max_m)
        p64 = init_params(config, int(rng.integers(2**31)), dtype=np.float64)
        trace = forward(p64, config, x)
        ref = ge.backward_reference(p64, config, trace, y, ordered=True)
        got = ge.backward_pruned_tree3(p64, config, trace, y)
        if fault is not None:
            got = fault(got)
        for name in p64.names():
            a, b = got.grads[name], ref.grads[name]
            if not np.array_equal(a, b):
                err = _rel(a, b)
                worst64 = max(worst64, err)
                failures.append(f"case {case} K={config.K} M={config.M} {config.geometry.value} "
                                f"float64 {name}{list(_worst_coordinate(a, b))} rel err {err:.3g}")
        if case % 4 == 0:
            p32 = p64.astype(np.float32)
            x32 = x.astype(np.float32)
            tr32 = forward(p32, config, x32)
            ref32 = ge.backward_reference(p32, config, tr32, y)
            got32 = ge.backward_pruned_tree3(p32, config, tr32, y)
            if fault is not None:
                got32 = fault(got32)
            for name in p32.names():
                err = _rel(got32.grads[name].astype(np.float64), ref32.grads[name].astype(np.float64))
                worst32 = max(worst32, err)
                if err > 1e-5:
                    failures.append(f"case {case} float32 {name} rel err {err:.3g}")
    return SuiteResult("pruned==reference", not failures, max(worst64, worst32), 1e-5,
                       instances, failures)


def fd_suite(arch="tree3", seed=0, eps=1e-5, tol=1e-6, activations=("relu", "sigmoid"), fault=None):
    """Central differences against the reference engine on tiny 64-bit models."""
    rng = rng_for(seed, STREAM_CHECK, 1)
    worst, failures, cases = 0.0, [], 0
    for act in activations:
        if arch == "lenet5":
            config = LeNet5Config(conv1=2, conv2=3, fc1=5, fc2=4, activation=act)
            n = 2
        else:
            config = Tree3Config(K=2, M=2, activation=act)
            n = 1
        params = init_params(config, int(rng.integers(2**31)), dtype=np.float64)
        x = rng.uniform(-1, 1, (n,) + config.geometry.image_shape)
        y = rng.integers(0, 10, n)
        analytic = ge.backward_reference(params, config, forward(params, config, x), y)
        if fault is not None:
            analytic = fault(analytic)
        report = ge.finite_difference_check(params, config, x, y, eps=eps, analytic=analytic)
        cases += 1
        for name, (err, scale, _) in report.items():
            rel = err / scale if scale > 0 else err
            worst = max(worst, rel)
            if rel >= tol:
                failures.append(f"{arch}/{act} {name} rel err {rel:.3g}")
    return SuiteResult(f"fd max rel err < {tol:g}", not failures, worst, tol, cases, failures)


def sign_flip_fault(bundle):
    """Negate the largest-magnitude conv gradient entry (fault-injection hook)."""
    out = bundle.copy()
    name = next(iter(out.grads))
    g = out.grads[name]
    i = int(np.argmax(np.abs(g)))
    g.reshape(-1)[i] = -g.reshape(-1)[i]
    return out

"""SGD with Nesterov momentum and L2 weight decay, plus learning-rate schedules.

Update rule, applied per parameter tensor with gradient ``g`` (a mini-batch mean)::

    g~ = g + alpha * w
    v  = mu * v + g~
    w  = w - eta * (g~ + mu * v)
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError


@dataclass(frozen=True)
class HyperParams:
    eta: float
    mu: float = 0.0
    alpha: float = 0.0
    batch: int = 100

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if not 0 <= self.mu < 1:
            raise ValueError(f"mu must lie in [0, 1), got {self.mu}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.batch < 1:
            raise ValueError(f"batch must be positive, got {self.batch}")


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant or geometric learning rate, with an optional L2 switch.

    ``segments`` holds ``(start_epoch, eta)`` pairs; each rate holds until the
    next start. ``decay_switch`` is ``(epoch, new_alpha)``.
    """
    kind: str = "constant"
    segments: tuple = ()
    eta0: float = 0.0
    factor: float = 1.0
    period: int = 1
    decay_switch: tuple = None

    def __post_init__(self):
        if self.kind not in ("constant", "piecewise", "geometric"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "piecewise":
            starts = [s for s, _ in self.segments]
            if not starts or starts[0] != 0 or starts != sorted(starts):
                raise ValueError("piecewise segments must start at epoch 0 and be increasing")
        if self.kind == "geometric" and not 0 < self.factor < 1:
            raise ValueError(f"geometric factor must lie in (0, 1), got {self.factor}")

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "piecewise":
            d["segments"] = [[int(s), float(e)] for s, e in self.segments]
        elif self.kind == "geometric":
            d.update(eta0=self.eta0, factor=self.factor, period=self.period)
        else:
            d["eta0"] = self.eta0
        if self.decay_switch is not None:
            d["decay_switch"] = [int(self.decay_switch[0]), float(self.decay_switch[1])]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "segments" in d:
            d["segments"] = tuple((int(s), float(e)) for s, e in d["segments"])
        if d.get("decay_switch") is not None:
            d["decay_switch"] = (int(d["decay_switch"][0]), float(d["decay_switch"][1]))
        return cls(**d)


def constant(eta, decay_switch=None):
    return Schedule("constant", eta0=eta, decay_switch=decay_switch)


def piecewise(boundaries, etas, decay_switch=None):
    return Schedule("piecewise", tuple(zip(boundaries, etas)), decay_switch=decay_switch)


def geometric(eta0, factor, period, decay_switch=None):
    return Schedule("geometric", eta0=eta0, factor=factor, period=period, decay_switch=decay_switch)


def schedule_eta(schedule, epoch, total_epochs=None):
    if epoch < 0 or (total_epochs is not None and epoch >= total_epochs):
        raise ValueError(f"epoch {epoch} outside the schedule [0, {total_epochs})")
    if schedule.kind == "constant":
        return schedule.eta0
    if schedule.kind == "geometric":
        return schedule.eta0 * schedule.factor ** (epoch // schedule.period)
    eta = schedule.segments[0][1]
    for start, value in schedule.segments:
        if epoch >= start:
            eta = value
    return eta


def schedule_alpha(schedule, epoch, base_alpha):
    if schedule.decay_switch is not None and epoch >= schedule.decay_switch[0]:
        return schedule.decay_switch[1]
    return base_alpha


@dataclass
class OptimizerState:
    velocity: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(a) for a in params.arrays()])


def sgd_nesterov_step(params, grads, state, eta, mu, alpha, masks=None):
    """In-place Nesterov step over every tensor of ``params``.

    ``grads`` is a sequence aligned with ``params.arrays()``; ``masks`` optionally
    maps a tensor index to a 0/1 array of entries allowed to change.
    """
    arrays = params.arrays()
    grads = list(grads)
    if len(grads) != len(arrays) or len(state.velocity) != len(arrays):
        raise ShapeError("params, grads and velocity must have the same number of tensors", "tensors")
    for i, (w, g, v) in enumerate(zip(arrays, grads, state.velocity)):
        if g.shape != w.shape or v.shape != w.shape:
            raise ShapeError(f"tensor {i}: param {w.shape}, grad {g.shape}, velocity {v.shape}", "shape")
        gt = g + alpha * w if alpha else g
        if masks is not None and i in masks:
            gt = gt * masks[i]
        v *= mu
        v += gt
        w -= eta * (gt + mu * v)
    return params, state

"""Training plans: hyper-parameters, schedules and the built-in preset catalog."""

import json
from dataclasses import asdict, dataclass, field, fields, replace

from . import optim
from .datasets import AugmentPolicy
from .exceptions import UnknownPlanError
from .models import Geometry, LeNet5Config, Tree3Config
from .optim import HyperParams, Schedule


@dataclass(frozen=True)
class TrainPlan:
    name: str = "custom"
    arch: str = "tree3"  # tree3 | tentree | lenet5
    K: int = 6
    M: int = 16
    geometry: str = "cifar"
    activation: str = "relu"
    eta: float = 0.075
    mu: float = 0.965
    alpha: float = 5e-5
    batch: int = 100
    epochs: int = 200
    mode: str = "offline"
    dataset_size: int = 50000
    schedule: Schedule = field(default_factory=lambda: optim.constant(0.075))
    augment_shift: int = 2
    hflip: bool = True
    seed: int = 0
    pruned_bp: bool = False
    threshold: float = None
    active_fraction: float = None
    recalibrate_every: int = 100
    desk_epochs: int = None
    desk_size: int = None
    note: str = ""

    def __post_init__(self):
        if self.arch not in ("tree3", "tentree", "lenet5"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.mode not in ("offline", "online"):
            raise ValueError(f"mode must be 'offline' or 'online', got {self.mode!r}")
        if self.mode == "online" and self.epochs != 1:
            raise ValueError("online mode trains each example once: epochs must be 1")
        if self.threshold is not None and self.active_fraction is not None:
            raise ValueError("give either a fixed threshold or an active fraction, not both")
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", Schedule.from_dict(self.schedule))

    @property
    def hp(self):
        return HyperParams(self.eta, self.mu, self.alpha, self.batch)

    @property
    def augment(self):
        return AugmentPolicy(self.augment_shift, self.hflip)

    def model_config(self):
        geometry = Geometry(self.geometry)
        if self.arch == "lenet5":
            return LeNet5Config(activation=self.activation, geometry=geometry)
        trees = 10 if self.arch == "tentree" else 1
        return Tree3Config(K=self.K, M=self.M, activation=self.activation, geometry=geometry,
                           outputs=10, trees=trees)

    def desk(self):
        """Reduced-scale copy used unless a full-scale run is requested."""
        changes = {}
        if self.desk_epochs is not None and self.mode == "offline":
            changes["epochs"] = min(self.epochs, self.desk_epochs)
        if self.desk_size is not None:
            changes["dataset_size"] = min(self.dataset_size, self.desk_size)
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plan fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def with_(self, **changes):
        if "epochs" in changes and self.mode == "online" and changes["epochs"] != 1:
            raise ValueError("online plans always run exactly one epoch")
        return replace(self, **changes)


_TREE3_SWITCH = (50, 1e-5)

_PLANS = [
    TrainPlan(
        name="lenet5-offline", arch="lenet5", activation="relu",
        eta=0.1, mu=0.9, alpha=1e-4, batch=100, epochs=200,
        schedule=optim.piecewise([0, 100, 150], [0.01, 0.005, 0.001]),
        augment_shift=2, hflip=True, desk_epochs=10, desk_size=12500,
        note="reported 0.7535 +- 0.0055"),
    TrainPlan(
        name="tree3-k6m16-offline", K=6, M=16, activation="sigmoid",
        eta=0.075, mu=0.965, alpha=5e-5, batch=100, epochs=200,
        schedule=optim.piecewise([0, 50, 70, 100, 150, 175],
                                 [0.075, 0.05, 0.01, 0.005, 0.001, 0.0001], _TREE3_SWITCH),
        desk_epochs=10, desk_size=12500, note="reported 0.7502 +- 0.0032"),
    TrainPlan(
        name="tree3-k15m16-offline", K=15, M=16, activation="sigmoid",
        eta=0.075, mu=0.965, alpha=5e-5, batch=100, epochs=200,
        schedule=optim.piecewise([0, 50, 70, 100, 150], [0.075, 0.05, 0.01, 0.0075, 0.003],
                                 _TREE3_SWITCH),
        desk_epochs=10, desk_size=12500, note="reported 0.7670 +- 0.0041"),
    TrainPlan(
        name="tree3-k15m80-offline", K=15, M=80, activation="relu",
        eta=0.075, mu=0.965, alpha=5e-5, batch=100, epochs=200,
        schedule=optim.geometric(0.075, 0.6, 20, _TREE3_SWITCH), augment_shift=4,
        desk_epochs=10, desk_size=12500, note="reported 0.7913 +- 0.0022"),
    TrainPlan(
        name="tentree-k15m80-offline", arch="tentree", K=15, M=80, activation="relu",
        eta=0.05, mu=0.97, alpha=5e-5, batch=100, epochs=200,
        schedule=optim.geometric(0.05, 0.6, 20, _TREE3_SWITCH), augment_shift=4,
        desk_epochs=10, desk_size=12500, note="reported ~0.815"),
    TrainPlan(
        name="tree3-mnist", K=15, M=16, geometry="mnist", activation="relu",
        eta=0.1, mu=0.9, alpha=5e-4, batch=100, epochs=200, dataset_size=60000,
        schedule=optim.piecewise([0, 50, 70, 100, 150], [0.075, 0.05, 0.01, 0.0075, 0.003]),
        augment_shift=2, hflip=False, desk_epochs=5, note="reported 0.9907"),
    TrainPlan(
        name="tree3-k6m16-desk", K=6, M=16, activation="relu",
        eta=0.02, mu=0.965, alpha=5e-5, batch=50, epochs=10, dataset_size=12500,
        schedule=optim.constant(0.02), augment_shift=2, hflip=True,
        note="desk-scale CIFAR smoke run; acceptance bar 0.40"),
]

for _size, _batch, _eta, _mu, _alpha, _acc in [
        (50000, 100, 0.012, 0.96, 1e-4, "0.5286 +- 0.0131"),
        (25000, 100, 0.017, 0.96, 3e-3, "0.4844 +- 0.0124"),
        (12500, 50, 0.012, 0.94, 8e-3, "0.4428 +- 0.0098")]:
    _PLANS.append(TrainPlan(
        name=f"lenet5-online-{_size // 1000}k", arch="lenet5", activation="relu",
        eta=_eta, mu=_mu, alpha=_alpha, batch=_batch, epochs=1, mode="online",
        dataset_size=_size, schedule=optim.constant(_eta), note=f"reported {_acc}"))

for _size, _batch, _eta, _alpha, _acc in [
        (50000, 100, 0.02, 5e-7, "0.6051 +- 0.0046"),
        (25000, 100, 0.03, 5e-6, "0.5550 +- 0.0092"),
        (12500, 50, 0.02, 5e-5, "0.5018 +- 0.0083")]:
    _PLANS.append(TrainPlan(
        name=f"tree3-online-{_size // 1000}k", K=6, M=16, activation="relu",
        eta=_eta, mu=0.965, alpha=_alpha, batch=_batch, epochs=1, mode="online",
        dataset_size=_size, schedule=optim.constant(_eta), note=f"reported {_acc}"))


def builtin_plans():
    return {p.name: p for p in _PLANS}


def get_plan(name):
    plans = builtin_plans()
    if name not in plans:
        raise UnknownPlanError(name, plans)
    return plans[name]


def describe_plans():
    lines = []
    for p in _PLANS:
        sched = p.schedule.to_dict()
        lines.append(f"  {p.name:24s} eta={p.eta:g} mu={p.mu:g} alpha={p.alpha:g} batch={p.batch} "
                     f"epochs={p.epochs} act={p.activation} schedule={json.dumps(sched)}  ({p.note})")
    return "\n".join(lines)

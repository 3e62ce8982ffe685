"""Offline and online training loops, evaluation, replicates and checkpoints."""

import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradients as ge
from .datasets import ImageSet, augment_batch, draw_augmentation
from .exceptions import CheckpointError, ConfigMismatchError, NonFiniteLossError, ShapeError
from .models import (STREAM_AUGMENT, STREAM_SHUFFLE, STREAM_SPLIT, LeNet5Config, LeNet5Params,
                     Tree3Config, Tree3Params, config_from_dict, forward, init_params, rng_for)
from .optim import OptimizerState, schedule_alpha, schedule_eta, sgd_nesterov_step
from .tensor_core import Activation

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "train_loss", "test_accuracy", "lr",
                   "zero_frac_conv", "zero_frac_tree", "zero_frac_fc"]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    lr: float
    zero_frac: dict = field(default_factory=dict)


@dataclass
class RunResult:
    final_test_accuracy: float
    history: list
    sparsity: ge.SparsityStats
    wall_time: float
    params: object = None
    config: object = None
    seed: int = 0
    visit_counts: np.ndarray = None
    first_loss: float = float("nan")
    trajectory: list = None

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for rec in self.history:
            w.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.test_accuracy:.6f}", f"{rec.lr:g}"]
                       + [("" if rec.zero_frac.get(k) is None else f"{rec.zero_frac[k]:.6f}")
                          for k in ("conv", "tree", "fc")])
        return buf.getvalue()


@dataclass
class ReplicateSummary:
    plan_name: str
    n: int
    mean: float
    std: float
    runs: list

    def to_dict(self):
        return {"plan_name": self.plan_name, "n": self.n, "mean": self.mean, "std": self.std,
                "runs": self.runs}


def evaluate(params, config, testset, batch=500):
    """Fraction of examples whose arg-max logit (lowest index on ties) matches the label."""
    if testset.images.shape[1:] != config.geometry.image_shape:
        raise ShapeError(f"test images {testset.images.shape[1:]} do not match the model "
                         f"geometry {config.geometry.image_shape}", "image")
    correct = 0
    for start in range(0, len(testset), batch):
        x = testset.pixels(slice(start, start + batch), params.dtype)
        logits = forward(params, config, x).logits
        correct += int((logits.argmax(axis=1) == testset.labels[start:start + batch]).sum())
    return correct / len(testset)


def mean_loss(params, config, dataset, batch=500):
    total = 0.0
    for start in range(0, len(dataset), batch):
        x = dataset.pixels(slice(start, start + batch), params.dtype)
        trace = forward(params, config, x)
        loss, _ = ge.tc.softmax_xent(trace.logits, dataset.labels[start:start + batch])
        total += loss * x.shape[0]
    return total / len(dataset)


def split_validation(train, n, seed=0):
    """Remove a seeded uniform sample of ``n`` examples from ``train`` as a validation set."""
    if n > len(train):
        raise ValueError(f"validation size {n} exceeds the {len(train)} training examples")
    if n == 0:
        return train, train[:0]
    rng = rng_for(seed, STREAM_SPLIT)
    picked = np.zeros(len(train), dtype=bool)
    picked[rng.choice(len(train), size=n, replace=False)] = True
    return train[~picked], train[picked]


def _gradients(params, config, x, y, plan, theta):
    pruned = plan.pruned_bp and isinstance(config, Tree3Config) and config.activation is Activation.RELU
    if theta is not None:
        if not isinstance(config, Tree3Config) or config.activation is not Activation.RELU:
            raise ValueError("gradient thresholding needs a ReLU Tree-3 model")
        return ge.compute_gradients(params, config, x, y, pruned=True, threshold=theta)
    return ge.compute_gradients(params, config, x, y, pruned=pruned)


def _calibrate(params, config, x, y, target, sample=20):
    """Threshold leaving ``target`` of the route-level instances of a small batch active."""
    trace = forward(params, config, x[:sample])
    bundle = ge.route_backward(params, config, trace, y[:sample], threshold=None, keep_routes=True)
    # keep the per-example scale of a full mini-batch
    scale = min(sample, x.shape[0]) / x.shape[0]
    return ge.find_threshold_for_fraction([bundle], target) * scale


def train(plan, datasets, params=None, record_trajectory=False, max_steps=None,
          evaluate_every_epoch=True, callback=None):
    """Run ``plan`` on ``(train, test)``; returns a :class:`RunResult`.

    ``params`` overrides the seeded initialization. ``max_steps`` stops early
    (used by equivalence tests); ``record_trajectory`` keeps a copy of the
    parameters after every step.
    """
    trainset, testset = datasets
    config = plan.model_config()
    if trainset.images.shape[1:] != config.geometry.image_shape:
        raise ConfigMismatchError(
            f"plan {plan.name} expects {config.geometry.value} images "
            f"{config.geometry.image_shape}, got {trainset.images.shape[1:]}")
    if plan.dataset_size > len(trainset):
        if plan.mode == "online":
            raise ValueError(f"plan needs {plan.dataset_size} examples, only {len(trainset)} given")
        log.info("dataset_size %d exceeds %d available examples; using all", plan.dataset_size,
                 len(trainset))
    size = min(plan.dataset_size, len(trainset))
    if params is None:
        params = init_params(config, plan.seed)
    else:
        params = params.copy()
    state = OptimizerState.zeros_like(params)
    masks = None
    if isinstance(config, Tree3Config) and config.fc_mask() is not None:
        masks = {2: config.fc_mask().astype(params.dtype)}
    policy = plan.augment
    visits = np.zeros(size, dtype=np.int64)
    stats = ge.SparsityStats()
    history, trajectory = [], []
    first_loss = float("nan")
    theta = plan.threshold
    t0 = time.perf_counter()
    step = 0
    for epoch in range(plan.epochs):
        eta = schedule_eta(plan.schedule, epoch, plan.epochs)
        alpha = schedule_alpha(plan.schedule, epoch, plan.alpha)
        order = rng_for(plan.seed, STREAM_SHUFFLE, epoch).permutation(size)
        flips, dxs, dys = draw_augmentation(policy, rng_for(plan.seed, STREAM_AUGMENT, epoch), size)
        epoch_stats = ge.SparsityStats()
        losses = []
        seen = 0
        for start in range(0, size, plan.batch):
            idx = order[start:start + plan.batch]
            visits[idx] += 1
            x = trainset.pixels(idx, params.dtype)
            x = augment_batch(x, policy, flips[idx], dxs[idx], dys[idx])
            y = trainset.labels[idx]
            if plan.active_fraction is not None and step % plan.recalibrate_every == 0:
                theta = _calibrate(params, config, x, y, plan.active_fraction)
            bundle = _gradients(params, config, x, y, plan, theta)
            if not math.isfinite(bundle.loss):
                raise NonFiniteLossError(epoch, step, bundle.loss)
            if step == 0:
                first_loss = bundle.loss
            losses.append(bundle.loss * len(idx))
            seen += len(idx)
            if isinstance(config, Tree3Config):
                epoch_stats.update(bundle)
                stats.update(bundle)
            sgd_nesterov_step(params, [bundle.grads[n] for n in params.names()], state,
                              eta, plan.mu, alpha, masks)
            step += 1
            if record_trajectory:
                trajectory.append(params.copy())
            if callback is not None:
                callback(epoch, step, bundle)
            if max_steps is not None and step >= max_steps:
                break
        acc = evaluate(params, config, testset) if (evaluate_every_epoch and testset is not None
                                                    and len(testset)) else float("nan")
        rec = EpochRecord(epoch, sum(losses) / max(1, seen), acc, eta,
                          dict(epoch_stats.fraction_zero))
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.4f lr %g", epoch, rec.train_loss, acc, eta)
        if max_steps is not None and step >= max_steps:
            break
    final = history[-1].test_accuracy if history else float("nan")
    return RunResult(final, history, stats, time.perf_counter() - t0, params, config, plan.seed,
                     visits, first_loss, trajectory if record_trajectory else None)


def run_replicates(plan, datasets, n, same_seed=False, **kwargs):
    """Train ``n`` independent runs (seeds ``seed .. seed+n-1``) and summarize accuracy."""
    if n < 2:
        raise ValueError("replicate statistics need n >= 2")
    runs, accs = [], []
    for i in range(n):
        seed = plan.seed if same_seed else plan.seed + i
        try:
            res = train(plan.with_(seed=seed), datasets, **kwargs)
        except Exception as exc:  # a failed run is recorded, the rest continue
            log.warning("replicate seed %d failed: %s", seed, exc)
            runs.append({"seed": seed, "status": "failed", "error": str(exc)})
            continue
        accs.append(res.final_test_accuracy)
        runs.append({"seed": seed, "status": "ok", "accuracy": res.final_test_accuracy,
                     "wall_time": res.wall_time})
    mean = float(np.mean(accs)) if accs else float("nan")
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else float("nan")
    return ReplicateSummary(plan.name, n, mean, std, runs)


# ----------------------------------------------------------------- checkpoints

MAGIC = b"TREEBPCK"
VERSION = 1


def save_checkpoint(params, config, path):
    """Magic, version, JSON config record, then (rank, extents, float32 LE data) per tensor."""
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(cfg)))
        f.write(cfg)
        arrays = params.arrays()
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf[pos:pos + n], pos + n


def load_checkpoint(path, expected=None):
    """Return ``(params, config)``; ``expected`` config triggers a mismatch check."""
    buf = Path(path).read_bytes()
    magic, pos = _take(buf, 0, 8, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a treebp checkpoint (bad magic)")
    head, pos = _take(buf, pos, 8, "header")
    version, cfg_len = struct.unpack("<II", head)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    raw, pos = _take(buf, pos, cfg_len, "config")
    try:
        config = config_from_dict(json.loads(raw))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt config record: {exc}") from None
    shapes = list(config.shapes().values())
    raw, pos = _take(buf, pos, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    if count != len(shapes):
        raise CheckpointError(f"{path}: {count} tensors, config needs {len(shapes)}")
    arrays = []
    for shape in shapes:
        raw, pos = _take(buf, pos, 4, "rank")
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, 4 * rank, "extents")
        extents = struct.unpack(f"<{rank}I", raw)
        if tuple(extents) != tuple(shape):
            raise CheckpointError(f"{path}: tensor extents {extents} do not match config {shape}")
        nbytes = 4 * int(np.prod(extents))
        raw, pos = _take(buf, pos, nbytes, "tensor data")
        arrays.append(np.frombuffer(raw, dtype="<f4").reshape(extents).astype(np.float32))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    cls = LeNet5Params if isinstance(config, LeNet5Config) else Tree3Params
    params = cls(*arrays)
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"checkpoint config {config.to_dict()} does not match "
                                  f"requested {expected.to_dict()}")
    return params, config


def write_metrics(result, path):
    Path(path).write_text(result.metrics_csv())


def write_summary(summary, path):
    Path(path).write_text(json.dumps(summary.to_dict(), indent=2))


def as_imageset(x, y):
    return x if isinstance(x, ImageSet) else ImageSet(x, y)

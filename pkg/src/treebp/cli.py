"""Command-line entry point: ``treebp {fetch,train,eval,gradcheck,sparsity,gradhist,routes}``."""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, checks
from .datasets import ImageSet, fetch, load_dataset
from .exceptions import ConfigMismatchError, TreeBPError
from .models import (Geometry, LeNet5Config, Tree3Config, count_gradient_instances, count_routes,
                     init_params, rng_for)
from .plans import TrainPlan, describe_plans, get_plan
from .training import (evaluate, load_checkpoint, run_replicates, save_checkpoint, train,
                       write_metrics, write_summary)

log = logging.getLogger("treebp")

UPDATE_RULE = """optimizer (per tensor, g = mini-batch mean gradient):
  g~ = g + alpha * w ;  v = mu * v + g~ ;  w = w - eta * (g~ + mu * v)
eta follows the plan's schedule; the listed eta is the nominal constant."""


class UsageError(Exception):
    pass


def _data_dir(args):
    d = args.data_dir or os.environ.get("TREEBP_DATA_DIR")
    if not d:
        raise UsageError("no data directory: pass --data-dir or set TREEBP_DATA_DIR")
    return Path(d)


def _dataset_name(geometry):
    return "mnist" if Geometry(geometry) is Geometry.MNIST else "cifar10"


def _resolve_plan(args):
    if args.plan and args.plan_file:
        raise UsageError("give either --plan or --plan-file, not both")
    if args.plan_file:
        plan = TrainPlan.from_json(Path(args.plan_file).read_text())
    elif args.plan:
        plan = get_plan(args.plan)
    else:
        raise UsageError("one of --plan or --plan-file is required")
    if not getattr(args, "full", False):
        plan = plan.desk()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "pruned_bp", None) is not None:
        changes["pruned_bp"] = args.pruned_bp == "on"
    if getattr(args, "threshold", None) is not None:
        changes.update(threshold=args.threshold, active_fraction=None)
    if getattr(args, "active_fraction", None) is not None:
        changes.update(active_fraction=args.active_fraction, threshold=None)
    return plan.with_(**changes)


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fetch(args):
    fetch(args.dataset, _data_dir(args))
    return 0


def cmd_train(args):
    plan = _resolve_plan(args)
    datasets = load_dataset(_dataset_name(plan.geometry), _data_dir(args))
    out = _out_dir(args)
    (out / "plan.json").write_text(plan.to_json())
    if args.replicates and args.replicates > 1:
        summary = run_replicates(plan, datasets, args.replicates)
        write_summary(summary, out / "summary.json")
        print(f"{plan.name}: mean {summary.mean:.4f} std {summary.std:.4f} over {summary.n} runs")
        return 0 if all(r["status"] == "ok" for r in summary.runs) else 1
    result = train(plan, datasets)
    write_metrics(result, out / "metrics.csv")
    save_checkpoint(result.params, result.config, out / "checkpoint.bin")
    summary = {"plan_name": plan.name, "n": 1, "mean": result.final_test_accuracy, "std": None,
               "runs": [{"seed": plan.seed, "status": "ok", "accuracy": result.final_test_accuracy,
                         "wall_time": result.wall_time,
                         "sparsity": result.sparsity.fraction_zero}]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"{plan.name}: test accuracy {result.final_test_accuracy:.4f} "
          f"({result.wall_time:.1f} s); outputs in {out}")
    return 0


def _expected_config(args, config):
    """Config implied by --arch/--k/--m, or None when none were given."""
    if args.k is None and args.m is None and args.arch is None:
        return None
    if (args.arch or "tree3") == "lenet5":
        return LeNet5Config(activation=config.activation, geometry=config.geometry)
    base = config if isinstance(config, Tree3Config) else Tree3Config(geometry=config.geometry)
    trees = 10 if args.arch == "tentree" else (base.trees if args.arch is None else 1)
    return Tree3Config(K=args.k if args.k is not None else base.K,
                       M=args.m if args.m is not None else base.M,
                       activation=base.activation, geometry=base.geometry, trees=trees,
                       outputs=base.outputs)


def _load_model(args):
    if args.checkpoint:
        params, config = load_checkpoint(args.checkpoint)
        expected = _expected_config(args, config)
        if expected is not None and expected != config:
            raise ConfigMismatchError(f"checkpoint holds {config.to_dict()}, "
                                      f"requested {expected.to_dict()}")
        return params, config
    if getattr(args, "plan", None) or getattr(args, "plan_file", None):
        plan = _resolve_plan(args)
        config = plan.model_config()
    else:
        geometry = Geometry(args.geometry)
        config = (LeNet5Config(geometry=geometry) if args.arch == "lenet5" else
                  Tree3Config(K=args.k or 6, M=args.m or 16, geometry=geometry,
                              trees=10 if args.arch == "tentree" else 1))
    log.info("no checkpoint given: using a fresh seeded model")
    return init_params(config, args.seed or 0), config


def _test_set(args, config):
    if args.synthetic:
        rng = rng_for(args.seed or 0, 9)
        shape = (args.synthetic,) + config.geometry.image_shape
        return ImageSet(rng.integers(0, 256, shape, dtype=np.uint8), rng.integers(0, 10, args.synthetic))
    _, test = load_dataset(_dataset_name(config.geometry), _data_dir(args))
    return test


def cmd_eval(args):
    params, config = _load_model(args)
    test = _test_set(args, config)
    acc = evaluate(params, config, test)
    print(f"test accuracy {acc:.4f} over {len(test)} examples")
    if args.out:
        (_out_dir(args) / "eval.json").write_text(json.dumps({"accuracy": acc, "examples": len(test)}))
    return 0


def cmd_gradcheck(args):
    fault = checks.sign_flip_fault if args.inject_fault else None
    results = []
    if args.arch in (None, "tree3"):
        results.append(checks.oracle_suite(args.instances, args.seed or 0, fault=fault))
    results.append(checks.fd_suite("lenet5" if args.arch == "lenet5" else "tree3", args.seed or 0,
                                   fault=fault))
    print(", ".join(f"{r.name}: {'PASS' if r.passed else 'FAIL'}" for r in results))
    for r in results:
        print("  " + r.line())
        for f in r.failures[:20]:
            print("    " + f)
    return 0 if all(r.passed for r in results) else 1


def cmd_sparsity(args):
    params, config = _load_model(args)
    test = _test_set(args, config)
    fr = analysis.per_example_zero_fractions(params, config, test, limit=args.examples)
    rows = analysis.sparsity_table(fr, samples=args.samples, seed=args.seed or 0)
    out = _out_dir(args)
    with open(out / "sparsity.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["layer", "fraction_zero", "std", "samples", "examples"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['layer']:6s} zero fraction {r['fraction_zero']:.4f} +- {r['std']:.4f}")
    return 0


def cmd_gradhist(args):
    params, config = _load_model(args)
    test = _test_set(args, config)
    hists = analysis.gradient_histograms(params, config, test, layer=args.layer,
                                         examples=args.examples or 200, bins=args.bins)
    out = _out_dir(args)
    meta = {}
    for (mode, subset), h in hists.items():
        name = f"gradhist_{args.layer}_{mode}_{subset}.csv"
        with open(out / name, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count", "cum_fraction", "delta0"])
            if h is None:
                meta[name] = None
                continue
            edge, cum = h.delta0(0.97)
            acc = 0
            for lo, hi, c in h.rows():
                acc += int(c)
                w.writerow([f"{lo:.9g}", f"{hi:.9g}", int(c), f"{acc / h.total:.9g}",
                            int(np.isclose(hi, edge, rtol=1e-12))])
            meta[name] = {"mode": mode, "subset": subset, "total": h.total, "delta0": edge,
                          "delta0_mass": cum}
    (out / f"gradhist_{args.layer}.json").write_text(json.dumps(meta, indent=2))
    for name, m in meta.items():
        print(f"{name}: " + ("empty" if m is None else f"{m['total']} values, delta0 {m['delta0']:.3g}"))
    return 0


def cmd_routes(args):
    arch = args.arch or "tree3"
    geometry = Geometry(args.geometry)
    if args.instances:
        if arch == "lenet5":
            n = count_gradient_instances("lenet5", geometry=geometry, post_pool=args.post_pool)
        else:
            n = count_gradient_instances("tree3", args.k or 6, args.m or 16, geometry)
    else:
        n = count_routes(arch if arch != "tentree" else "tree3")
    print(n)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="treebp", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Tree-3 and LeNet-5 training with single-route (pruned) backpropagation.",
        epilog="built-in plans:\n" + describe_plans() + "\n\n" + UPDATE_RULE)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, plan=False, model=False, data=True):
        if data:
            sp.add_argument("--data-dir", help="dataset root (default: $TREEBP_DATA_DIR)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        if plan:
            sp.add_argument("--plan", help="built-in plan name")
            sp.add_argument("--plan-file", help="plan JSON file")
            sp.add_argument("--full", action="store_true", help="full-scale epochs and data size")
        if model:
            sp.add_argument("--checkpoint")
            sp.add_argument("--arch", choices=["tree3", "tentree", "lenet5"])
            sp.add_argument("--k", type=int)
            sp.add_argument("--m", type=int)
            sp.add_argument("--geometry", choices=["cifar", "mnist"], default="cifar")
            sp.add_argument("--synthetic", type=int, metavar="N",
                            help="use N seeded random images instead of the test set")
            sp.add_argument("--examples", type=int, help="limit on test examples swept")

    sp = sub.add_parser("fetch", help="download and verify a dataset")
    sp.add_argument("dataset", choices=["cifar10", "mnist"])
    common(sp)
    sp.set_defaults(func=cmd_fetch)

    sp = sub.add_parser("train", help="train a plan; writes metrics.csv, summary.json, checkpoint",
                        formatter_class=argparse.RawDescriptionHelpFormatter,
                        epilog="plans:\n" + describe_plans() + "\n\n" + UPDATE_RULE)
    common(sp, plan=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--pruned-bp", choices=["on", "off"])
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--active-fraction", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="test accuracy of a checkpoint")
    common(sp, model=True)
    sp.set_defaults(func=cmd_eval, plan=None, plan_file=None)

    sp = sub.add_parser("gradcheck", help="pruned-vs-reference and finite-difference suites")
    common(sp, data=False)
    sp.add_argument("--arch", choices=["tree3", "lenet5"])
    sp.add_argument("--instances", type=int, default=200)
    sp.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sparsity", help="per-layer zero-gradient fractions over the test set")
    common(sp, model=True)
    sp.add_argument("--samples", type=int, default=10)
    sp.set_defaults(func=cmd_sparsity, plan=None, plan_file=None)

    sp = sub.add_parser("gradhist", help="1000-bin gradient histograms split by correct/wrong")
    common(sp, model=True)
    sp.add_argument("--layer", choices=["conv", "tree", "fc"], default="conv")
    sp.add_argument("--bins", type=int, default=1000)
    sp.set_defaults(func=cmd_gradhist, plan=None, plan_file=None)

    sp = sub.add_parser("routes", help="route and gradient-instance counts")
    sp.add_argument("--arch", choices=["tree3", "tentree", "lenet5"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--geometry", choices=["cifar", "mnist"], default="cifar")
    sp.add_argument("--instances", action="store_true", help="count gradient instances")
    sp.add_argument("--post-pool", action="store_true", help="LeNet-5 instances after pooling")
    sp.set_defaults(func=cmd_routes)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"treebp: error: {exc}", file=sys.stderr)
        return 2
    except (TreeBPError, ValueError, OSError, KeyError) as exc:
        print(f"treebp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``coldstart`` command line: train, simulate, select, verify-theory, synth.

Exit status is 0 on success, 1 when a verification fails and 2 on bad input.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gadgets, pmf
from .dataio import DatasetDescriptor, holdout_split, load_dataset, save_dataset, split_warm_cold, synth_generate
from .exceptions import DatasetParseError
from .selection import ALGORITHMS, CandidatePool, select
from .simulate import ExperimentConfig, run_experiment

log = logging.getLogger("coldstart")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _csv_list(text, conv=str):
    return [conv(x) for x in text.split(",") if x.strip()]


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: top level must be an object")
    return doc


def build_config(args):
    doc = load_config(getattr(args, "config", None))
    overrides = {
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "out": getattr(args, "out", None),
        "setting": getattr(args, "setting", None),
        "budgets": getattr(args, "budget", None),
        "algorithms": getattr(args, "algos", None),
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "deterministic", False):
        doc["timing"] = False
    try:
        return ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad config: {exc}") from None


def dataset_from_config(cfg):
    entry = dict(cfg.dataset)
    if "synthetic" in entry:
        s = dict(entry["synthetic"])
        ds, _ = synth_generate(s.pop("m"), s.pop("n"), s.pop("d"), s.pop("noise_sigma", 0.5),
                               seed=s.pop("seed", cfg.seed), **s)
        return ds
    try:
        desc = DatasetDescriptor.from_dict(entry)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad dataset descriptor: {exc}") from None
    return load_dataset(desc)


def cmd_train(args):
    cfg = build_config(args)
    ds = dataset_from_config(cfg)
    warm, _ = split_warm_cold(ds, cfg.warm_fraction, cfg.seed)
    train_part, test_part = holdout_split(warm, cfg.holdout_fraction, cfg.seed)
    model = pmf.train(train_part, cfg.hyper, seed=cfg.seed)
    noise = pmf.estimate_noise(model, train_part)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    with open(out / "noise.json", "w", encoding="utf-8") as fh:
        json.dump({"sigma": noise.sigma.tolist(), "floor": noise.floor}, fh)
    score = pmf.rmse(model, test_part, ds.scale)
    print(f"warm users: {len(warm.rated_users())}  train ratings: {train_part.n_ratings}  "
          f"held-out ratings: {test_part.n_ratings}")
    print(f"held-out warm RMSE: {score:.4f}")
    print(f"checkpoint: {out / 'model.json'}")
    return EXIT_OK


def cmd_simulate(args):
    cfg = build_config(args)
    ds = dataset_from_config(cfg)
    result = run_experiment(ds, cfg)
    path = result.write(cfg.out)
    print(f"{len(result.rows)} rows, {len(result.trials)} cold users, "
          f"mean candidate pool {result.mean_pool_size:.1f} -> {path}")
    return EXIT_OK


def cmd_select(args):
    if args.model is None:
        raise InputError("select needs --model")
    try:
        model = pmf.FactorModel.load(args.model)
    except FileNotFoundError:
        raise InputError(f"model checkpoint not found: {args.model}") from None
    sigma = np.ones(model.n_items)
    if args.noise:
        try:
            with open(args.noise, encoding="utf-8") as fh:
                sigma = np.asarray(json.load(fh)["sigma"], dtype=float)
        except FileNotFoundError:
            raise InputError(f"noise file not found: {args.noise}") from None
    items = np.arange(model.n_items) if args.items is None else np.array(_csv_list(args.items, int))
    if items.size and (items.min() < 0 or items.max() >= model.n_items):
        raise InputError("item index out of range")
    pool = CandidatePool(items, model.V[:, items], sigma[items])
    algos = args.algos or ["FG2"]
    budget = max(args.budget or [10])
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for a in algos:
        plan = select(pool, budget, a, seed=args.seed, model=model)
        plan.write_csv(out / f"plan_{a}.csv")
        print(f"{a}: items {plan.items}  f = {plan.final_f:.6g}  evals = {plan.total_evals}")
    return EXIT_OK


def _perturbed_fixture(cell):
    fx = gadgets.counterexample_fixture()
    row, col = _csv_list(cell, int)
    M1 = fx.M1.copy()
    M1[row, col] = 1.0 - M1[row, col]
    return gadgets.CounterexampleFixture(M1, fx.M2, fx.x, fx.expected)


def cmd_verify_theory(args):
    fixture = _perturbed_fixture(args.perturb_m1) if args.perturb_m1 else None
    try:
        checks = gadgets.theory_checks(fixture, eta_sq=args.eta_sq)
    except np.linalg.LinAlgError as exc:
        print(f"FAIL  objective undefined for the fixture: {exc}")
        return EXIT_FAIL
    width = max(len(c.name) for c in checks)
    print(f"{'check':<{width}}  {'expected':>14}  {'computed':>14}  result")
    for c in checks:
        print(f"{c.name:<{width}}  {c.expected:>14.6f}  {c.computed:>14.6f}  {'PASS' if c.passed else 'FAIL'}")
    print()
    print(f"eta^2 = {args.eta_sq:g}")
    print(f"{'q':>2}  {'theta':>10}  {'alpha':>10}")
    for q in (1, 2, 3):
        print(f"{q:>2}  {gadgets.theta_value(q, args.eta_sq):>10.6f}  {gadgets.alpha_value(q, args.eta_sq):>10.6f}")
    failed = [c.name for c in checks if not c.passed]
    print()
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth(args):
    doc = load_config(args.config)
    s = dict(doc.get("dataset", {}).get("synthetic", {"m": 300, "n": 400, "d": 10, "noise_sigma": 0.5}))
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    try:
        ds, truth = synth_generate(s.pop("m"), s.pop("n"), s.pop("d"), s.pop("noise_sigma", 0.5),
                                   seed=s.pop("seed", seed), **s)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad synthetic dataset settings: {exc}") from None
    out = Path(args.out or "synthetic")
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "ratings.csv", "csv")
    truth.save(out / "truth.json")
    print(f"{ds.n_ratings} ratings, {ds.n_users} users, {ds.n_items} items -> {out}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--budget", type=lambda s: _csv_list(s, int), help="comma-separated budgets")
    common.add_argument("--algos", type=lambda s: _csv_list(s), help=f"comma-separated from {','.join(ALGORITHMS)}")
    common.add_argument("--setting", choices=("ideal", "real"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coldstart", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train PMF on warm users").set_defaults(func=cmd_train)
    sp = sub.add_parser("simulate", parents=[common], help="run the cold-user simulation")
    sp.add_argument("--deterministic", action="store_true", help="write 0 for runtimes so reruns are byte-identical")
    sp.set_defaults(func=cmd_simulate)
    sel = sub.add_parser("select", parents=[common], help="interview plan from a checkpoint")
    sel.add_argument("--model", help="model.json written by train")
    sel.add_argument("--noise", help="noise.json written by train")
    sel.add_argument("--items", help="comma-separated candidate item indices (default: all)")
    sel.set_defaults(func=cmd_select)
    vt = sub.add_parser("verify-theory", parents=[common], help="check the hardness constructions numerically")
    vt.add_argument("--eta-sq", type=float, default=12.0, help=argparse.SUPPRESS)
    vt.add_argument("--perturb-m1", help=argparse.SUPPRESS)
    vt.set_defaults(func=cmd_verify_theory)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset").set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, DatasetParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AssertionError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

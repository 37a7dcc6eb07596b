"""Command-line front end.

    boostresnet train-boost --config exp.json
    boostresnet train-e2e --config exp.json --depths 1 5 10
    boostresnet eval --model runs/x/model.json --config exp.json
    boostresnet diagnose runs/x

Exit codes: 0 success, 1 user error (bad config, missing or malformed
files), 2 runtime failure (oracle divergence, numerical errors).
"""

import argparse
import copy
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .boost import (BoostConfig, CSV_COLUMNS, ROUNDS_SCHEMA, RoundError, read_rounds_csv,
                    train_boostresnet, write_rounds_csv)
from .bounds import bounds_report, margins
from .data import (DataFormatError, GENERATORS, apply_normalization, load_csv, load_idx,
                   normalize, select_classes, train_test_split)
from .multiclass import MULTICLASS_CSV_COLUMNS, train_boostresnet_multiclass
from .numkit import NumericalError, Rng
from .oracle import OracleConfig, OracleError, train_e2e
from .resnet import TrainedResNet

log = logging.getLogger("boostresnet")

OUTPUT_ENV = "BOOSTRESNET_OUTPUT_DIR"
MULTICLASS_SCHEMA = "boostresnet.rounds-multiclass/1"
EPOCHS_SCHEMA = "boostresnet.epochs/1"
EPOCH_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc"]


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


DEFAULTS = {
    "task": "binary",
    "seed": 0,
    "dataset": {"kind": "generator", "name": "blobs", "params": {"m": 200}, "test_fraction": 0.0},
    "normalize": True,
    "architecture": {"n": None, "k": 8, "T_max": 10},
    "boost": {"gamma_threshold": 0.001, "patience": 3, "alpha_mode": None},
    "oracle": OracleConfig().to_dict(),
    "e2e": {"depths": [1, 5, 10, 20]},
    "bounds": {"thetas": [0.0, 0.1, 0.5], "theta": 0.5, "delta": 0.05},
    "output_dir": "runs/default",
    "record_wallclock": False,
}

DATASET_KEYS = {
    "generator": {"kind", "name", "params", "test_fraction"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels",
            "classes", "per_class", "test_per_class"},
    "csv": {"kind", "train", "test"},
}


def _merge(base, override, prefix=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            if prefix.startswith("dataset."):
                out[key] = val
                continue
            raise ConfigError(name, "unknown field")
        if isinstance(base[key], dict) and key != "params":
            if not isinstance(val, dict):
                raise ConfigError(name, "must be an object")
            if key == "dataset":
                out[key] = _merge({}, val, "dataset.") if val.get("kind") != "generator" \
                    else _merge(base[key], val, "dataset.")
            else:
                out[key] = _merge(base[key], val, name + ".")
        else:
            out[key] = val
    return out


def _need(cond, field, message):
    if not cond:
        raise ConfigError(field, message)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def validate_config(cfg):
    """Check every field; raises ConfigError naming the first offending one."""
    _need(cfg["task"] in ("binary", "multiclass"), "task", "must be 'binary' or 'multiclass'")
    _need(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    ds = cfg["dataset"]
    kind = ds.get("kind")
    _need(kind in DATASET_KEYS, "dataset.kind", f"must be one of {sorted(DATASET_KEYS)}")
    extra = set(ds) - DATASET_KEYS[kind]
    _need(not extra, f"dataset.{sorted(extra)[0] if extra else ''}", f"unknown field for kind '{kind}'")
    if kind == "generator":
        _need(ds.get("name") in GENERATORS, "dataset.name", f"must be one of {sorted(GENERATORS)}")
        _need(isinstance(ds.get("params", {}), dict), "dataset.params", "must be an object")
        tf = ds.get("test_fraction", 0.0)
        _need(isinstance(tf, (int, float)) and 0.0 <= tf < 1.0, "dataset.test_fraction", "must be in [0, 1)")
    elif kind == "idx":
        for key in ("train_images", "train_labels"):
            _need(isinstance(ds.get(key), str), f"dataset.{key}", "path required")
    else:
        _need(isinstance(ds.get("train"), str), "dataset.train", "path required")
    arch = cfg["architecture"]
    _need(_is_int(arch["k"]) and arch["k"] >= 1, "architecture.k", "must be an integer >= 1")
    _need(_is_int(arch["T_max"]) and arch["T_max"] >= 0, "architecture.T_max", "must be an integer >= 0")
    _need(arch["n"] is None or (_is_int(arch["n"]) and arch["n"] >= 1), "architecture.n",
          "must be null or a positive integer")
    b = cfg["boost"]
    _need(isinstance(b["gamma_threshold"], (int, float)), "boost.gamma_threshold", "must be a number")
    _need(_is_int(b["patience"]) and b["patience"] >= 1, "boost.patience", "must be an integer >= 1")
    _need(b["alpha_mode"] in (None, "exact", "closed-form"), "boost.alpha_mode",
          "must be 'exact', 'closed-form' or null")
    try:
        OracleConfig(**cfg["oracle"])
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        field = msg.split()[0] if msg.startswith("oracle.") else "oracle"
        raise ConfigError(field, msg) from exc
    depths = cfg["e2e"]["depths"]
    _need(isinstance(depths, list) and depths and all(_is_int(d) for d in depths),
          "e2e.depths", "must be a non-empty list of integers")
    _need(all(d >= 0 for d in depths), "e2e.depths", "depth T must be >= 0")
    bd = cfg["bounds"]
    _need(isinstance(bd["thetas"], list) and bd["thetas"], "bounds.thetas", "must be a non-empty list")
    _need(isinstance(bd["theta"], (int, float)) and bd["theta"] > 0, "bounds.theta", "must be > 0")
    _need(isinstance(bd["delta"], (int, float)) and 0 < bd["delta"] < 1, "bounds.delta", "must be in (0, 1)")
    _need(isinstance(cfg["output_dir"], str) and cfg["output_dir"], "output_dir", "must be a path")
    _need(isinstance(cfg["record_wallclock"], bool), "record_wallclock", "must be true or false")
    return cfg


def load_config(path=None, overrides=None):
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("<file>", "top level must be an object")
    cfg = _merge(DEFAULTS, raw)
    for dotted, val in (overrides or {}).items():
        if val is None:
            continue
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = val
    if os.environ.get(OUTPUT_ENV):
        cfg["output_dir"] = os.environ[OUTPUT_ENV]
    return validate_config(cfg)


def _data_seed(seed):
    return int(Rng(seed).spawn("data").next_u64(1)[0] >> np.uint64(1))


def load_datasets(cfg):
    """(train, test or None) after optional standardization fit on train."""
    ds = cfg["dataset"]
    seed = _data_seed(cfg["seed"])
    if ds["kind"] == "generator":
        params = dict(ds.get("params", {}))
        params.setdefault("seed", seed)
        try:
            full = GENERATORS[ds["name"]](**params)
        except TypeError as exc:
            raise ConfigError("dataset.params", str(exc)) from exc
        tf = ds.get("test_fraction", 0.0)
        train, test = train_test_split(full, tf, seed) if tf > 0 else (full, None)
    elif ds["kind"] == "idx":
        classes = ds.get("classes")
        train = load_idx(ds["train_images"], ds["train_labels"], "train")
        if classes is not None:
            train = select_classes(train, classes, ds.get("per_class"), seed)
        test = None
        if ds.get("test_images"):
            test = load_idx(ds["test_images"], ds["test_labels"], "test")
            if classes is not None:
                test = select_classes(test, classes, ds.get("test_per_class"), seed)
    else:
        train = load_csv(ds["train"], "train")
        test = load_csv(ds["test"], "test", train.n_classes) if ds.get("test") else None
    if cfg["task"] == "binary" and train.n_classes != 2:
        raise ConfigError("task", f"binary task needs 2 classes, dataset has {train.n_classes}")
    if cfg["normalize"]:
        train, others = normalize(train, [test] if test is not None else [])
        test = others[0] if others else None
    n = cfg["architecture"]["n"]
    if n is not None and n != train.n:
        raise ConfigError("architecture.n", f"is {n} but the data has {train.n} features")
    return train, test


def _boost_config(cfg):
    return BoostConfig(
        t_max=cfg["architecture"]["T_max"], hidden=cfg["architecture"]["k"],
        gamma_threshold=float(cfg["boost"]["gamma_threshold"]), patience=cfg["boost"]["patience"],
        alpha_mode=cfg["boost"]["alpha_mode"], seed=cfg["seed"],
        oracle=OracleConfig(**cfg["oracle"]), record_wallclock=cfg["record_wallclock"])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _accuracy(net, ds):
    pred = net.predict(ds.x)
    truth = ds.y_pm1() if net.task == "binary" else ds.y
    return float(np.mean(pred == truth))


def cmd_train_boost(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    bcfg = _boost_config(cfg)
    if cfg["task"] == "binary":
        net, run = train_boostresnet(train.x, train.y, bcfg)
        columns, schema, y_eval = CSV_COLUMNS, ROUNDS_SCHEMA, train.y_pm1()
    else:
        net, run = train_boostresnet_multiclass(train.x, train.y, train.n_classes, bcfg)
        columns, schema, y_eval = MULTICLASS_CSV_COLUMNS, MULTICLASS_SCHEMA, train.y
    net.meta = {"trainer": "boost", "seed": cfg["seed"]}
    net.save(out / "model.json")
    write_rounds_csv(out / "rounds.csv", run.rounds, columns, schema)
    bd = cfg["bounds"]
    report = bounds_report(net, train.x, y_eval, run, bd["thetas"], bd["theta"], bd["delta"])
    _write_json(out / "bounds.json", report)
    _write_json(out / "history.json",
                {"alphas": [a for a, _ in run.history],
                 "classifiers": [np.asarray(w).tolist() for _, w in run.history]})
    if train.shift is not None:
        _write_json(out / "normalization.json", train.normalization())
    _write_json(out / "resolved_config.json", cfg)
    last = run.rounds[-1]
    print(f"trained {net.depth} blocks; train accuracy {_accuracy(net, train):.4f}; "
          f"final edge {last.edge:.4f}")
    if test is not None:
        print(f"test accuracy {_accuracy(net, test):.4f}")
    print(f"outputs written to {out}")
    return 0


def _write_epochs_csv(path, history):
    lines = [f"# schema: {EPOCHS_SCHEMA}", ",".join(EPOCH_COLUMNS)]
    for row in history:
        lines.append(",".join(str(row[c]) if c == "epoch" else repr(float(row[c])) for c in EPOCH_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train_e2e(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    ocfg = OracleConfig(**cfg["oracle"])
    binary = cfg["task"] == "binary"
    y = train.y_pm1() if binary else train.y
    yt = None if test is None else (test.y_pm1() if binary else test.y)
    for depth in cfg["e2e"]["depths"]:
        net, history = train_e2e(train.x, y, cfg["architecture"]["k"], depth, ocfg, cfg["task"],
                                 None if test is None else test.x, yt, train.n_classes,
                                 Rng(cfg["seed"]).spawn(f"e2e-depth-{depth}"))
        sub = out / f"depth_{depth}"
        sub.mkdir(exist_ok=True)
        _write_epochs_csv(sub / "epochs.csv", history)
        net.meta = {"trainer": "e2e", "seed": cfg["seed"]}
        net.save(sub / "model.json")
        print(f"depth {depth}: final train loss {history[-1]['train_loss']:.6f}, "
              f"train accuracy {history[-1]['train_acc']:.4f}")
    if train.shift is not None:
        _write_json(out / "normalization.json", train.normalization())
    _write_json(out / "resolved_config.json", cfg)
    return 0


def cmd_eval(model_path, cfg, normalization=None):
    net = TrainedResNet.load(model_path)
    cfg = dict(cfg, normalize=False)
    train, test = load_datasets(cfg)
    ds = test if test is not None else train
    norm_path = Path(normalization) if normalization else Path(model_path).parent / "normalization.json"
    if norm_path.exists():
        ds = apply_normalization(ds, json.loads(norm_path.read_text()))
    acc = _accuracy(net, ds)
    y = ds.y_pm1() if net.task == "binary" else ds.y
    mg = margins(net, ds.x, y)
    print(f"examples {ds.m}  accuracy {acc:.6f}")
    print(f"margin min {np.min(mg):.6g}  median {np.median(mg):.6g}  max {np.max(mg):.6g}")
    return 0


def diagnose(run_dir, tol=1e-10):
    """Recompute the per-run checks from rounds.csv; returns (lines, all_ok)."""
    run_dir = Path(run_dir)
    schema, rows = read_rounds_csv(run_dir / "rounds.csv")
    threshold = 0.001
    cfg_path = run_dir / "resolved_config.json"
    if cfg_path.exists():
        threshold = float(json.loads(cfg_path.read_text())["boost"]["gamma_threshold"])
    multiclass = schema == MULTICLASS_SCHEMA
    lines = [f"{'round':>5} {'edge':>9} {'gamma':>9} {'weak-learning':>13} {'cov':>4}"]
    ok = True
    weak_ok = True
    log_prod, sq, prod = 0.0, 0.0, 1.0
    chain_ok = True
    for r in rows:
        passed = r["gamma"] >= threshold
        weak_ok &= passed
        lines.append(f"{r['round']:>5d} {r['edge']:>9.5f} {r['gamma']:>9.5f} "
                     f"{'pass' if passed else 'FAIL':>13} {r['covariance_sign']:>+4d}")
        log_prod += math.log(r["Z"])
        g = r["gamma"]
        sq += g * abs(g)
        prod *= math.sqrt(max(1.0 - g * abs(g), 0.0))
        zp = math.exp(log_prod)
        if abs(zp - r["Z_product"]) > tol * max(1.0, abs(zp)):
            ok = False
            lines.append(f"      recomputed prod Z {zp!r} != stored {r['Z_product']!r}")
        scale = r["exp_loss"] / r["Z_product"] if multiclass and r["Z_product"] > 0 else 1.0
        expo = math.exp(-0.5 * sq)
        link = [r["train_err"], scale * r["Z_product"], scale * prod, scale * expo]
        if not all(link[i] <= link[i + 1] + 1e-12 for i in range(3)):
            chain_ok = False
            lines.append(f"      bound chain broken at round {r['round']}: {link}")
    lines.append(f"weak-learning check (gamma >= {threshold}): {'all pass' if weak_ok else 'some rounds fail'}")
    lines.append(f"bound chain error <= prod Z <= prod sqrt(1-gamma^2) <= exp(-sum gamma^2 / 2): "
                 f"{'holds' if chain_ok else 'VIOLATED'}")
    lines.append(f"stored prod Z matches recomputation within {tol}: {'yes' if ok else 'NO'}")
    signs = [r["covariance_sign"] for r in rows]
    lines.append(f"covariance signs: {sum(s <= 0 for s in signs)} non-positive, "
                 f"{sum(s > 0 for s in signs)} positive")
    return lines, ok and chain_ok


def cmd_diagnose(run_dir):
    lines, _ = diagnose(run_dir)
    print("\n".join(lines))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="boostresnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log each round")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--task", choices=["binary", "multiclass"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("--k", type=int, help="hidden units per block")
        sp.add_argument("--T-max", dest="t_max", type=int, help="number of blocks")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)

    tb = sub.add_parser("train-boost", help="train with telescoping-sum boosting")
    common(tb)
    tb.add_argument("--gamma-threshold", type=float)
    tb.add_argument("--patience", type=int)
    tb.add_argument("--alpha-mode", choices=["exact", "closed-form"])
    te = sub.add_parser("train-e2e", help="train end to end by backprop (depth sweep)")
    common(te)
    te.add_argument("--depths", type=int, nargs="+")
    ev = sub.add_parser("eval", help="evaluate a saved model")
    ev.add_argument("--model", required=True)
    ev.add_argument("--config", help="config naming the dataset (test split if present)")
    ev.add_argument("--normalization", help="normalization.json (default: next to the model)")
    dg = sub.add_parser("diagnose", help="check a boosting run directory")
    dg.add_argument("run_dir")
    return p


def _overrides(args):
    g = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "task": g("task"), "seed": g("seed"), "output_dir": g("output_dir"),
        "architecture.k": g("k"), "architecture.T_max": g("t_max"),
        "oracle.epochs": g("epochs"), "oracle.learning_rate": g("lr"),
        "oracle.batch_size": g("batch_size"),
        "boost.gamma_threshold": g("gamma_threshold"), "boost.patience": g("patience"),
        "boost.alpha_mode": g("alpha_mode"), "e2e.depths": g("depths"),
    }


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            return cmd_diagnose(args.run_dir)
        cfg = load_config(args.config, _overrides(args) if args.command != "eval" else None)
        if args.command == "train-boost":
            return cmd_train_boost(cfg)
        if args.command == "train-e2e":
            return cmd_train_e2e(cfg)
        return cmd_eval(args.model, cfg, args.normalization)
    except (ConfigError, DataFormatError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RoundError as exc:
        print(f"error: {exc}; diagnostics: {exc.diagnostics}", file=sys.stderr)
        return 2
    except (OracleError, NumericalError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

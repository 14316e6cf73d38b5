"""Command-line experiment runner.

Subcommands: make-data, train, grad-check, oracle-check, report.
Exit codes: 0 success, 1 failed check, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gradcheck import grad_check_suite
from .oracle import exact_rl_fit, oracle_suite, random_instance
from .toylang import OptLevel, build_preference_groups, gen_source, read_groups
from .trainer import (
    CSV_FIELDS,
    ConfigError,
    MalformedReport,
    TrainConfig,
    config_dict,
    normalize_mode,
    read_report,
    report_to_csv,
    train,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SEED_ENV = "OORL_SEED"

# dataset used by `train` when --data is not given
BUILTIN_DATA = {"count": 16, "winners": 2, "losers": 3, "seed": 0, "max_operators": 2, "value_bound": 20}


class UsageError(Exception):
    pass


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def make_dataset(count: int, winners: int, losers: int, seed: int, max_operators: int, value_bound: int) -> list:
    exprs = [gen_source([seed, i], max_operators, value_bound) for i in range(count)]
    return build_preference_groups(exprs, winners, losers, seed)


def dataset_text(groups: list) -> str:
    return "".join(g.to_json() + "\n" for g in groups)


# --- make-data -----------------------------------------------------------------------------


def cmd_make_data(args) -> int:
    if not 1 <= args.winners <= len(OptLevel):
        raise UsageError(f"--winners must be between 1 and {len(OptLevel)} (one per optimisation level)")
    if args.losers < 1 or args.count < 1:
        raise UsageError("--losers and --count must be >= 1")
    if args.max_operators < 1 or args.value_bound < 0:
        raise UsageError("--max-operators must be >= 1 and --value-bound >= 0")
    groups = make_dataset(args.count, args.winners, args.losers, args.seed, args.max_operators, args.value_bound)
    try:
        _write_text(args.out, dataset_text(groups))
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    print(f"groups emitted: {len(groups)}")
    print(f"expressions skipped (too few distinct renderings or losers): {args.count - len(groups)}")
    print(f"wrote {args.out}")
    return EXIT_OK


# --- train ---------------------------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_KEY_ALIASES = {"lambda": "lam"}


def _coerce(name: str, raw):
    default = getattr(TrainConfig(), name)
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = raw if isinstance(raw, (list, tuple)) else str(raw).replace(",", " ").split()
            return tuple(float(p) for p in parts)
        return type(default)(raw)
    except (TypeError, ValueError):
        raise UsageError(f"bad value for {name}: {raw!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment.  Keys may use - or _."""
    out: dict = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        key = _KEY_ALIASES.get(key, key)
        if key not in _FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args) -> TrainConfig:
    """Defaults < config file < flags (OORL_SEED is applied to the flags in main)."""
    values = read_config_file(args.config) if args.config else {}
    for name in _FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _coerce(name, flag)
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def _load_data(path) -> tuple:
    if path is None:
        groups = make_dataset(**BUILTIN_DATA)
        text = dataset_text(groups)
        label = "builtin:" + ",".join(f"{k}={v}" for k, v in BUILTIN_DATA.items())
        return groups, text.encode("utf-8"), label
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"missing dataset {path}: {exc.strerror}") from None
    try:
        groups = read_groups(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"unreadable dataset {path}: {exc}") from None
    return groups, raw, str(path)


def build_manifest(cfg: TrainConfig, mode: str, data_label: str, data_bytes: bytes, out: Path, manifest: Path) -> dict:
    return {
        "config": config_dict(cfg),
        "dataset": {"source": data_label, "sha256": hashlib.sha256(data_bytes).hexdigest()},
        "seed": cfg.seed,
        "mode": mode,
        "versions": {"oorl": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {"report": str(out), "manifest": str(manifest)},
    }


def cmd_train(args) -> int:
    mode = normalize_mode(args.mode)
    cfg = resolve_config(args)
    groups, raw, label = _load_data(args.data)
    out = Path(args.out)
    manifest_path = Path(args.manifest) if args.manifest else out.with_suffix(".manifest.json")
    manifest = build_manifest(cfg, mode, label, raw, out, manifest_path)
    try:
        _write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        report = train(cfg, groups, mode=mode)
        _write_text(out, report_to_csv(report))
    except OSError as exc:
        raise UsageError(f"cannot write output: {exc}") from None
    print("summary " + json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


# --- checks --------------------------------------------------------------------------------


def cmd_grad_check(args) -> int:
    results = grad_check_suite(args.instances, args.seed, args.h, args.tol)
    for r in results:
        print(r.line())
    print(f"worst relative error: {max(r.worst for r in results):.3e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_oracle_check(args) -> int:
    if not args.beta > 0:
        raise UsageError("--beta must be positive")
    checks = oracle_suite(args.beta, args.instances, args.seed)
    ok = True
    for c in checks:
        print(c.line())
        ok &= c.passed
    for i in range(args.fit_instances):
        ref, prompt, reward = random_instance(args.seed * 100_003 + i, args.fit_vocab, args.fit_len)
        fit = exact_rl_fit(ref, prompt, reward, args.beta, max_steps=args.fit_steps, tol=args.fit_tol)
        status = "PASS" if fit.converged else "FAIL"
        start = fit.history[0][1]
        print(f"{status} RL fit {i}: TV {start:.3e} -> {fit.tv:.3e} after {fit.steps} steps (tol {args.fit_tol:g})")
        ok &= fit.converged
    return EXIT_OK if ok else EXIT_FAIL


# --- report --------------------------------------------------------------------------------

SERIES_METRICS = CSV_FIELDS[1:]


def _labels(paths: list) -> list:
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [str(p) for p in paths]


def _mean(records: list, name: str) -> float:
    vals = np.array([getattr(r, name) for r in records], dtype=float)
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if len(vals) else float("nan")


def cmd_report(args) -> int:
    runs = []
    for label, path in zip(_labels(args.reports), args.reports):
        try:
            records, summary = read_report(path)
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from None
        except MalformedReport as exc:
            raise UsageError(str(exc)) from None
        runs.append((label, records, summary))

    def sort_key(run):
        rate = run[2].get("success_rate", float("nan"))
        return (-rate if rate == rate else float("inf"), run[0])

    runs.sort(key=sort_key)
    header = ["run", "mode", "steps", "success_rate", "initial_success_rate", "on_policy_loss", "gepo_pref", "gepo_var", "final_wr_var"]
    rows = []
    for label, records, summary in runs:
        final_var = records[-1].winner_ratio_variance if records else float("nan")
        rows.append(
            [
                label,
                summary.get("mode", "?"),
                str(len(records)),
                f"{summary.get('success_rate', float('nan')):.4f}",
                f"{summary.get('initial_success_rate', float('nan')):.4f}",
                f"{_mean(records, 'on_policy_loss'):.4f}",
                f"{_mean(records, 'gepo_pref'):.4f}",
                f"{_mean(records, 'gepo_var'):.4f}",
                f"{final_var:.4f}",
            ]
        )
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    for r in [header] + rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())

    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for metric in SERIES_METRICS:
            with open(out_dir / f"series_{metric}.csv", "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["run", "step", metric])
                for label, records, _ in runs:
                    for r in records:
                        writer.writerow([label, r.step, repr(float(getattr(r, metric)))])
    except OSError as exc:
        raise UsageError(f"cannot write series files: {exc}") from None
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(TrainConfig(), f.name)
        if isinstance(default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            p.add_argument(flag, dest=f.name, nargs=len(default), type=float, default=None, metavar="X")
        elif f.name == "lam":
            p.add_argument("--lambda", "--lam", dest="lam", type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=type(default), default=None, help=f"default {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oorl", description="OORL toy-scale experiment runner")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate a preference-group dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--winners", type=int, default=2)
    p.add_argument("--losers", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-operators", type=int, default=2)
    p.add_argument("--value-bound", type=int, default=20)
    p.add_argument("--out", default="groups.jsonl")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a tabular policy in one ablation mode")
    p.add_argument("--mode", default="oorl", help="onpolicy, dpo, gepo or oorl")
    p.add_argument("--data", default=None, help="dataset from make-data (default: small built-in set)")
    p.add_argument("--out", default="run.csv")
    p.add_argument("--manifest", default=None, help="default: <out>.manifest.json")
    p.add_argument("--config", default=None, help="file of 'key = value' lines")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("oracle-check", help="exact-enumeration checks of the optimal policy")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fit-instances", type=int, default=1)
    p.add_argument("--fit-vocab", type=int, default=4)
    p.add_argument("--fit-len", type=int, default=4)
    p.add_argument("--fit-steps", type=int, default=5000)
    p.add_argument("--fit-tol", type=float, default=0.05)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("report", help="compare train runs and write plot series")
    p.add_argument("reports", nargs="+", help="CSV files written by train")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        env_seed = os.environ.get(SEED_ENV, "").strip()
        if env_seed and hasattr(args, "seed"):
            try:
                args.seed = int(env_seed)
            except ValueError:
                raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

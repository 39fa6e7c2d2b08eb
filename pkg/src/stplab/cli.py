"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

from .config import ConfigParseError, TrainConfig, apply_overrides, parse_config
from .data import dump_split
from .experiments import data_efficiency_experiment, diagnose, summarize, sweep_lambda
from .model import load_checkpoint
from .theory import TheoryQuery, paired_t_test_one_tailed, theory_table
from .train import build_split, evaluate_exact_match, p1_check, train_run

log = logging.getLogger("stplab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--lambda", dest="lam", help="auxiliary loss weight")
    p.add_argument("--variant")
    p.add_argument("--seed")
    p.add_argument("--epochs")
    p.add_argument("--out", help="output directory")


def _load_config(args) -> TrainConfig:
    cfg = parse_config(args.config) if args.config else TrainConfig()
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise ConfigParseError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append(tuple(item.split("=", 1)))
    for key, attr in (("lambda", "lam"), ("variant", "variant"), ("seed", "seed"),
                      ("epochs", "epochs"), ("out_dir", "out")):
        value = getattr(args, attr, None)
        if value is not None:
            pairs.append((key, value))
    return apply_overrides(cfg, pairs, "flag")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stplab", description="Tube-loss training and diagnostics lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    _add_config_args(p)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="lambda sweep over seeds")
    _add_config_args(p)
    p.add_argument("--grid", default="0,0.005,0.02,0.08,0.32")
    p.add_argument("--seeds")

    p = sub.add_parser("data-eff", help="data-fraction grid, baseline vs tube loss")
    _add_config_args(p)
    p.add_argument("--fractions", default="1,2,4", help="divisors n for 1/n of the data")
    p.add_argument("--seeds")
    p.add_argument("--half-compute", action="store_true")

    p = sub.add_parser("diagnose", help="geometry diagnostics CSV for a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv", required=True, dest="csv_path")
    p.add_argument("--tau", type=int, default=8)
    p.add_argument("--n-sequences", type=int, default=50)
    p.add_argument("--no-rollout", action="store_true")

    p = sub.add_parser("theory", help="table of information-theoretic bounds")
    p.add_argument("--H", type=float, default=4.0, help="target entropy H(Y) in bits")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--snr", default="0,1,3,15")
    p.add_argument("--m", default="1,2,4")
    p.add_argument("--vocab", type=int, default=17)
    p.add_argument("--csv", dest="csv_path")

    p = sub.add_parser("ttest", help="one-tailed paired t-test of a > b")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)

    p = sub.add_parser("gen-data", help="write train/test splits as text")
    _add_config_args(p)
    return parser


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    rec = train_run(cfg)
    print(f"steps={rec.total_steps} final_ntp={rec.final_ntp:.4f} final_stp={rec.final_stp:.4f} "
          f"accuracy={rec.accuracy:.4f} acc_star={rec.acc_star:.4f} "
          f"acc_starstar={rec.acc_starstar:.4f} time={rec.wall_time:.1f}s")
    try:
        holds, ntp_range, stp_drop = p1_check(rec, cfg.p1_ntp_range, cfg.p1_stp_drop)
        print(f"final-quarter ntp_range={ntp_range:.4f} stp_drop={stp_drop:.4f} plateau_check={holds}")
    except ValueError as exc:
        print(f"plateau check skipped: {exc}")
    if rec.checkpoint:
        print(f"checkpoint: {rec.checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    params, mcfg = load_checkpoint(args.checkpoint)
    acc, per = evaluate_exact_match(params, mcfg, build_split(cfg).test, cfg.eval_batch)
    extra = " ".join(f"{k}={v:.4f}" for k, v in per.items())
    print(f"accuracy={acc:.4f} {extra}".rstrip())
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    seeds = _ints(args.seeds) if args.seeds else None
    res = sweep_lambda(cfg, _floats(args.grid), seeds, cfg.out_dir)
    print("lambda  accuracy            final_stp           final_ntp")
    for lam in res.accuracy:
        sel = [r for r in res.records if r.config.lam == lam]
        print(f"{lam:<7g} {summarize([r.accuracy for r in sel]):<19} "
              f"{summarize([r.final_stp for r in sel]):<19} {summarize([r.final_ntp for r in sel])}")
    return 0


def _cmd_data_eff(args) -> int:
    cfg = _load_config(args)
    seeds = _ints(args.seeds) if args.seeds else None
    res = data_efficiency_experiment(cfg, _ints(args.fractions), seeds=seeds,
                                     half_compute=args.half_compute, out_dir=cfg.out_dir)
    for n, per in res.accuracy.items():
        cells = "  ".join(f"{k}: {m:.4f} +- {s:.4f}" for k, (m, s) in per.items())
        tt = res.ttests[n]
        p = "n/a" if tt is None else f"t={tt[0]:.3f} p={tt[2]:.4g}"
        print(f"1/{n}: {cells}  [{p}]")
    return 0


def _cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    params, mcfg = load_checkpoint(args.checkpoint)
    rows = diagnose(params, mcfg, build_split(cfg).test, tau=args.tau,
                    n_sequences=args.n_sequences, rollout=not args.no_rollout,
                    out_csv=args.csv_path)
    eps = [v for _, metric, _, v in rows if metric == "linearity_epsilon"]
    print(f"wrote {len(rows)} rows to {args.csv_path}; mean epsilon_hat={sum(eps) / len(eps):.4f}")
    return 0


def _cmd_theory(args) -> int:
    queries = [TheoryQuery(args.H, args.epsilon, snr, m, args.vocab)
               for snr in _floats(args.snr) for m in _floats(args.m)]
    rows = theory_table(queries)
    keys = list(rows[0])
    print(" ".join(f"{k:>15}" for k in keys))
    for row in rows:
        print(" ".join(f"{row[k]:>15.6g}" if isinstance(row[k], float) else f"{row[k]:>15}" for k in keys))
    if args.csv_path:
        with open(args.csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


def _cmd_ttest(args) -> int:
    t, df, p = paired_t_test_one_tailed(_floats(args.a), _floats(args.b))
    print(f"t={t:.6f} df={df} p={p:.6g}")
    return 0


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if not cfg.out_dir:
        raise UsageError("gen-data needs --out")
    train, test = dump_split(build_split(cfg), cfg.out_dir)
    print(f"wrote {train} and {test}")
    return 0


COMMANDS = {
    "train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep, "data-eff": _cmd_data_eff,
    "diagnose": _cmd_diagnose, "theory": _cmd_theory, "ttest": _cmd_ttest,
    "gen-data": _cmd_gen_data,
}


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())

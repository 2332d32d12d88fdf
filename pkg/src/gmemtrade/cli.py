"""Command-line driver: encode, train, eval, bench, gradcheck, synth, oracle.

Exit codes: 0 success, 1 invalid configuration or failed check, 2 runtime failure.
Every artifact embeds the resolved configuration and root seed.
"""
from __future__ import annotations

import argparse
import csv
import sys
import traceback
from pathlib import Path

from . import __version__
from .bench import (
    ConfigError, RunConfig, build_features, dumps, encoder_from_header, fit_encoder, load_config,
    load_series, model_from_header, run_bench, test_cell, train_cell,
)
from .env import (
    Action, DataError, EnvConfig, gen_synthetic, load_csv, max_normalize, oracle_profit,
    write_csv, write_episode_log,
)
from .gradcheck import GRADCHECK_TOL, KINDS as GRADCHECK_KINDS, run_gradcheck
from .numerics import load_snapshot, save_snapshot
from .training import write_jsonl

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class CheckFailed(RuntimeError):
    pass


def _provenance(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "version": __version__, "seed": cfg.seed, "config": cfg.to_json()}


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("model", "model"),
                      ("encoder", "encoder_path"), ("policy", "policy_path")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    if getattr(args, "series", None):
        overrides.append("series=" + ",".join(args.series))
    cfg = load_config(args.config, overrides)
    errs = cfg.validate()
    if errs:
        raise ConfigError(errs)
    return cfg


def _single_series(cfg: RunConfig):
    series = load_series(cfg)
    if len(series) != 1:
        raise ConfigError([f"series: this command needs exactly one series, got {len(series)}"])
    return series[0]


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_encode(args) -> int:
    cfg = _resolve(args)
    series = _single_series(cfg)
    enc, trace = fit_encoder(series, cfg)
    out = _out(cfg)
    save_snapshot(out / "encoder.json", enc.params,
                  {**enc.header(), "series": series.name, **_provenance(cfg, "encode")})
    with (out / "encoder_loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    print(f"encoder -> {out / 'encoder.json'} ({len(trace)} epochs, final loss {trace[-1] if trace else float('nan'):.17g})")
    return EXIT_OK


def _load_encoder(cfg: RunConfig):
    if cfg.encoder_path is None:
        raise ConfigError(["encoder_path: required (run `encode` first)"])
    store, header = load_snapshot(cfg.encoder_path)
    enc = encoder_from_header(header, store)
    if enc.cfg.window_len != cfg.window.window_len:
        raise ConfigError([f"encoder_path: encoder window_len {enc.cfg.window_len} != "
                           f"window.window_len {cfg.window.window_len}"])
    return enc


def cmd_train(args) -> int:
    cfg = _resolve(args)
    series = _single_series(cfg)
    enc = _load_encoder(cfg)
    model, res, feats, _ = train_cell(series, cfg.model, cfg, enc)
    out = _out(cfg)
    header = {**model.header(), "series": series.name, "features": feats.transform_json(),
              "best_restart": res.best.restart, **_provenance(cfg, "train")}
    save_snapshot(out / "policy.json", res.params, header)
    write_jsonl(res.log, out / "train_log.jsonl")
    (out / "restarts.json").write_text(dumps([
        {"restart": r.restart, "aborted": r.aborted, "steps": r.steps, "updates": r.updates,
         "validation": r.validation.to_json() if r.validation else None} for r in res.restarts]))
    print(f"policy -> {out / 'policy.json'} (best restart {res.best.restart})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    series = _single_series(cfg)
    enc = _load_encoder(cfg)
    if cfg.policy_path is None:
        raise ConfigError(["policy_path: required (run `train` first)"])
    store, header = load_snapshot(cfg.policy_path)
    model = model_from_header(header, store)
    feats = build_features(enc, series, cfg, header.get("features"))
    logs: list = []
    rep, orc = test_cell(model, store, series, feats, cfg, logs)
    out = _out(cfg)
    report = {**rep.to_json(), "oracle_profit": orc, "series": series.name, "model": model.kind,
              **_provenance(cfg, "eval")}
    (out / "eval_report.json").write_text(dumps(report))
    if logs:
        write_episode_log(logs[0], out / "episode_log.jsonl")
    print(dumps(rep.to_json()), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    if not cfg.series and not cfg.synthetic:
        raise ConfigError(["series/synthetic: bench needs at least one series"])
    rep = run_bench(cfg)
    out = _out(cfg)
    payload = {**rep.to_json(), **_provenance(cfg, "bench")}
    (out / "bench.json").write_text(dumps(payload))
    (out / "bench.txt").write_text(rep.table())
    print(rep.table(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = run_gradcheck(args.model, args.seed, corrupt=args.corrupt)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{'PASS' if err < GRADCHECK_TOL else 'FAIL'}  {name:<12s} {err:.17g}")
    if worst >= GRADCHECK_TOL:
        bad = [k for k, v in errors.items() if v >= GRADCHECK_TOL]
        raise CheckFailed(f"gradient check failed for {', '.join(bad)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.order < 1 or args.length < 2 or args.amplitude <= 0:
        raise ConfigError(["order must be >= 1, length >= 2 and amplitude > 0"])
    series = max_normalize(gen_synthetic(args.order, args.length, args.amplitude, args.seed))
    write_csv(series, args.out)
    print(f"{series.name}: {len(series)} days -> {args.out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    series = load_csv(args.series)
    if args.normalize:
        series = max_normalize(series)
    overrides = {k: v for k, v in (("task", args.task), ("lot_size", args.lot_size),
                                   ("transaction_cost", args.fee), ("initial_cash", args.cash),
                                   ("max_holdings", args.max_holdings),
                                   ("window_len", args.window_len)) if v is not None}
    cfg = EnvConfig(**overrides)
    start = args.start if args.start is not None else cfg.window_len
    cfg.horizon = args.horizon if args.horizon is not None else len(series) - start
    errs = cfg.validate()
    if start < cfg.window_len or start + cfg.horizon > len(series):
        errs.append(f"start {start} + horizon {cfg.horizon} must fit in {len(series)} days "
                    f"after a {cfg.window_len}-day window")
    if errs:
        raise ConfigError(errs)
    res = oracle_profit(series, cfg, start)
    acts = [Action(a).name for a in res.actions]
    out = {"optimum": res.profit, "actions": acts, "series": series.name, "start": start,
           "env": dict(vars(cfg))}
    text = dumps(out)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmemtrade", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(sp):
        sp.add_argument("-c", "--config", help="JSON run config; flags override it")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field, e.g. train.episodes=50 (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--series", nargs="+", help="series CSV path(s)")

    sp = sub.add_parser("encode", help="pretrain the window encoder on the training days")
    run_args(sp)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("train", help="train a Q-network with restarts")
    run_args(sp)
    sp.add_argument("--model")
    sp.add_argument("--encoder", help="encoder snapshot from `encode`")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="roll a trained policy out on the test days")
    run_args(sp)
    sp.add_argument("--encoder")
    sp.add_argument("--policy", help="policy snapshot from `train`")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="train and test every (series, model) pair")
    run_args(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a model's gradients")
    sp.add_argument("--model", default="gmemn2n", choices=GRADCHECK_KINDS)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--corrupt", metavar="TENSOR", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write a parity-rule synthetic series")
    sp.add_argument("--order", type=int, required=True)
    sp.add_argument("--length", type=int, default=300)
    sp.add_argument("--amplitude", type=float, default=0.005)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("oracle", help="exact optimal terminal reward by dynamic programming")
    sp.add_argument("--series", required=True)
    sp.add_argument("--task", choices=("trading", "exec-sell"))
    sp.add_argument("--start", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--window-len", type=int)
    sp.add_argument("--lot-size", type=int)
    sp.add_argument("--fee", type=float)
    sp.add_argument("--cash", type=float)
    sp.add_argument("--max-holdings", type=int)
    sp.add_argument("--normalize", action="store_true", help="max-normalize before solving")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

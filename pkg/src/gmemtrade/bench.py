"""Experiment plumbing: run configs, model factory, single (series, model) cells and benches.

A cell is the full protocol on one series: pretrain the encoder on the
training window, encode the whole series, train the Q-network with restarts,
then roll it out on the days that follow the training window.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import FCNNConfig, FCNNPolicy, LSTMConfig, LSTMPolicy
from .encoder import Encoder, WindowConfig, train_encoder
from .env import EnvConfig, PriceSeries, TradingEnv, gen_synthetic, load_csv, max_normalize, oracle_profit
from .numerics import ParamStore, make_rng
from .policy import GMemConfig, GMemPolicy
from .training import EvalReport, FeatureSeries, TrainConfig, Trainer, TrainResult, evaluate

MODEL_KINDS = ("gmemn2n", "memn2n", "lstm", "fcnn")
REPORT_FORMAT = "gmemtrade-bench/1"
REPORT_COLUMNS = ("ratio_mean", "ratio_std", "budget_mean", "budget_std")


class ConfigError(ValueError):
    """Invalid run configuration; ``errors`` lists every violated field."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SyntheticSpec:
    order_k: int = 2
    length: int = 300
    amplitude: float = 0.005
    seed: int = 0


@dataclass
class RunConfig:
    window: WindowConfig = field(default_factory=WindowConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: str = "gmemn2n"
    models: list[str] = field(default_factory=lambda: ["gmemn2n", "fcnn"])
    series: list[str] = field(default_factory=list)
    synthetic: list[SyntheticSpec] = field(default_factory=list)
    encoder_epochs: int = 200
    encoder_lr: float = 0.01
    train_days: int = 200
    train_horizon: int | None = None
    eval_rollouts: int = 100
    standardize: bool = False
    encoder_path: str | None = None
    policy_path: str | None = None
    out_dir: str = "runs"
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def validate(self, need_files: bool = True) -> list[str]:
        errs = [f"window.{e}" for e in self.window.validate()]
        errs += [f"env.{e}" for e in self.env.validate()]
        errs += [f"train.{e}" for e in self.train.validate()]
        if self.env.window_len != self.window.window_len:
            errs.append("env.window_len must equal window.window_len")
        for m in [self.model, *self.models]:
            if m not in MODEL_KINDS:
                errs.append(f"model {m!r} is not one of {', '.join(MODEL_KINDS)}")
        if self.encoder_epochs < 0:
            errs.append("encoder_epochs must be >= 0")
        if self.encoder_lr < 0:
            errs.append("encoder_lr must be >= 0")
        if self.train_days < 2 * self.window.window_len:
            errs.append("train_days must be >= 2 * window_len")
        if self.train_horizon is not None and self.train_horizon < 1:
            errs.append("train_horizon must be >= 1")
        if self.eval_rollouts < 1:
            errs.append("eval_rollouts must be >= 1")
        for i, syn in enumerate(self.synthetic):
            if syn.order_k < 1:
                errs.append(f"synthetic[{i}].order_k must be >= 1")
            if syn.length <= self.train_days:
                errs.append(f"synthetic[{i}].length must exceed train_days")
            if syn.amplitude <= 0:
                errs.append(f"synthetic[{i}].amplitude must be > 0")
        if need_files:
            for key in ("encoder_path", "policy_path"):
                p = getattr(self, key)
                if p is not None and not Path(p).is_file():
                    errs.append(f"{key}: no such file {p}")
            for p in self.series:
                if not Path(p).is_file():
                    errs.append(f"series: no such file {p}")
            out = Path(self.out_dir)
            probe = out if out.exists() else out.parent if str(out.parent) else Path(".")
            while not probe.exists() and probe != probe.parent:
                probe = probe.parent
            if (out.exists() and not out.is_dir()) or not os.access(probe, os.W_OK):
                errs.append(f"out_dir: {self.out_dir} is not writable")
        return errs

    def train_cfg(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)


_SECTIONS = {"window": WindowConfig, "env": EnvConfig, "train": TrainConfig}


def _coerce(value: str, like):
    # flag values arrive as text; follow the type of the field's current value
    if isinstance(like, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {value!r}")
        return low in ("true", "1")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if like is None:
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            return value
    if isinstance(like, list):
        return [v for v in value.split(",") if v]
    return value


def config_from_dict(raw: dict, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from a nested dict plus ``section.key=value`` overrides (overrides win)."""
    errs = []
    raw = json.loads(json.dumps(raw))
    for item in overrides or []:
        key, sep, val = item.partition("=")
        if not sep:
            errs.append(f"override {item!r} is not of the form key=value")
            continue
        path = key.strip().split(".")
        tgt = raw
        for part in path[:-1]:
            tgt = tgt.setdefault(part, {})
        tgt[path[-1]] = ("__raw__", val)
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.pop(name, {}) or {}
        known = {f.name for f in dataclasses.fields(cls)}
        for k in sorted(set(sub) - known):
            errs.append(f"{name}.{k}: unknown field")
        defaults = cls() if cls is not EnvConfig else EnvConfig(task=_plain(sub.get("task", "trading")))
        kw = {}
        for k in sorted(set(sub) & known):
            v = sub[k]
            if isinstance(v, tuple) and v and v[0] == "__raw__":
                try:
                    v = _coerce(v[1], getattr(defaults, k))
                except ValueError as exc:
                    errs.append(f"{name}.{k}: {exc}")
                    continue
            kw[k] = v
        try:
            sections[name] = cls(**kw)
        except (TypeError, ValueError) as exc:
            errs.append(f"{name}: {exc}")
    top = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    defaults = RunConfig()
    kw = {}
    for k in sorted(raw):
        if k not in top:
            errs.append(f"{k}: unknown field")
            continue
        v = raw[k]
        if isinstance(v, tuple) and v and v[0] == "__raw__":
            try:
                v = _coerce(v[1], getattr(defaults, k))
            except ValueError as exc:
                errs.append(f"{k}: {exc}")
                continue
        kw[k] = v
    if "synthetic" in kw:
        try:
            kw["synthetic"] = [s if isinstance(s, SyntheticSpec) else SyntheticSpec(**s) for s in kw["synthetic"]]
        except TypeError as exc:
            errs.append(f"synthetic: {exc}")
            kw.pop("synthetic")
    if errs:
        raise ConfigError(errs)
    cfg = RunConfig(**sections, **kw)
    return cfg


def _plain(v):
    return v[1] if isinstance(v, tuple) and v and v[0] == "__raw__" else v


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config: no such file {p}"])
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config: {p}:{exc.lineno}: {exc.msg}"]) from None
    return config_from_dict(raw, overrides)


# ---------------------------------------------------------------------------
# models


def make_model(kind: str, obs_dim: int, n_actions: int, seed: int, max_mem: int = 256):
    if kind in ("gmemn2n", "memn2n"):
        return GMemPolicy(GMemConfig(obs_dim=obs_dim, n_actions=n_actions, gated=kind == "gmemn2n",
                                     max_mem=max_mem), seed)
    if kind == "fcnn":
        return FCNNPolicy(FCNNConfig(obs_dim=obs_dim, n_actions=n_actions), seed)
    if kind == "lstm":
        return LSTMPolicy(LSTMConfig(obs_dim=obs_dim, n_actions=n_actions), seed)
    raise ValueError(f"unknown model kind {kind!r}")


def model_from_header(header: dict, params: ParamStore):
    kind = header["kind"]
    if kind in ("gmemn2n", "memn2n"):
        fields_ = {f.name for f in dataclasses.fields(GMemConfig)}
        return GMemPolicy(GMemConfig(**{k: v for k, v in header.items() if k in fields_}), params=params)
    if kind == "fcnn":
        fields_ = {f.name for f in dataclasses.fields(FCNNConfig)}
        return FCNNPolicy(FCNNConfig(**{k: v for k, v in header.items() if k in fields_}), params=params)
    if kind == "lstm":
        fields_ = {f.name for f in dataclasses.fields(LSTMConfig)}
        return LSTMPolicy(LSTMConfig(**{k: v for k, v in header.items() if k in fields_}), params=params)
    raise ValueError(f"unknown model kind {kind!r}")


def encoder_from_header(header: dict, params: ParamStore) -> Encoder:
    fields_ = {f.name for f in dataclasses.fields(WindowConfig)}
    return Encoder(WindowConfig(**{k: v for k, v in header.items() if k in fields_}), params=params)


# ---------------------------------------------------------------------------
# data and features


def load_series(cfg: RunConfig) -> list[PriceSeries]:
    out = [max_normalize(load_csv(p)) for p in cfg.series]
    out += [max_normalize(gen_synthetic(s.order_k, s.length, s.amplitude, s.seed)) for s in cfg.synthetic]
    return out


def fit_encoder(series: PriceSeries, cfg: RunConfig) -> tuple[Encoder, list[float]]:
    train = series.opens[: cfg.train_days]
    return train_encoder(train, cfg.window, epochs=cfg.encoder_epochs, lr=cfg.encoder_lr, seed=cfg.seed)


def build_features(encoder: Encoder, series: PriceSeries, cfg: RunConfig,
                   transform: dict | None = None) -> FeatureSeries:
    L = cfg.window.window_len
    phi = encoder.encode_series(series.opens)
    if transform is not None:
        return FeatureSeries(phi, L, transform.get("shift"), transform.get("scale"))
    if cfg.standardize:
        # statistics from windows that end inside the training days only
        return FeatureSeries.standardized(phi, L, cfg.train_days - L + 1)
    return FeatureSeries(phi, L)


def train_env_config(cfg: RunConfig) -> EnvConfig:
    fit_days = cfg.train_days - int(round(cfg.train_days * cfg.train.validation_frac))
    horizon = cfg.train_horizon if cfg.train_horizon is not None else fit_days - cfg.window.window_len
    return dataclasses.replace(cfg.env, horizon=horizon)


def test_env_config(cfg: RunConfig, series: PriceSeries) -> EnvConfig:
    horizon = min(cfg.env.horizon, len(series) - cfg.train_days)
    if horizon < 1:
        raise ValueError(f"series {series.name} has no days after the training window")
    return dataclasses.replace(cfg.env, horizon=horizon)


# ---------------------------------------------------------------------------
# cells


@dataclass
class CellResult:
    series: str
    model: str
    report: EvalReport
    oracle: float
    train: TrainResult
    header: dict
    transform: dict | None
    seconds: float
    test_logs: list = field(default_factory=list)

    def row(self) -> dict:
        return {"series": self.series, "model": self.model, **self.report.to_json(),
                "oracle_profit": self.oracle}


def train_cell(series: PriceSeries, kind: str, cfg: RunConfig, encoder: Encoder | None = None):
    """Train one model on the first ``train_days`` of ``series``; returns (model, result, feats, encoder)."""
    if encoder is None:
        encoder, _ = fit_encoder(series, cfg)
    feats = build_features(encoder, series, cfg)
    env_cfg = train_env_config(cfg)
    n_act = len(env_cfg.actions)
    max_mem = max(256, 2 * max(env_cfg.horizon, cfg.env.horizon))
    factory = lambda s: make_model(kind, encoder.dim, n_act, s, max_mem)  # noqa: E731
    trainer = Trainer(factory, series, feats, env_cfg, cfg.train_cfg(), train_end=cfg.train_days)
    res = trainer.train()
    model = factory(0)
    model.params = res.params
    return model, res, feats, encoder


def test_cell(model, params: ParamStore, series: PriceSeries, feats: FeatureSeries, cfg: RunConfig,
              logs: list | None = None) -> tuple[EvalReport, float]:
    env_cfg = test_env_config(cfg, series)
    env = TradingEnv(env_cfg, series)
    seed = int(make_rng(cfg.seed, f"test/{series.name}/{model.kind}").integers(2**31))
    rep = evaluate(model, params, env, feats, cfg.train_days, cfg.eval_rollouts,
                   cfg.train.eval_temperature, seed, logs)
    return rep, oracle_profit(series, env_cfg, cfg.train_days).profit


def run_cell(series: PriceSeries, kind: str, cfg: RunConfig, encoder: Encoder | None = None,
             keep_logs: bool = False) -> CellResult:
    t0 = time.perf_counter()
    model, res, feats, encoder = train_cell(series, kind, cfg, encoder)
    logs = [] if keep_logs else None
    rep, orc = test_cell(model, res.params, series, feats, cfg, logs)
    return CellResult(series.name, kind, rep, orc, res, model.header(), feats.transform_json(),
                      time.perf_counter() - t0, logs or [])


# ---------------------------------------------------------------------------
# bench reports


@dataclass
class BenchReport:
    rows: list[dict]
    config: dict
    seed: int

    def to_json(self) -> dict:
        return {"format": REPORT_FORMAT, "seed": self.seed, "config": self.config,
                "columns": list(REPORT_COLUMNS), "rows": self.rows}

    def table(self) -> str:
        """Aligned text table: ratio and budget as mean ± std per (series, model)."""
        head = ["series", "model", "ratio", "budget"]
        body = [[r["series"], r["model"],
                 f"{r['ratio_mean']:.17g} ± {r['ratio_std']:.17g}",
                 f"{r['budget_mean']:.17g} ± {r['budget_std']:.17g}"] for r in self.rows]
        widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def run_bench(cfg: RunConfig) -> BenchReport:
    rows = []
    for series in load_series(cfg):
        encoder, _ = fit_encoder(series, cfg)
        for kind in cfg.models:
            rows.append(run_cell(series, kind, cfg, encoder).row())
    return BenchReport(rows, cfg.to_json(), cfg.seed)


def dumps(obj) -> str:
    """JSON with shortest round-trip float repr (at most 17 significant digits)."""
    def fix(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: fix(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [fix(v) for v in o]
        if isinstance(o, np.generic):
            return o.item()
        return o
    return json.dumps(fix(obj), indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# memory-necessity benchmark


MEMORY_BENCH_DEFAULTS = {
    "window": {"window_len": 1},
    "env": {"window_len": 1, "transaction_cost": 0.001, "horizon": 100, "initial_cash": 1.0},
    "train": {"restarts": 20, "episodes": 400, "eval_temperature": 0.0, "val_rollouts": 1,
              "reward_scale": 100.0, "linear_start_epochs": 0},
    "synthetic": [{"order_k": 2, "length": 300, "amplitude": 0.005, "seed": 0}],
    "models": ["gmemn2n", "fcnn"],
    "train_days": 200,
    "train_horizon": 20,
    "eval_rollouts": 1,
    "standardize": True,
    "encoder_epochs": 100,
}


def memory_bench_config(overrides: list[str] | None = None) -> RunConfig:
    """Order-2 parity series seen through one-price windows: only memory can recover the phase."""
    return config_from_dict(MEMORY_BENCH_DEFAULTS, overrides)


@dataclass
class MemoryBenchResult:
    oracle: float
    rewards: dict[str, float]
    restart_rewards: dict[str, list[float]]
    seconds: dict[str, float]
    cells: dict[str, CellResult] = field(repr=False, default_factory=dict)

    def checks(self, memory: str = "gmemn2n", baseline: str = "fcnn") -> dict[str, bool]:
        if memory not in self.rewards or baseline not in self.rewards:
            return {}
        g, f, o = self.rewards[memory], self.rewards[baseline], self.oracle
        return {
            f"{memory} >= 0.9 oracle": g >= 0.9 * o,
            f"{memory} > {baseline}": g > f,
            f"{baseline} < 0.5 oracle": f < 0.5 * o,
        }

    def to_json(self) -> dict:
        return {"oracle": self.oracle, "rewards": self.rewards, "restart_rewards": self.restart_rewards,
                "seconds": self.seconds, "checks": self.checks()}


def run_memory_bench(cfg: RunConfig) -> MemoryBenchResult:
    """Train every model in ``cfg.models`` on the first series and score its greedy test rollout.

    The reported reward is that of the restart picked on validation data;
    every restart's test reward is kept too, for diagnosis only.
    """
    series = load_series(cfg)[0]
    encoder, _ = fit_encoder(series, cfg)
    rewards, per_restart, seconds, cells = {}, {}, {}, {}
    oracle = None
    for kind in cfg.models:
        cell = run_cell(series, kind, cfg, encoder)
        oracle = cell.oracle
        rewards[kind] = cell.report.reward_mean
        feats = build_features(encoder, series, cfg)
        per_restart[kind] = []
        for r in cell.train.restarts:
            model = model_from_header(cell.header, r.params)
            per_restart[kind].append(test_cell(model, r.params, series, feats, cfg)[0].reward_mean)
        seconds[kind] = cell.seconds
        cells[kind] = cell
    return MemoryBenchResult(oracle, rewards, per_restart, seconds, cells)

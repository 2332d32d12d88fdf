"""Market-replay trading environment, price data helpers and the DP profit oracle.

Time convention for an episode started at ``start`` with window length ``L``:
step ``t`` (0 <= t < horizon) observes ``opens[start+t-L : start+t]`` and trades
at the last observed price ``opens[start+t-1]``. After the final step the
portfolio is marked to market at ``opens[start+horizon-1]``.
"""
from __future__ import annotations

import csv
import datetime as _dt
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import make_rng


class Action(IntEnum):
    BUY = 0
    HOLD = 1
    SELL = 2


TASK_ACTIONS = {
    "trading": (Action.BUY, Action.HOLD, Action.SELL),
    "exec-sell": (Action.HOLD, Action.SELL),
}


class DataError(ValueError):
    pass


class EnvError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# price series


@dataclass
class PriceSeries:
    name: str
    dates: list[str]
    opens: np.ndarray

    def __post_init__(self):
        self.opens = np.asarray(self.opens, dtype=np.float64)
        if len(self.dates) != len(self.opens):
            raise DataError("dates and opens differ in length")

    def __len__(self) -> int:
        return len(self.opens)

    def slice(self, lo: int, hi: int) -> "PriceSeries":
        return PriceSeries(self.name, self.dates[lo:hi], self.opens[lo:hi].copy())


def load_csv(path: str | Path, name: str | None = None) -> PriceSeries:
    """Read a ``date,open`` CSV with ISO dates in strictly increasing order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    dates: list[str] = []
    opens: list[float] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["date", "open"]:
            raise DataError(f"{path}:1: expected header 'date,open', got {header!r}")
        prev = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                day = _dt.date.fromisoformat(row[0].strip())
                price = float(row[1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(price) or price <= 0:
                raise DataError(f"{path}:{lineno}: open must be positive and finite, got {row[1]!r}")
            if prev is not None and day <= prev:
                raise DataError(f"{path}:{lineno}: date {day} is not after {prev}")
            prev = day
            dates.append(day.isoformat())
            opens.append(price)
    if not opens:
        raise DataError(f"{path}: no data rows")
    return PriceSeries(name or path.stem, dates, np.array(opens))


def write_csv(series: PriceSeries, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "open"])
        for d, p in zip(series.dates, series.opens):
            w.writerow([d, repr(float(p))])


def max_normalize(series: PriceSeries) -> PriceSeries:
    if len(series) == 0:
        raise DataError("cannot normalize an empty series")
    if np.any(series.opens <= 0):
        raise DataError("prices must be positive")
    return PriceSeries(series.name, list(series.dates), series.opens / np.max(series.opens))


def _directions(order_k: int, n_moves: int, phase: int) -> np.ndarray:
    # up (1) iff the number of ups among the last k moves is even
    hist = [0] * order_k
    out = []
    for i in range(phase + n_moves):
        nxt = 1 if sum(hist[-order_k:]) % 2 == 0 else 0
        hist.append(nxt)
        if i >= phase:
            out.append(nxt)
    return np.array(out, dtype=np.int64)


def gen_synthetic(order_k: int, length: int, amplitude: float = 0.005, seed: int = 0,
                  start_price: float = 1.0) -> PriceSeries:
    """Series whose move direction is fixed by the parity of the last ``order_k`` moves.

    Every move has size ``amplitude``. The seed only picks the phase inside
    the generator's cycle.
    """
    if order_k < 1:
        raise ValueError("order_k must be >= 1")
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = make_rng(seed, f"synthetic/phase/{order_k}")
    phase = int(rng.integers(0, 4 * order_k + 4))
    dirs = _directions(order_k, length - 1, phase)
    steps = np.where(dirs == 1, amplitude, -amplitude)
    prices = start_price + np.concatenate([[0.0], np.cumsum(steps)])
    if np.any(prices <= 0):
        raise ValueError("series goes non-positive; lower amplitude or raise start_price")
    base = _dt.date(2000, 1, 3)
    dates = [(base + _dt.timedelta(days=i)).isoformat() for i in range(length)]
    return PriceSeries(f"synthetic-k{order_k}-s{seed}", dates, prices)


def move_directions(series: PriceSeries) -> np.ndarray:
    return (np.diff(series.opens) > 0).astype(np.int64)


# ---------------------------------------------------------------------------
# environment


@dataclass
class EnvConfig:
    task: str = "trading"
    lot_size: int = 1
    transaction_cost: float = 0.001
    horizon: int | None = None
    initial_cash: float = 50.0
    initial_holdings: int | None = None
    max_holdings: int = 50
    window_len: int = 10

    def __post_init__(self):
        if self.task not in TASK_ACTIONS:
            raise ValueError(f"task must be one of {sorted(TASK_ACTIONS)}, got {self.task!r}")
        if self.initial_holdings is None:
            self.initial_holdings = 50 if self.task == "exec-sell" else 0
        if self.horizon is None:
            self.horizon = 100 if self.task == "exec-sell" else 200

    def validate(self) -> list[str]:
        errs = []
        if self.lot_size < 1:
            errs.append("lot_size must be >= 1")
        if self.transaction_cost < 0:
            errs.append("transaction_cost must be >= 0")
        if self.window_len < 1:
            errs.append("window_len must be >= 1")
        if self.horizon < self.window_len:
            errs.append("horizon must be >= window_len")
        if self.initial_cash < 0:
            errs.append("initial_cash must be >= 0")
        if self.initial_holdings < 0:
            errs.append("initial_holdings must be >= 0")
        if self.max_holdings < self.initial_holdings:
            errs.append("max_holdings must be >= initial_holdings")
        return errs

    @property
    def actions(self) -> tuple[Action, ...]:
        return TASK_ACTIONS[self.task]


@dataclass
class PortfolioState:
    cash: float
    holdings: int
    initial_cash: float
    t: int = 0


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    coerced: bool
    executed: Action
    price: float


def net_worth(state: PortfolioState, price: float) -> float:
    return state.cash + state.holdings * price


def profitability_ratio(worths: Sequence[float], initial_cash: float) -> float:
    worths = np.asarray(worths, dtype=np.float64)
    if worths.size == 0:
        raise ValueError("empty net-worth trace")
    return float(np.mean(worths > initial_cash))


@dataclass
class StepLog:
    t: int
    price: float
    action_requested: str
    action_executed: str
    cash: float
    holdings: int
    net_worth: float


class TradingEnv:
    def __init__(self, cfg: EnvConfig, series: PriceSeries):
        errs = cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.cfg = cfg
        self.series = series
        self.start: int | None = None
        self.state: PortfolioState | None = None
        self.log: list[StepLog] = []
        self.worths: list[float] = []

    @property
    def actions(self) -> tuple[Action, ...]:
        return self.cfg.actions

    def price_at(self, t: int) -> float:
        return float(self.series.opens[self.start + t - 1])

    def observation(self, t: int) -> np.ndarray:
        L = self.cfg.window_len
        return self.series.opens[self.start + t - L : self.start + t].copy()

    def reset(self, start_index: int, seed: int | None = None) -> tuple[np.ndarray, PortfolioState]:
        # the environment is deterministic; seed is accepted for interface parity
        if start_index < self.cfg.window_len:
            raise EnvError(f"start_index {start_index} < window_len {self.cfg.window_len}")
        if start_index + self.cfg.horizon > len(self.series):
            raise EnvError(
                f"not enough data: start {start_index} + horizon {self.cfg.horizon} > {len(self.series)}"
            )
        self.start = start_index
        self.state = PortfolioState(float(self.cfg.initial_cash), int(self.cfg.initial_holdings),
                                    float(self.cfg.initial_cash), 0)
        self.log = []
        self.worths = []
        return self.observation(0), PortfolioState(**asdict(self.state))

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.t >= self.cfg.horizon

    def step(self, action: Action | int) -> StepResult:
        if self.state is None:
            raise EnvError("step before reset")
        if self.done:
            raise EnvError("step after episode end")
        action = Action(action)
        if action not in self.actions:
            raise EnvError(f"{action.name} is not allowed in task {self.cfg.task!r}")
        s = self.state
        price = self.price_at(s.t)
        lot = self.cfg.lot_size
        fee = self.cfg.transaction_cost
        executed = action
        if action == Action.BUY:
            cost = price * lot + fee
            if s.cash < cost or s.holdings + lot > self.cfg.max_holdings:
                executed = Action.HOLD
            else:
                s.cash = s.cash - cost
                s.holdings += lot
        elif action == Action.SELL:
            if s.holdings < lot:
                executed = Action.HOLD
            else:
                s.cash = s.cash + (price * lot - fee)
                s.holdings -= lot
        s.t += 1
        mark = self.price_at(s.t)
        worth = net_worth(s, mark)
        self.worths.append(worth)
        self.log.append(StepLog(s.t - 1, price, action.name, executed.name, s.cash, s.holdings, worth))
        done = s.t >= self.cfg.horizon
        reward = worth - s.initial_cash if done else 0.0
        return StepResult(self.observation(s.t), reward, done, executed != action, executed, price)


def write_episode_log(log: Iterable[StepLog], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for rec in log:
            fh.write(json.dumps(asdict(rec)) + "\n")


# ---------------------------------------------------------------------------
# oracle


@dataclass
class OracleResult:
    profit: float
    actions: list[Action] = field(default_factory=list)


def oracle_profit(series: PriceSeries, cfg: EnvConfig, start_index: int) -> OracleResult:
    """Best terminal reward by dynamic programming over (day, holdings).

    For a fixed day and holdings, more cash never hurts, so keeping only the
    best cash per cell is exact. Arithmetic mirrors :meth:`TradingEnv.step`
    expression by expression so results match rollouts bit for bit.
    """
    env = TradingEnv(cfg, series)
    env.reset(start_index)
    H = cfg.max_holdings
    lot = cfg.lot_size
    fee = cfg.transaction_cost
    allowed = cfg.actions
    neg = -math.inf
    cash = [neg] * (H + 1)
    cash[cfg.initial_holdings] = float(cfg.initial_cash)
    back: list[list[tuple[int, Action] | None]] = []
    for t in range(cfg.horizon):
        price = env.price_at(t)
        new = [neg] * (H + 1)
        choice: list[tuple[int, Action] | None] = [None] * (H + 1)
        for h in range(H + 1):
            c = cash[h]
            if c == neg:
                continue
            # hold first so ties resolve to doing nothing
            if c > new[h]:
                new[h], choice[h] = c, (h, Action.HOLD)
            if Action.BUY in allowed and h + lot <= H:
                cost = price * lot + fee
                if c >= cost:
                    nc = c - cost
                    if nc > new[h + lot]:
                        new[h + lot], choice[h + lot] = nc, (h, Action.BUY)
            if Action.SELL in allowed and h >= lot:
                nc = c + (price * lot - fee)
                if nc > new[h - lot]:
                    new[h - lot], choice[h - lot] = nc, (h, Action.SELL)
        cash = new
        back.append(choice)
    mark = env.price_at(cfg.horizon)
    best_h, best = None, neg
    for h in range(H + 1):
        if cash[h] == neg:
            continue
        w = cash[h] + h * mark
        if w > best:
            best_h, best = h, w
    acts: list[Action] = []
    h = best_h
    for t in range(cfg.horizon - 1, -1, -1):
        prev, a = back[t][h]
        acts.append(a)
        h = prev
    acts.reverse()
    return OracleResult(best - float(cfg.initial_cash), acts)


def brute_force_profit(series: PriceSeries, cfg: EnvConfig, start_index: int) -> float:
    """Exhaustive search over every action sequence; only usable for tiny horizons."""
    env = TradingEnv(cfg, series)
    best = -math.inf
    for seq in itertools.product(cfg.actions, repeat=cfg.horizon):
        env.reset(start_index)
        r = 0.0
        for a in seq:
            r = env.step(a).reward
        best = max(best, r)
    return best


def rollout_actions(env: TradingEnv, start_index: int, actions: Sequence[Action]) -> float:
    env.reset(start_index)
    r = 0.0
    for a in actions:
        r = env.step(a).reward
    return r

"""Double Q-learning with prioritized replay over episode-prefix observations.

A transition stores only ``(episode, t, action, reward, done)``; the
observation prefix up to ``t`` (and ``t + 1`` for the successor) is rebuilt
from the episode's stored features when the transition is sampled. This is
what lets a memory model see the whole history without copying it into the
buffer.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .env import EnvConfig, PortfolioState, PriceSeries, TradingEnv, profitability_ratio
from .numerics import ParamStore, adam_step, clip_by_global_norm, make_rng, softmax


class QModel(Protocol):
    kind: str
    params: ParamStore

    @property
    def n_actions(self) -> int: ...

    def build_inputs(self, prefixes, queries, rng=None): ...

    def forward_inputs(self, inputs, linear_start=False, params=None): ...

    def backward(self, trace, dq, params=None) -> None: ...

    def header(self) -> dict: ...


class BufferUnderfull(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration and schedules


@dataclass
class TrainConfig:
    episodes: int = 10000
    batch: int = 32
    lr: float = 0.001
    epoch_updates: int = 100
    lr_period_epochs: int = 30
    lr_stop_epochs: int = 100
    linear_start_epochs: int = 30
    target_update: int = 100
    gamma: float = 1.0
    temp_start: float = 1.0
    temp_end: float = 0.1
    eval_temperature: float = 0.1
    restarts: int = 20
    capacity: int = 50000
    warmup: int = 1000
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    per_eps: float = 1e-6
    clip_norm: float = 10.0
    validation_frac: float = 0.2
    val_rollouts: int = 10
    divergence_limit: float = 1e6
    reward_scale: float = 1.0
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        for f in ("batch", "epoch_updates", "lr_period_epochs", "target_update", "restarts",
                  "capacity", "val_rollouts"):
            if getattr(self, f) < 1:
                errs.append(f"{f} must be >= 1")
        for f in ("episodes", "warmup", "lr_stop_epochs", "linear_start_epochs"):
            if getattr(self, f) < 0:
                errs.append(f"{f} must be >= 0")
        if self.lr < 0:
            errs.append("lr must be >= 0")
        if not 0 < self.gamma <= 1:
            errs.append("gamma must lie in (0, 1]")
        if self.temp_start <= 0 or self.temp_end <= 0:
            errs.append("behaviour temperatures must be positive")
        if self.eval_temperature < 0:
            errs.append("eval_temperature must be >= 0")
        if not 0 <= self.validation_frac < 1:
            errs.append("validation_frac must lie in [0, 1)")
        if self.per_alpha < 0 or self.per_eps <= 0:
            errs.append("per_alpha must be >= 0 and per_eps > 0")
        if self.reward_scale <= 0:
            errs.append("reward_scale must be positive")
        return errs

    def lr_at(self, updates: int) -> float:
        """Learning rate after ``updates`` gradient updates: halved each period until the stop."""
        stop = self.lr_stop_epochs * self.epoch_updates
        period = self.lr_period_epochs * self.epoch_updates
        return self.lr * 0.5 ** (min(updates, stop) // period)

    def linear_start_at(self, updates: int) -> bool:
        return updates < self.linear_start_epochs * self.epoch_updates

    def beta_at(self, frac: float) -> float:
        frac = min(max(frac, 0.0), 1.0)
        return self.per_beta_start + frac * (self.per_beta_end - self.per_beta_start)

    def temperature_at(self, frac: float) -> float:
        frac = min(max(frac, 0.0), 1.0)
        return self.temp_start + frac * (self.temp_end - self.temp_start)


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class Transition:
    episode: int
    t: int
    action: int
    reward: float
    done: bool


class SumTree:
    """Binary sum tree over a fixed number of leaves, updated and queried in batches."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        size = 1
        while size < self.capacity:
            size *= 2
        self.size = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaves(self) -> np.ndarray:
        return self.tree[self.size : self.size + self.capacity]

    def set(self, idx, values) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64)) + self.size
        self.tree[idx] = values
        idx = np.unique(idx // 2)
        while idx[0] >= 1:
            self.tree[idx] = self.tree[2 * idx] + self.tree[2 * idx + 1]
            if idx[0] == 1:
                break
            idx = np.unique(idx // 2)

    def find(self, mass: np.ndarray) -> np.ndarray:
        """Leaf index holding each cumulative ``mass`` (vectorized descent)."""
        mass = np.array(mass, dtype=np.float64)
        node = np.ones(len(mass), dtype=np.int64)
        while node[0] < self.size:
            left = 2 * node
            lv = self.tree[left]
            go_right = mass >= lv
            mass = np.where(go_right, mass - lv, mass)
            node = np.where(go_right, left + 1, left)
        leaf = node - self.size
        # guards against float round-off walking past the last populated leaf
        return np.minimum(leaf, self.capacity - 1)


class PrioritizedBuffer:
    def __init__(self, capacity: int, alpha: float = 0.6, eps: float = 1e-6):
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.tree = SumTree(capacity)
        self.priorities = np.zeros(capacity)
        self.data: list[Transition | None] = [None] * capacity
        self.next = 0
        self.size = 0
        self.max_priority = 1.0

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition, priority: float | None = None) -> int:
        i = self.next
        p = self.max_priority if priority is None else float(priority)
        self.data[i] = tr
        self.priorities[i] = p
        self.tree.set(i, p**self.alpha)
        self.next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def probabilities(self) -> np.ndarray:
        w = self.tree.leaves()[: self.size]
        return w / w.sum()

    def sample(self, batch: int, beta: float, rng: np.random.Generator):
        """Indices, transitions and max-normalized importance weights."""
        if self.size < batch:
            raise BufferUnderfull(f"buffer holds {self.size} < batch {batch}")
        total = self.tree.total
        idx = self.tree.find(rng.random(batch) * total)
        idx = np.minimum(idx, self.size - 1)
        probs = self.tree.leaves()[idx] / total
        w = (self.size * probs) ** (-beta)
        w = w / w.max()
        return idx, [self.data[i] for i in idx], w

    def update_priorities(self, idx: np.ndarray, td_errors: np.ndarray) -> None:
        pr = np.abs(np.asarray(td_errors, dtype=np.float64)) + self.eps
        # duplicates in one batch: last write wins, matching the tree
        self.priorities[idx] = pr
        self.tree.set(idx, pr**self.alpha)
        self.max_priority = max(self.max_priority, float(pr.max()))


def sample_batch(buffer: PrioritizedBuffer, batch: int, beta: float, seed: int):
    return buffer.sample(batch, beta, make_rng(seed, "per/sample"))


# ---------------------------------------------------------------------------
# episodes and features


@dataclass
class EpisodeData:
    phi: np.ndarray      # (horizon + 1, d_o) encoded windows, one per decision point
    queries: np.ndarray  # (horizon + 1, d_q)


def agent_query(state: PortfolioState, price: float) -> np.ndarray:
    return np.array([state.cash / state.initial_cash, state.holdings * price / state.initial_cash])


class FeatureSeries:
    """Encoded windows for a whole price series; row j ends at price index j + L - 1.

    ``shift`` and ``scale`` (per dimension) are applied once at construction
    and kept so the same transform can be replayed at evaluation time.
    """

    def __init__(self, phi: np.ndarray, window_len: int, shift: np.ndarray | None = None,
                 scale: np.ndarray | None = None):
        phi = np.asarray(phi, dtype=np.float64)
        self.shift = None if shift is None else np.asarray(shift, dtype=np.float64)
        self.scale = None if scale is None else np.asarray(scale, dtype=np.float64)
        if self.shift is not None:
            phi = phi - self.shift
        if self.scale is not None:
            phi = phi / self.scale
        self.phi = phi
        self.window_len = window_len

    @classmethod
    def standardized(cls, phi: np.ndarray, window_len: int, fit_rows: int,
                     floor: float = 1e-8) -> "FeatureSeries":
        """Per-dimension z-score using statistics of the first ``fit_rows`` rows only.

        Sigmoid codes of a slowly drifting series share a large common
        offset and differ by tiny amounts; rescaling brings the informative
        part up to unit size before it reaches the Q-network.
        """
        phi = np.asarray(phi, dtype=np.float64)
        if not 1 <= fit_rows <= len(phi):
            raise ValueError(f"fit_rows must lie in [1, {len(phi)}]")
        mu = phi[:fit_rows].mean(0)
        sd = np.maximum(phi[:fit_rows].std(0), floor)
        return cls(phi, window_len, mu, sd)

    def transform_json(self) -> dict | None:
        if self.shift is None and self.scale is None:
            return None
        return {
            "shift": None if self.shift is None else self.shift.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
        }

    def for_episode(self, start: int, horizon: int) -> np.ndarray:
        # step t observes prices [start+t-L, start+t)
        lo = start - self.window_len
        if lo < 0 or lo + horizon + 1 > len(self.phi):
            raise ValueError(f"features do not cover an episode of {horizon} steps from {start}")
        return self.phi[lo : lo + horizon + 1]


def prefix_inputs(model: QModel, episodes: dict[int, EpisodeData], refs: Sequence[tuple[int, int]],
                  rng: np.random.Generator | None = None):
    prefixes = [episodes[e].phi[: t + 1] for e, t in refs]
    queries = [episodes[e].queries[: t + 1] for e, t in refs]
    return model.build_inputs(prefixes, queries, rng)


def td_targets(model: QModel, online: ParamStore, target: ParamStore, next_inputs,
               rewards: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    """Double-Q targets: the online net picks a*, the target net scores it."""
    y = np.asarray(rewards, dtype=np.float64).copy()
    if next_inputs is None:
        return y
    q_on, _ = model.forward_inputs(next_inputs, params=online)
    q_tg, _ = model.forward_inputs(next_inputs, params=target)
    a_star = np.argmax(q_on, axis=1)
    live = ~np.asarray(dones, dtype=bool)
    y[live] += gamma * q_tg[live, a_star[live]]
    return y


def td_target(model: QModel, transition: Transition, episodes: dict[int, EpisodeData],
              online: ParamStore, target: ParamStore, gamma: float) -> float:
    if transition.done:
        return float(transition.reward)
    nxt = prefix_inputs(model, episodes, [(transition.episode, transition.t + 1)])
    return float(td_targets(model, online, target, nxt, [transition.reward], [False], gamma)[0])


def td_loss_and_grad(model: QModel, params: ParamStore, inputs, actions: np.ndarray,
                     targets: np.ndarray, weights: np.ndarray,
                     linear_start: bool = False) -> tuple[float, np.ndarray, np.ndarray]:
    """Importance-weighted squared TD error averaged over the batch.

    Targets are constants. Gradients are accumulated into ``params``; returns
    (loss, td_errors, Q).
    """
    q, trace = model.forward_inputs(inputs, linear_start=linear_start, params=params)
    B = len(actions)
    rows = np.arange(B)
    delta = targets - q[rows, actions]
    loss = float(np.sum(weights * delta * delta) / B)
    dq = np.zeros_like(q)
    dq[rows, actions] = -2.0 * weights * delta / B
    model.backward(trace, dq, params=params)
    return loss, delta, q


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    ratio_mean: float
    ratio_std: float
    budget_mean: float
    budget_std: float
    rollouts: int
    reward_mean: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def choose_action(q: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature == 0:
        return int(np.argmax(q))
    probs = softmax(q / temperature)
    return int(rng.choice(len(probs), p=probs))


def run_episode(model: QModel, params: ParamStore, env: TradingEnv, feats: FeatureSeries, start: int,
                temperature: float, rng: np.random.Generator, linear_start: bool = False,
                on_step: Callable | None = None) -> tuple[EpisodeData, list[tuple[int, float, bool]], float]:
    """Roll one episode; returns features, (action, reward, done) per step and max |Q| seen."""
    H = env.cfg.horizon
    _, state = env.reset(start)
    phi = feats.for_episode(start, H)
    queries = np.zeros((H + 1, 2))
    queries[0] = agent_query(state, env.price_at(0))
    ep = EpisodeData(phi, queries)
    steps = []
    qmax = 0.0
    actions = env.actions
    for t in range(H):
        inp = model.build_inputs([phi[: t + 1]], [queries[: t + 1]])
        q, _ = model.forward_inputs(inp, linear_start=linear_start, params=params)
        q = q[0]
        qmax = max(qmax, float(np.max(np.abs(q))))
        a = choose_action(q, temperature, rng)
        res = env.step(actions[a])
        queries[t + 1] = agent_query(env.state, env.price_at(t + 1))
        steps.append((a, res.reward, res.done))
        if on_step is not None and on_step(ep, t, a, res, q):
            break
    return ep, steps, qmax


def evaluate(model: QModel, params: ParamStore, env: TradingEnv, feats: FeatureSeries, start: int,
             rollouts: int, temperature: float, seed: int, logs: list | None = None) -> EvalReport:
    if rollouts < 1:
        raise ValueError("rollouts must be >= 1")
    ratios, budgets, rewards = [], [], []
    for r in range(rollouts):
        rng = make_rng(seed, f"eval/rollout{r}")
        _, steps, _ = run_episode(model, params, env, feats, start, temperature, rng)
        ratios.append(profitability_ratio(env.worths, env.cfg.initial_cash))
        budgets.append(env.worths[-1])
        rewards.append(steps[-1][1])
        if logs is not None:
            logs.append(list(env.log))
    return EvalReport(float(np.mean(ratios)), float(np.std(ratios)), float(np.mean(budgets)),
                      float(np.std(budgets)), rollouts, float(np.mean(rewards)))


# ---------------------------------------------------------------------------
# training


@dataclass
class RestartResult:
    restart: int
    params: ParamStore
    validation: EvalReport | None
    aborted: bool
    steps: int
    updates: int


@dataclass
class TrainResult:
    best: RestartResult
    restarts: list[RestartResult]
    log: list[dict] = field(default_factory=list)

    @property
    def params(self) -> ParamStore:
        return self.best.params


class Trainer:
    """One training run = ``cfg.restarts`` independent restarts, best kept by validation score."""

    def __init__(self, make_model: Callable[[int], QModel], series: PriceSeries, feats: FeatureSeries,
                 env_cfg: EnvConfig, cfg: TrainConfig, train_end: int | None = None,
                 hook: Callable | None = None):
        errs = cfg.validate() + env_cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.make_model = make_model
        self.series = series
        self.feats = feats
        self.env_cfg = env_cfg
        self.cfg = cfg
        self.hook = hook
        n = len(series) if train_end is None else train_end
        n_val = int(round(n * cfg.validation_frac))
        self.fit_end = n - n_val
        L = env_cfg.window_len
        self.start_lo = L
        self.start_hi = self.fit_end - env_cfg.horizon
        if self.start_hi < self.start_lo:
            raise ValueError(
                f"training window of {self.fit_end} days cannot hold horizon {env_cfg.horizon} "
                f"after a {L}-day window"
            )
        self.val_start = None
        if n_val > 0:
            self.val_start = max(self.fit_end, L)
            self.val_horizon = n - self.val_start
            if self.val_horizon < 1:
                self.val_start = None

    def _restart_seed(self, r: int) -> int:
        return int(make_rng(self.cfg.seed, f"restart{r}/init").integers(0, 2**31 - 1))

    def train(self) -> TrainResult:
        results = []
        log: list[dict] = []
        for r in range(self.cfg.restarts):
            res = self._train_one(r, log)
            results.append(res)
        ok = [x for x in results if not x.aborted] or results
        if all(x.validation is not None for x in ok):
            best = max(ok, key=lambda x: (x.validation.ratio_mean, x.validation.budget_mean, -x.restart))
        else:
            best = ok[0]
        return TrainResult(best, results, log)

    def validate(self, model: QModel, params: ParamStore, r: int) -> EvalReport | None:
        if self.val_start is None:
            return None
        cfg = EnvConfig(**{**asdict(self.env_cfg), "horizon": self.val_horizon})
        env = TradingEnv(cfg, self.series)
        return evaluate(model, params, env, self.feats, self.val_start, self.cfg.val_rollouts,
                        self.cfg.eval_temperature, make_rng(self.cfg.seed, f"restart{r}/val").integers(2**31))

    def _train_one(self, r: int, log: list[dict]) -> RestartResult:
        cfg = self.cfg
        model = self.make_model(self._restart_seed(r))
        online = model.params
        target = online.copy()
        env = TradingEnv(self.env_cfg, self.series)
        buf = PrioritizedBuffer(cfg.capacity, cfg.per_alpha, cfg.per_eps)
        rng_start = make_rng(cfg.seed, f"restart{r}/starts")
        rng_act = make_rng(cfg.seed, f"restart{r}/behaviour")
        rng_per = make_rng(cfg.seed, f"restart{r}/per")
        rng_noise = make_rng(cfg.seed, f"restart{r}/memnoise")
        episodes: dict[int, EpisodeData] = {}
        H = self.env_cfg.horizon
        total_steps = max(1, cfg.episodes * H)
        state = {"steps": 0, "updates": 0, "aborted": False}

        def update():
            beta = cfg.beta_at(state["steps"] / total_steps)
            idx, trs, w = buf.sample(cfg.batch, beta, rng_per)
            refs = [(tr.episode, tr.t) for tr in trs]
            acts = np.array([tr.action for tr in trs])
            rewards = np.array([tr.reward for tr in trs]) * cfg.reward_scale
            dones = np.array([tr.done for tr in trs])
            live = [i for i, tr in enumerate(trs) if not tr.done]
            y = rewards.copy()
            if live:
                nxt = prefix_inputs(model, episodes, [(refs[i][0], refs[i][1] + 1) for i in live])
                y[live] = td_targets(model, online, target, nxt, rewards[live], dones[live], cfg.gamma)
            linear = cfg.linear_start_at(state["updates"])
            inputs = prefix_inputs(model, episodes, refs, rng_noise)
            online.zero_grad()
            _, delta, q = td_loss_and_grad(model, online, inputs, acts, y, w, linear)
            if not np.all(np.isfinite(q)) or np.max(np.abs(q)) > cfg.divergence_limit:
                state["aborted"] = True
                return
            clip_by_global_norm(online, cfg.clip_norm)
            adam_step(online, cfg.lr_at(state["updates"]))
            state["updates"] += 1
            buf.update_priorities(idx, delta)

        for e in range(cfg.episodes):
            start = int(rng_start.integers(self.start_lo, self.start_hi + 1))
            temp = cfg.temperature_at(state["steps"] / total_steps)
            ep_id = e

            def on_step(ep, t, a, res, q):
                if t == 0:
                    episodes[ep_id] = ep
                buf.add(Transition(ep_id, t, a, res.reward, res.done))
                state["steps"] += 1
                if len(buf) >= max(cfg.warmup, cfg.batch):
                    update()
                if state["steps"] % cfg.target_update == 0:
                    target.assign_from(online)
                if self.hook is not None:
                    self.hook(r, state["steps"], state["updates"], online, target)
                return state["aborted"]

            _, steps, qmax = run_episode(model, online, env, self.feats, start, temp, rng_act,
                                         linear_start=cfg.linear_start_at(state["updates"]),
                                         on_step=on_step)
            if qmax > cfg.divergence_limit or not math.isfinite(qmax):
                state["aborted"] = True
            log.append({
                "restart": r,
                "episode": e,
                "terminal_reward": steps[-1][1] if steps and steps[-1][2] else None,
                "temperature": temp,
                "lr": cfg.lr_at(state["updates"]),
                "steps": state["steps"],
                "updates": state["updates"],
                "aborted": state["aborted"],
            })
            if state["aborted"]:
                break
            if len(buf) == buf.capacity:
                live_eps = {tr.episode for tr in buf.data}
                for k in [k for k in episodes if k not in live_eps]:
                    del episodes[k]
        val = None if state["aborted"] else self.validate(model, online, r)
        return RestartResult(r, online, val, state["aborted"], state["steps"], state["updates"])


def write_jsonl(records: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

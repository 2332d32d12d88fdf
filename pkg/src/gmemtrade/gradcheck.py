"""Tiny model instances and their finite-difference gradient checks.

Each check returns the max relative error per parameter tensor. ``corrupt``
names a tensor whose analytic gradient is deliberately perturbed, which is
how the checker itself is tested.
"""
from __future__ import annotations

import numpy as np

from .baselines import FCNNConfig, FCNNPolicy, LSTMConfig, LSTMPolicy
from .encoder import Encoder, WindowConfig
from .numerics import ParamStore, gradcheck, make_rng
from .policy import GMemConfig, GMemPolicy
from .training import td_loss_and_grad

GRADCHECK_TOL = 1e-4
KINDS = ("gmemn2n", "memn2n", "fcnn", "lstm", "encoder", "td")


def tiny_gmem(seed: int = 0, gated: bool = True, tied: bool = True) -> GMemPolicy:
    cfg = GMemConfig(hops=2, embed_dim=4, obs_dim=3, query_dim=2, n_actions=3, max_mem=8,
                     gated=gated, tied=tied)
    return GMemPolicy(cfg, seed)


def _quadratic(q: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    r = q - y
    return 0.5 * float(np.sum(r * r)), r


def _wrap(fn, corrupt: str | None, rng: np.random.Generator):
    if corrupt is None:
        return fn
    bump = None

    def wrapped(store: ParamStore) -> float:
        nonlocal bump
        loss = fn(store)
        if corrupt not in store:
            raise KeyError(f"no tensor named {corrupt!r}")
        if bump is None:
            bump = rng.normal(0.0, 1.0, size=store.grad(corrupt).shape)
        store.grad(corrupt)[...] += bump
        return loss

    return wrapped


def check_gmem(seed: int = 0, gated: bool = True, tied: bool = True, linear_start: bool = False,
               corrupt: str | None = None) -> dict[str, float]:
    """5 memory slots, d=4, d_o=3, K=2, 3 actions, quadratic loss on Q."""
    rng = make_rng(seed, "gradcheck/gmem")
    model = tiny_gmem(seed, gated, tied)
    # random temporal rows so their gradients are exercised away from zero
    for name in model.temporal_names():
        model.params[name][...] = rng.normal(0.0, 0.5, size=model.params[name].shape)
    X = rng.normal(0.0, 1.0, size=(5, 3))
    query = rng.normal(0.0, 1.0, size=(1, 2))
    y = rng.normal(0.0, 1.0, size=(1, 3))
    batch = model.pack([X])

    def loss_and_grad(store: ParamStore) -> float:
        store.zero_grad()
        q, tr = model.forward(batch, query, linear_start, params=store)
        loss, dq = _quadratic(q, y)
        model.backward(tr, dq, params=store)
        return loss

    return gradcheck(_wrap(loss_and_grad, corrupt, rng), model.params)


def check_fcnn(seed: int = 0, corrupt: str | None = None) -> dict[str, float]:
    rng = make_rng(seed, "gradcheck/fcnn")
    model = FCNNPolicy(FCNNConfig(obs_dim=3, query_dim=2, hidden=5, n_actions=3, init_sigma=0.5), seed)
    x = rng.normal(0.0, 1.0, size=(4, 5))
    y = rng.normal(0.0, 1.0, size=(4, 3))

    def loss_and_grad(store: ParamStore) -> float:
        store.zero_grad()
        q, tr = model.forward_inputs(x, params=store)
        loss, dq = _quadratic(q, y)
        model.backward(tr, dq, params=store)
        return loss

    return gradcheck(_wrap(loss_and_grad, corrupt, rng), model.params)


def check_lstm(seed: int = 0, corrupt: str | None = None, steps: int = 3) -> dict[str, float]:
    rng = make_rng(seed, "gradcheck/lstm")
    model = LSTMPolicy(LSTMConfig(obs_dim=3, query_dim=2, hidden=4, n_actions=3, init_sigma=0.5), seed)
    # two sequences, the second left-padded by one step
    xs = rng.normal(0.0, 1.0, size=(2, steps, 5))
    mask = np.ones((2, steps), dtype=bool)
    mask[1, 0] = False
    xs[1, 0] = 0.0
    y = rng.normal(0.0, 1.0, size=(2, 3))

    def loss_and_grad(store: ParamStore) -> float:
        store.zero_grad()
        q, tr = model.forward_inputs((xs, mask), params=store)
        loss, dq = _quadratic(q, y)
        model.backward(tr, dq, params=store)
        return loss

    return gradcheck(_wrap(loss_and_grad, corrupt, rng), model.params)


def check_encoder(seed: int = 0, corrupt: str | None = None) -> dict[str, float]:
    rng = make_rng(seed, "gradcheck/encoder")
    enc = Encoder(WindowConfig(window_len=3, hidden_dim=2), seed=seed, init_sigma=0.5)
    clean = rng.uniform(0.0, 1.0, size=(6, 3))
    noisy = clean + rng.normal(0.0, 0.1, size=clean.shape)
    nxt = rng.uniform(0.0, 1.0, size=(6, 3))
    return gradcheck(_wrap(lambda store: enc.loss_and_grad(noisy, clean, nxt), corrupt, rng), enc.params)


def check_td(seed: int = 0, linear_start: bool = False, corrupt: str | None = None) -> dict[str, float]:
    """Importance-weighted TD loss over a mini-batch of prefixes of different lengths."""
    rng = make_rng(seed, "gradcheck/td")
    model = tiny_gmem(seed)
    for name in model.temporal_names():
        model.params[name][...] = rng.normal(0.0, 0.5, size=model.params[name].shape)
    prefixes = [rng.normal(0.0, 1.0, size=(n, 3)) for n in (5, 2, 4)]
    queries = [rng.normal(0.0, 1.0, size=(len(p), 2)) for p in prefixes]
    inputs = model.build_inputs(prefixes, queries)
    actions = np.array([0, 2, 1])
    targets = rng.normal(0.0, 1.0, size=3)
    weights = rng.uniform(0.2, 1.0, size=3)

    def loss_and_grad(store: ParamStore) -> float:
        store.zero_grad()
        loss, _, _ = td_loss_and_grad(model, store, inputs, actions, targets, weights, linear_start)
        return loss

    return gradcheck(_wrap(loss_and_grad, corrupt, rng), model.params)


def run_gradcheck(kind: str, seed: int = 0, corrupt: str | None = None) -> dict[str, float]:
    """Per-tensor max relative error; GMem kinds are checked in both attention modes."""
    if kind in ("gmemn2n", "memn2n"):
        gated = kind == "gmemn2n"
        out = check_gmem(seed, gated=gated, corrupt=corrupt)
        lin = check_gmem(seed, gated=gated, linear_start=True, corrupt=corrupt)
        out.update({f"{k}[linear]": v for k, v in lin.items()})
        return out
    if kind == "fcnn":
        return check_fcnn(seed, corrupt)
    if kind == "lstm":
        return check_lstm(seed, corrupt)
    if kind == "encoder":
        return check_encoder(seed, corrupt)
    if kind == "td":
        return check_td(seed, corrupt=corrupt)
    raise ValueError(f"unknown gradcheck kind {kind!r}")

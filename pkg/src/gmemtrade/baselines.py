"""Comparison Q-networks: a memoryless MLP and an LSTM over the episode so far.

Both consume the same per-step features as the memory network (encoded
window + agent query) so any difference comes from how history is used.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import ParamStore, gaussian_init, make_rng, relu, sigmoid


class ShapeMismatch(ValueError):
    pass


def _check_dim(x: np.ndarray, dim: int, what: str) -> None:
    if x.shape[-1] != dim:
        raise ShapeMismatch(f"{what} has last dim {x.shape[-1]}, expected {dim}")


# ---------------------------------------------------------------------------
# fully connected


@dataclass
class FCNNConfig:
    obs_dim: int = 25
    query_dim: int = 2
    hidden: int = 30
    n_actions: int = 3
    init_sigma: float = 0.1

    @property
    def in_dim(self) -> int:
        return self.obs_dim + self.query_dim


@dataclass
class FCNNTrace:
    x: np.ndarray
    z0: np.ndarray
    h0: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    q: np.ndarray
    param_id: int


def fcnn_forward(params: ParamStore, x: np.ndarray) -> tuple[np.ndarray, FCNNTrace]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_dim(x, params["W0"].shape[1], "FCNN input")
    z0 = x @ params["W0"].T + params["b0"]
    h0 = relu(z0)
    z1 = h0 @ params["W1"].T + params["b1"]
    h1 = relu(z1)
    q = h1 @ params["W2"].T + params["b2"]
    return q, FCNNTrace(x, z0, h0, z1, h1, q, id(params))


def fcnn_backward(params: ParamStore, trace: FCNNTrace, dq: np.ndarray) -> None:
    if trace.param_id != id(params):
        raise ShapeMismatch("trace was produced with a different parameter store")
    dq = np.atleast_2d(dq)
    _check_dim(dq, params["W2"].shape[0], "dQ")
    params.grad("W2")[...] += dq.T @ trace.h1
    params.grad("b2")[...] += dq.sum(0)
    dz1 = (dq @ params["W2"]) * (trace.z1 > 0)
    params.grad("W1")[...] += dz1.T @ trace.h0
    params.grad("b1")[...] += dz1.sum(0)
    dz0 = (dz1 @ params["W1"]) * (trace.z0 > 0)
    params.grad("W0")[...] += dz0.T @ trace.x
    params.grad("b0")[...] += dz0.sum(0)


class FCNNPolicy:
    kind = "fcnn"

    def __init__(self, cfg: FCNNConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        if params is None:
            rng = make_rng(seed, "fcnn/init")
            s, H = cfg.init_sigma, cfg.hidden
            params = ParamStore()
            params.add("W0", gaussian_init((H, cfg.in_dim), 0.0, s, rng))
            params.add("b0", gaussian_init((H,), 0.0, s, rng))
            params.add("W1", gaussian_init((H, H), 0.0, s, rng))
            params.add("b1", gaussian_init((H,), 0.0, s, rng))
            params.add("W2", gaussian_init((cfg.n_actions, H), 0.0, s, rng))
            params.add("b2", gaussian_init((cfg.n_actions,), 0.0, s, rng))
        self.params = params

    @property
    def n_actions(self) -> int:
        return self.cfg.n_actions

    def header(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg)}

    def build_inputs(self, prefixes, queries, rng=None):
        # only the newest window and the current query are visible
        return np.stack([np.concatenate([p[-1], q[-1]]) for p, q in zip(prefixes, queries)])

    def forward_inputs(self, inputs, linear_start=False, params=None):
        return fcnn_forward(params if params is not None else self.params, inputs)

    def backward(self, trace, dq, params=None):
        fcnn_backward(params if params is not None else self.params, trace, dq)


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LSTMConfig:
    obs_dim: int = 25
    query_dim: int = 2
    hidden: int = 50
    n_actions: int = 3
    init_sigma: float = 0.1

    @property
    def in_dim(self) -> int:
        return self.obs_dim + self.query_dim


@dataclass
class LSTMState:
    h: np.ndarray
    c: np.ndarray


def lstm_step(params: ParamStore, state: LSTMState, x: np.ndarray) -> tuple[LSTMState, tuple]:
    """One recurrence step. Gate order in the stacked weights is (input, forget, output, candidate)."""
    H = state.h.shape[-1]
    _check_dim(state.h, params["Wh"].shape[1], "LSTM hidden state")
    _check_dim(x, params["Wx"].shape[1], "LSTM input")
    z = x @ params["Wx"].T + state.h @ params["Wh"].T + params["b"]
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    o = sigmoid(z[..., 2 * H : 3 * H])
    g = np.tanh(z[..., 3 * H :])
    c = f * state.c + i * g
    tc = np.tanh(c)
    h = o * tc
    return LSTMState(h, c), (i, f, o, g, tc)


def lstm_q(params: ParamStore, state: LSTMState) -> np.ndarray:
    return state.h @ params["Wq"].T + params["bq"]


@dataclass
class LSTMTrace:
    xs: np.ndarray
    mask: np.ndarray
    hs: list = field(default_factory=list)
    cs: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    q: np.ndarray | None = None
    param_id: int = 0


def lstm_forward(params: ParamStore, xs: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, LSTMTrace]:
    """Run sequences (B, T, in) from a zero state; Q is read from the final hidden state.

    Masked-out steps leave the state untouched, so left-padding shorter
    sequences gives each one its own exact unroll.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 2:
        xs = xs[None]
    B, T, _ = xs.shape
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    H = params["Wh"].shape[1]
    st = LSTMState(np.zeros((B, H)), np.zeros((B, H)))
    tr = LSTMTrace(xs, mask, [st.h], [st.c], param_id=id(params))
    for t in range(T):
        new, gates = lstm_step(params, st, xs[:, t])
        mt = mask[:, t : t + 1]
        st = LSTMState(np.where(mt, new.h, st.h), np.where(mt, new.c, st.c))
        tr.hs.append(st.h)
        tr.cs.append(st.c)
        tr.gates.append(gates)
    tr.q = lstm_q(params, st)
    return tr.q, tr


def lstm_backward(params: ParamStore, trace: LSTMTrace, dq: np.ndarray) -> None:
    """Backpropagation through the whole unroll."""
    if trace.param_id != id(params):
        raise ShapeMismatch("trace was produced with a different parameter store")
    dq = np.atleast_2d(dq)
    hT = trace.hs[-1]
    params.grad("Wq")[...] += dq.T @ hT
    params.grad("bq")[...] += dq.sum(0)
    dh = dq @ params["Wq"]
    dc = np.zeros_like(dh)
    gWx = params.grad("Wx")
    gWh = params.grad("Wh")
    gb = params.grad("b")
    for t in range(trace.xs.shape[1] - 1, -1, -1):
        mt = trace.mask[:, t : t + 1]
        i, f, o, g, tc = trace.gates[t]
        c_prev = trace.cs[t]
        h_prev = trace.hs[t]
        do = dh * tc
        dct = dc + dh * o * (1.0 - tc * tc)
        di = dct * g
        df = dct * c_prev
        dg = dct * i
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
        dz = np.where(mt, dz, 0.0)
        gWx += dz.T @ trace.xs[:, t]
        gWh += dz.T @ h_prev
        gb += dz.sum(0)
        dh = np.where(mt, dz @ params["Wh"], dh)
        dc = np.where(mt, dct * f, dc)


class LSTMPolicy:
    kind = "lstm"

    def __init__(self, cfg: LSTMConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        if params is None:
            rng = make_rng(seed, "lstm/init")
            s, H = cfg.init_sigma, cfg.hidden
            params = ParamStore()
            params.add("Wx", gaussian_init((4 * H, cfg.in_dim), 0.0, s, rng))
            params.add("Wh", gaussian_init((4 * H, H), 0.0, s, rng))
            params.add("b", gaussian_init((4 * H,), 0.0, s, rng))
            params.add("Wq", gaussian_init((cfg.n_actions, H), 0.0, s, rng))
            params.add("bq", gaussian_init((cfg.n_actions,), 0.0, s, rng))
        self.params = params

    @property
    def n_actions(self) -> int:
        return self.cfg.n_actions

    def header(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg)}

    def build_inputs(self, prefixes, queries, rng=None):
        T = max(len(p) for p in prefixes)
        xs = np.zeros((len(prefixes), T, self.cfg.in_dim))
        mask = np.zeros((len(prefixes), T), dtype=bool)
        for b, (p, q) in enumerate(zip(prefixes, queries)):
            n = len(p)
            xs[b, T - n :] = np.concatenate([p, q], axis=1)
            mask[b, T - n :] = True
        return xs, mask

    def forward_inputs(self, inputs, linear_start=False, params=None):
        xs, mask = inputs
        return lstm_forward(params if params is not None else self.params, xs, mask)

    def backward(self, trace, dq, params=None):
        lstm_backward(params if params is not None else self.params, trace, dq)

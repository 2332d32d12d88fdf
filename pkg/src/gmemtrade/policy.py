"""Gated end-to-end memory network producing Q-values over trading actions.

Memory slots hold encoded price windows. The controller state starts as a
linear embedding of the agent's (budget, holdings) query and is refined over
``hops`` attention reads, each blended into the state by a sigmoid transform
gate. A linear head maps the final state to one Q-value per action.

Everything is batched: a batch of memory banks is padded to a common length
and masked. Single-instance helpers (`embed_memories`, `attend`, `read`,
`gated_hop`) are thin and exist mostly for inspection and testing.

Temporal encoding rows are indexed by slot *age*: the newest slot of a bank
uses row 0, the one before it row 1, and so on.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import ParamStore, gaussian_init, make_rng, sigmoid, softmax


class CapacityError(ValueError):
    pass


class TraceMismatch(ValueError):
    pass


@dataclass
class GMemConfig:
    hops: int = 3
    embed_dim: int = 20
    obs_dim: int = 25
    query_dim: int = 2
    n_actions: int = 3
    max_mem: int = 256
    tied: bool = True
    gated: bool = True
    noise_rate: float = 0.1
    init_sigma: float = 0.1
    gate_bias_mean: float = 0.2

    def validate(self) -> list[str]:
        errs = []
        for f in ("hops", "embed_dim", "obs_dim", "query_dim", "n_actions", "max_mem"):
            if getattr(self, f) < 1:
                errs.append(f"{f} must be >= 1")
        if not 0 <= self.noise_rate < 1:
            errs.append("noise_rate must lie in [0, 1)")
        return errs


@dataclass
class MemoryBank:
    """Encoded observations of one episode prefix, in time order."""

    payloads: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.payloads = np.asarray(self.payloads, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.payloads.ndim != 2 or len(self.payloads) != len(self.positions):
            raise ValueError("payloads must be (n, d_o) with one position per slot")
        if len(self.positions) > 1 and np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly increasing")

    @classmethod
    def from_prefix(cls, payloads: np.ndarray) -> "MemoryBank":
        payloads = np.asarray(payloads, dtype=np.float64)
        return cls(payloads, np.arange(len(payloads)))

    def __len__(self) -> int:
        return len(self.payloads)


@dataclass
class MemoryBatch:
    """Padded batch: payloads (B, n, d_o), temporal rows (B, n), validity mask (B, n)."""

    payloads: np.ndarray
    rows: np.ndarray
    mask: np.ndarray


@dataclass
class ForwardTrace:
    batch: MemoryBatch
    query: np.ndarray
    linear_start: bool
    u: list[np.ndarray] = field(default_factory=list)
    m: list[np.ndarray] = field(default_factory=list)
    c: list[np.ndarray] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    p: list[np.ndarray] = field(default_factory=list)
    o: list[np.ndarray] = field(default_factory=list)
    gate: list[np.ndarray] = field(default_factory=list)
    q: np.ndarray | None = None
    param_id: int = 0


# ---------------------------------------------------------------------------
# single-instance building blocks


def attend(u: np.ndarray, memories: np.ndarray, linear_start: bool = False) -> np.ndarray:
    logits = memories @ u
    if linear_start:
        return logits
    return softmax(logits)


def read(p: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if len(p) != len(outputs):
        raise ValueError("attention length does not match number of memories")
    return p @ outputs


def gated_hop(u: np.ndarray, o: np.ndarray, w_gate: np.ndarray, b_gate: np.ndarray) -> np.ndarray:
    t = sigmoid(w_gate @ u + b_gate)
    return o * t + u * (1.0 - t)


def boltzmann(q: np.ndarray, temperature: float, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    probs = softmax(np.asarray(q, dtype=np.float64) / temperature)
    return int(rng.choice(len(probs), p=probs)), probs


# ---------------------------------------------------------------------------
# the network


class GMemPolicy:
    def __init__(self, cfg: GMemConfig, seed: int = 0, params: ParamStore | None = None):
        errs = cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.cfg = cfg
        K = cfg.hops
        if cfg.tied:
            # A^{k+1} and C^k share storage, as do the matching temporal rows
            self.A = [f"emb_{k}" for k in range(K)]
            self.C = [f"emb_{k + 1}" for k in range(K)]
            self.TA = [f"tem_{k}" for k in range(K)]
            self.TC = [f"tem_{k + 1}" for k in range(K)]
        else:
            self.A = [f"A_{k}" for k in range(K)]
            self.C = [f"C_{k}" for k in range(K)]
            self.TA = [f"TA_{k}" for k in range(K)]
            self.TC = [f"TC_{k}" for k in range(K)]
        self.WT = [f"gate_W_{k}" for k in range(K)]
        self.bT = [f"gate_b_{k}" for k in range(K)]
        self.params = params if params is not None else self._init_params(seed)

    @property
    def kind(self) -> str:
        return "gmemn2n" if self.cfg.gated else "memn2n"

    @property
    def n_actions(self) -> int:
        return self.cfg.n_actions

    def header(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg)}

    def _init_params(self, seed: int) -> ParamStore:
        cfg = self.cfg
        rng = make_rng(seed, f"{self.kind}/init")
        s = cfg.init_sigma
        d, do, dq = cfg.embed_dim, cfg.obs_dim, cfg.query_dim
        ps = ParamStore()
        ps.add("B", gaussian_init((d, dq), 0.0, s, rng))
        for name in dict.fromkeys(self.A + self.C):
            ps.add(name, gaussian_init((d, do), 0.0, s, rng))
        for name in dict.fromkeys(self.TA + self.TC):
            ps.add(name, gaussian_init((cfg.max_mem, d), 0.0, s, rng))
        if cfg.gated:
            for k in range(cfg.hops):
                ps.add(self.WT[k], gaussian_init((d, d), 0.0, s, rng))
                ps.add(self.bT[k], gaussian_init((d,), cfg.gate_bias_mean, s, rng))
        ps.add("W", gaussian_init((cfg.n_actions, d), 0.0, s, rng))
        return ps

    def temporal_names(self) -> list[str]:
        return list(dict.fromkeys(self.TA + self.TC))

    # -- memory preparation ---------------------------------------------

    def make_batch(self, banks: list[MemoryBank], rng: np.random.Generator | None = None) -> MemoryBatch:
        """Pad banks into one batch; with ``rng`` empty noise slots are inserted."""
        return self.pack([bank.payloads for bank in banks], rng)

    def pack(self, seqs: list[np.ndarray], rng: np.random.Generator | None = None) -> MemoryBatch:
        rate = self.cfg.noise_rate if rng is not None else 0.0
        if rate > 0:
            seqs = [_insert_noise_slots(s, rng.random(len(s)) < rate) for s in seqs]
        lens = [len(s) for s in seqs]
        if min(lens) == 0:
            raise ValueError("memory bank is empty")
        n = max(lens)
        if n > self.cfg.max_mem:
            raise CapacityError(f"{n} memory slots exceed max_mem={self.cfg.max_mem}")
        B = len(seqs)
        X = np.zeros((B, n, self.cfg.obs_dim))
        for b, s in enumerate(seqs):
            if s.shape[1] != self.cfg.obs_dim:
                raise ValueError(f"payload dim {s.shape[1]} != obs_dim {self.cfg.obs_dim}")
            X[b, : len(s)] = s
        lens = np.array(lens)[:, None]
        col = np.arange(n)[None, :]
        M = col < lens
        # newest slot gets temporal row 0; padding points at row 0 and is masked
        R = np.where(M, lens - 1 - col, 0)
        return MemoryBatch(X, R, M)

    def embed_memories(self, bank: MemoryBank, hop: int, rng: np.random.Generator | None = None,
                       params: ParamStore | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(m_i, c_i) for one bank at hop ``hop`` (0-based)."""
        P = params if params is not None else self.params
        mb = self.make_batch([bank], rng)
        X, R = mb.payloads[0], mb.rows[0]
        m = X @ P[self.A[hop]].T + P[self.TA[hop]][R]
        c = X @ P[self.C[hop]].T + P[self.TC[hop]][R]
        return m, c

    # -- forward / backward ---------------------------------------------

    def forward(self, batch: MemoryBatch, query: np.ndarray, linear_start: bool = False,
                params: ParamStore | None = None) -> tuple[np.ndarray, ForwardTrace]:
        P = params if params is not None else self.params
        query = np.atleast_2d(np.asarray(query, dtype=np.float64))
        X, R, M = batch.payloads, batch.rows, batch.mask
        if query.shape != (X.shape[0], self.cfg.query_dim):
            raise ValueError(f"query shape {query.shape} incompatible with batch")
        tr = ForwardTrace(batch, query, linear_start, param_id=id(P))
        # tied roles share storage, so each distinct matrix is applied once
        emb = {k: X @ P[k].T for k in dict.fromkeys(self.A + self.C)}
        tem = {k: P[k][R] for k in dict.fromkeys(self.TA + self.TC)}
        u = query @ P["B"].T
        for k in range(self.cfg.hops):
            m = emb[self.A[k]] + tem[self.TA[k]]
            c = emb[self.C[k]] + tem[self.TC[k]]
            logits = np.sum(m * u[:, None, :], axis=2)
            # sums over slots run in logit order, so reordering slots cannot change bits
            order = np.argsort(np.where(M, logits, -np.inf), axis=1, kind="stable")
            if linear_start:
                p = np.where(M, logits, 0.0)
            else:
                p = _masked_softmax(logits, M, order)
            ps = np.take_along_axis(p, order, axis=1)
            cs = np.take_along_axis(c, order[:, :, None], axis=1)
            o = (ps[:, None, :] @ cs)[:, 0, :]
            tr.u.append(u)
            tr.m.append(m)
            tr.c.append(c)
            tr.logits.append(logits)
            tr.p.append(p)
            tr.o.append(o)
            if self.cfg.gated:
                g = sigmoid(u @ P[self.WT[k]].T + P[self.bT[k]])
                tr.gate.append(g)
                u = o * g + u * (1.0 - g)
            else:
                u = o + u
        tr.u.append(u)
        q = u @ P["W"].T
        tr.q = q
        return q, tr

    def backward(self, trace: ForwardTrace, dq: np.ndarray, params: ParamStore | None = None) -> None:
        """Accumulate dLoss/dparams into the store's gradient slots."""
        P = params if params is not None else self.params
        if trace.param_id != id(P) or trace.q is None:
            raise TraceMismatch("trace was produced with a different parameter store")
        dq = np.atleast_2d(dq)
        if dq.shape != trace.q.shape:
            raise TraceMismatch(f"dQ shape {dq.shape} != Q shape {trace.q.shape}")
        X, R, M = trace.batch.payloads, trace.batch.rows, trace.batch.mask
        # gradients w.r.t. the embedded memories, summed per storage name
        d_emb: dict[str, np.ndarray] = {}

        def acc(name, g):
            if name in d_emb:
                d_emb[name] += g
            else:
                d_emb[name] = g

        P.grad("W")[...] += dq.T @ trace.u[-1]
        du = dq @ P["W"]
        for k in range(self.cfg.hops - 1, -1, -1):
            u, o, p, m, c = trace.u[k], trace.o[k], trace.p[k], trace.m[k], trace.c[k]
            if self.cfg.gated:
                g = trace.gate[k]
                do = du * g
                dz = du * (o - u) * g * (1.0 - g)
                P.grad(self.WT[k])[...] += dz.T @ u
                P.grad(self.bT[k])[...] += dz.sum(0)
                du_prev = du * (1.0 - g) + dz @ P[self.WT[k]]
            else:
                do = du
                du_prev = du.copy()
            dp = (c @ do[:, :, None])[:, :, 0]
            dc = p[:, :, None] * do[:, None, :]
            if trace.linear_start:
                dl = np.where(M, dp, 0.0)
            else:
                dl = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
            dm = dl[:, :, None] * u[:, None, :]
            du_prev += (dl[:, None, :] @ m)[:, 0, :]
            acc(self.A[k], dm)
            acc(self.C[k], dc)
            du = du_prev
        P.grad("B")[...] += du.T @ trace.query
        Xf = X.reshape(-1, X.shape[-1])
        rows = R.reshape(-1)
        for k in range(self.cfg.hops):
            for name, tname in ((self.A[k], self.TA[k]), (self.C[k], self.TC[k])):
                g = d_emb.pop(name, None)
                if g is None:
                    continue
                gf = g.reshape(-1, g.shape[-1])
                P.grad(name)[...] += gf.T @ Xf
                # padded slots carry exactly zero gradient, so no masking needed
                _scatter_rows(P.grad(tname), rows, gf)

    # -- trainer interface -------------------------------------------------

    def build_inputs(self, prefixes, queries, rng=None):
        return self.pack(list(prefixes), rng), np.stack([q[-1] for q in queries])

    def forward_inputs(self, inputs, linear_start=False, params=None):
        batch, query = inputs
        return self.forward(batch, query, linear_start, params)

    # -- conveniences ------------------------------------------------------

    def q_values(self, bank: MemoryBank, query: np.ndarray, linear_start: bool = False,
                 params: ParamStore | None = None) -> np.ndarray:
        q, _ = self.forward(self.make_batch([bank]), np.asarray(query)[None, :], linear_start, params)
        return q[0]


def _masked_softmax(logits: np.ndarray, mask: np.ndarray, order: np.ndarray | None = None) -> np.ndarray:
    if not np.all(np.isfinite(logits[mask])):
        raise FloatingPointError("non-finite attention logits")
    top = np.max(np.where(mask, logits, -np.inf), axis=1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, logits - top, 0.0)), 0.0)
    es = e if order is None else np.take_along_axis(e, order, axis=1)
    return e / np.sum(es, axis=1, keepdims=True)


def _insert_noise_slots(payloads: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Insert an all-zero slot right after every flagged slot."""
    if not flags.any():
        return payloads
    src = np.repeat(np.arange(len(payloads)), 1 + flags.astype(np.int64))
    first = np.concatenate([[True], src[1:] != src[:-1]])
    return np.where(first[:, None], payloads[src], 0.0)


def _scatter_rows(target: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    n, d = target.shape
    flat = (rows[:, None] * d + np.arange(d)[None, :]).reshape(-1)
    target += np.bincount(flat, weights=values.reshape(-1), minlength=n * d).reshape(n, d)

"""Dense numerics shared by every model: activations, init, Adam, clipping, gradcheck.

Parameters live in a :class:`ParamStore`, a named collection of float64 arrays
with paired gradient and Adam moment slots. Models write gradients into the
store by name, so storage shared between two roles (tied weights) accumulates
both contributions without extra bookkeeping.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

SNAPSHOT_FORMAT = "gmemtrade-params/1"


class NumericsError(ValueError):
    """Raised on corrupted numeric state (non-finite values, shape mismatch)."""


class NonDeterministicLoss(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# random streams


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def make_rng(seed: int, label: str) -> np.random.Generator:
    """Counter-based generator for one stochastic site.

    Streams are keyed by ``(seed, label)`` so a new site never shifts the
    numbers drawn at existing ones.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_label_words(label)])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# activations


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise NumericsError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericsError("softmax received non-finite input")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    """Logistic function via tanh, which cannot overflow."""
    out = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))
    if out.ndim == 0:
        return float(out)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def gaussian_init(shape, mean: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.full(shape, float(mean))
    return rng.normal(mean, sigma, size=shape)


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


# ---------------------------------------------------------------------------
# parameter store


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParamStore:
    entries: dict[str, Param] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already defined")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericsError(f"parameter {name!r} has non-finite entries")
        z = np.zeros_like(value)
        self.entries[name] = Param(value, z.copy(), z.copy(), z.copy())
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def grad(self, name: str) -> np.ndarray:
        return self.entries[name].grad

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.entries.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.entries.items()}

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.grad[...] = 0.0

    def num_scalars(self) -> int:
        return sum(p.value.size for p in self.entries.values())

    def copy(self) -> "ParamStore":
        out = ParamStore(step=self.step)
        for k, p in self.entries.items():
            out.entries[k] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy())
        return out

    def assign_from(self, other: "ParamStore") -> None:
        """Copy parameter values (not gradients or moments) in place."""
        for k, p in self.entries.items():
            p.value[...] = other.entries[k].value

    def same_values(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self.entries)

    def check_finite(self) -> None:
        for k, p in self.entries.items():
            if not np.all(np.isfinite(p.value)):
                raise NumericsError(f"parameter {k!r} became non-finite")


def global_norm(store: ParamStore) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in store.entries.values())))


def clip_by_global_norm(store: ParamStore, max_norm: float = 10.0) -> float:
    """Rescale all gradients so their joint l2 norm is at most ``max_norm``.

    Returns the scale factor that was applied (1.0 when untouched).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    g = global_norm(store)
    if g <= max_norm:
        return 1.0
    scale = max_norm / g
    for p in store.entries.values():
        p.grad *= scale
    return scale


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place. Gradients are left for the caller to zero."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("Adam betas must lie in [0, 1)")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in store.entries.values():
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        if lr == 0.0:
            continue
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(loss_fn: Callable[[ParamStore], float], store: ParamStore,
                     h: float = 1e-5, names: list[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every scalar in ``store``.

    Values are perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = float(loss_fn(store))
    again = float(loss_fn(store))
    if base != again:
        raise NonDeterministicLoss(f"loss_fn returned {base!r} then {again!r}")
    out: dict[str, np.ndarray] = {}
    for name in names if names is not None else store.names():
        arr = store[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn(store))
            flat[i] = orig - h
            lm = float(loss_fn(store))
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        out[name] = g
    return out


def gradcheck(loss_and_grad: Callable[[ParamStore], float], store: ParamStore,
              h: float = 1e-5) -> dict[str, float]:
    """Max relative error per tensor between analytic and numeric gradients.

    ``loss_and_grad`` must zero the store's gradients, populate them and
    return the loss.
    """
    loss_and_grad(store)
    analytic = {k: v.copy() for k, v in store.grads().items()}
    numeric = finite_diff_grad(loss_and_grad, store, h=h)
    return {k: float(np.max(rel_error(analytic[k], numeric[k]), initial=0.0)) for k in analytic}


# ---------------------------------------------------------------------------
# snapshots


def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def snapshot_dict(store: ParamStore, header: dict | None = None) -> dict:
    return {
        "format": SNAPSHOT_FORMAT,
        "header": dict(header or {}),
        "step": store.step,
        "params": {k: _encode_array(p.value) for k, p in store.entries.items()},
    }


def store_from_dict(obj: dict) -> tuple[ParamStore, dict]:
    if obj.get("format") != SNAPSHOT_FORMAT:
        raise NumericsError(f"unknown snapshot format {obj.get('format')!r}")
    store = ParamStore(step=int(obj.get("step", 0)))
    for k, enc in obj["params"].items():
        store.add(k, _decode_array(enc))
    return store, obj.get("header", {})


def save_snapshot(path: str | Path, store: ParamStore, header: dict | None = None) -> None:
    Path(path).write_text(json.dumps(snapshot_dict(store, header), indent=1, sort_keys=True))


def load_snapshot(path: str | Path) -> tuple[ParamStore, dict]:
    return store_from_dict(json.loads(Path(path).read_text()))

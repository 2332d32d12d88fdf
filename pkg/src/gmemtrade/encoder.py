"""Denoising + predictive window autoencoder used to fill memory slots.

A single sigmoid hidden layer reads a (corrupted) price window; two linear
heads reconstruct the clean window and predict the following window. The
hidden activation is what goes into the policy's memory.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .env import PriceSeries
from .numerics import ParamStore, adam_step, gaussian_init, make_rng, sigmoid


@dataclass
class WindowConfig:
    window_len: int = 10
    stride: int = 1
    noise_std: float = 0.1
    hidden_dim: int = 25
    predict_weight: float = 1.0

    def validate(self) -> list[str]:
        errs = []
        if self.window_len < 1:
            errs.append("window_len must be >= 1")
        if self.stride < 1:
            errs.append("stride must be >= 1")
        if self.noise_std < 0:
            errs.append("noise_std must be >= 0")
        if self.hidden_dim < 1:
            errs.append("hidden_dim must be >= 1")
        if self.predict_weight < 0:
            errs.append("predict_weight must be >= 0")
        return errs


class ShapeError(ValueError):
    pass


class Encoder:
    """Parameters plus the frozen forward map used at policy time."""

    kind = "encoder"

    def __init__(self, cfg: WindowConfig, params: ParamStore | None = None, seed: int = 0,
                 init_sigma: float = 0.1):
        errs = cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.cfg = cfg
        if params is None:
            rng = make_rng(seed, "encoder/init")
            H, L = cfg.hidden_dim, cfg.window_len
            params = ParamStore()
            params.add("enc_W", gaussian_init((H, L), 0.0, init_sigma, rng))
            params.add("enc_b", gaussian_init((H,), 0.0, init_sigma, rng))
            params.add("dec_W", gaussian_init((L, H), 0.0, init_sigma, rng))
            params.add("dec_b", gaussian_init((L,), 0.0, init_sigma, rng))
            params.add("pred_W", gaussian_init((L, H), 0.0, init_sigma, rng))
            params.add("pred_b", gaussian_init((L,), 0.0, init_sigma, rng))
        self.params = params

    @property
    def dim(self) -> int:
        return self.cfg.hidden_dim

    def header(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg)}

    def encode(self, windows: np.ndarray) -> np.ndarray:
        """Hidden activation for one window (L,) or a stack of windows (N, L)."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.shape[-1] != self.cfg.window_len:
            raise ShapeError(f"window length {windows.shape[-1]} != {self.cfg.window_len}")
        p = self.params
        return sigmoid(windows @ p["enc_W"].T + p["enc_b"])

    def encode_series(self, prices: np.ndarray) -> np.ndarray:
        """Row j encodes the window ending at price index j + window_len - 1."""
        return self.encode(sliding_windows(prices, self.cfg.window_len))

    # -- training ---------------------------------------------------------

    def loss_and_grad(self, noisy: np.ndarray, clean: np.ndarray, nxt: np.ndarray) -> float:
        """Mean-squared reconstruction + weighted prediction loss; fills param grads."""
        p = self.params
        n, L = clean.shape
        w = self.cfg.predict_weight
        h = sigmoid(noisy @ p["enc_W"].T + p["enc_b"])
        rec = h @ p["dec_W"].T + p["dec_b"]
        pred = h @ p["pred_W"].T + p["pred_b"]
        er = rec - clean
        ep = pred - nxt
        loss = float(np.sum(er * er) + w * np.sum(ep * ep)) / (n * L)

        p.zero_grad()
        g_rec = 2.0 * er / (n * L)
        g_pred = 2.0 * w * ep / (n * L)
        p.grad("dec_W")[...] = g_rec.T @ h
        p.grad("dec_b")[...] = g_rec.sum(0)
        p.grad("pred_W")[...] = g_pred.T @ h
        p.grad("pred_b")[...] = g_pred.sum(0)
        dh = g_rec @ p["dec_W"] + g_pred @ p["pred_W"]
        dz = dh * h * (1.0 - h)
        p.grad("enc_W")[...] = dz.T @ noisy
        p.grad("enc_b")[...] = dz.sum(0)
        return loss


def sliding_windows(prices: np.ndarray, window_len: int, stride: int = 1) -> np.ndarray:
    prices = np.asarray(prices, dtype=np.float64)
    if len(prices) < window_len:
        raise ShapeError("series shorter than one window")
    view = np.lib.stride_tricks.sliding_window_view(prices, window_len)
    return view[::stride].copy()


def corrupt(window: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if noise_std == 0:
        return window.copy()
    return window + rng.normal(0.0, noise_std, size=window.shape)


def training_pairs(prices: np.ndarray, cfg: WindowConfig) -> tuple[np.ndarray, np.ndarray]:
    """(window, next window) pairs; the next window starts right after the current one ends."""
    L = cfg.window_len
    if len(prices) < 2 * L:
        raise ValueError(f"series of length {len(prices)} too short for window_len {L}")
    wins = sliding_windows(prices, L)
    idx = np.arange(0, len(prices) - 2 * L + 1, cfg.stride)
    return wins[idx], wins[idx + L]


def train_encoder(series: PriceSeries | np.ndarray, cfg: WindowConfig, epochs: int = 200,
                  lr: float = 0.01, seed: int = 0, batch_size: int = 32,
                  encoder: Encoder | None = None,
                  resample_noise: bool = False) -> tuple[Encoder, list[float]]:
    """Fit an encoder with Adam; returns it with the per-epoch mean training loss.

    By default the corrupted copies are drawn once, so the objective is fixed
    across epochs and the trace is comparable epoch to epoch.
    """
    prices = series.opens if isinstance(series, PriceSeries) else np.asarray(series, dtype=np.float64)
    clean, nxt = training_pairs(prices, cfg)
    enc = encoder if encoder is not None else Encoder(cfg, seed=seed)
    rng = make_rng(seed, "encoder/train")
    n = len(clean)
    trace = []
    noisy = corrupt(clean, cfg.noise_std, rng)
    for _ in range(epochs):
        order = rng.permutation(n)
        if resample_noise:
            noisy = corrupt(clean, cfg.noise_std, rng)
        tot = 0.0
        for lo in range(0, n, batch_size):
            b = order[lo : lo + batch_size]
            tot += enc.loss_and_grad(noisy[b], clean[b], nxt[b]) * len(b)
            if lr > 0:
                adam_step(enc.params, lr)
        trace.append(tot / n)
    return enc, trace

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmemtrade.encoder import (
    Encoder, ShapeError, WindowConfig, corrupt, sliding_windows, train_encoder, training_pairs,
)
from gmemtrade.gradcheck import check_encoder
from gmemtrade.numerics import make_rng


def recon_mse(enc: Encoder, prices: np.ndarray) -> float:
    clean = sliding_windows(prices, enc.cfg.window_len)
    h = enc.encode(clean)
    rec = h @ enc.params["dec_W"].T + enc.params["dec_b"]
    return float(np.mean((rec - clean) ** 2))


def test_corrupt_identity_and_determinism():
    w = np.linspace(0, 1, 10)
    assert np.array_equal(corrupt(w, 0.0, make_rng(0, "c")), w)
    a = corrupt(w, 0.1, make_rng(5, "c"))
    b = corrupt(w, 0.1, make_rng(5, "c"))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, w)


def test_corrupt_noise_level():
    w = np.zeros(10_000)
    noise = corrupt(w, 0.1, make_rng(0, "corrupt-stats"))
    assert 0.095 <= noise.std() <= 0.105


def test_encode_zero_params_gives_half():
    enc = Encoder(WindowConfig(), seed=0)
    for k in enc.params:
        enc.params[k][...] = 0.0
    out = enc.encode(np.random.default_rng(0).uniform(size=10))
    assert out.shape == (25,)
    assert np.all(out == 0.5)


def test_encode_matches_hand_evaluation():
    enc = Encoder(WindowConfig(window_len=4, hidden_dim=3), seed=2)
    x = [0.2, 0.9, 0.4, 0.7]
    W, b = enc.params["enc_W"], enc.params["enc_b"]
    want = []
    for i in range(3):
        z = b[i] + sum(W[i, j] * x[j] for j in range(4))
        want.append(1.0 / (1.0 + math.exp(-z)))
    got = enc.encode(np.array(x))
    np.testing.assert_allclose(got, want, rtol=1e-14)
    assert np.array_equal(got, enc.encode(np.array(x)))


def test_encode_shape_error():
    enc = Encoder(WindowConfig(window_len=5), seed=0)
    with pytest.raises(ShapeError):
        enc.encode(np.zeros(4))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=10, max_size=40))
def test_encode_dim_and_range(prices):
    enc = Encoder(WindowConfig(), seed=1)
    phi = enc.encode_series(np.array(prices))
    assert phi.shape == (len(prices) - 9, 25)
    assert np.all((phi > 0) & (phi < 1))


def test_encode_series_row_alignment():
    enc = Encoder(WindowConfig(window_len=3, hidden_dim=2), seed=0)
    p = np.arange(1, 8) / 10.0
    phi = enc.encode_series(p)
    # row j encodes the window ending at index j + 2
    np.testing.assert_array_equal(phi[4], enc.encode(p[4:7]))


def test_training_pairs_next_window():
    cfg = WindowConfig(window_len=3)
    clean, nxt = training_pairs(np.arange(10.0), cfg)
    assert len(clean) == 5
    np.testing.assert_array_equal(clean[0], [0, 1, 2])
    np.testing.assert_array_equal(nxt[0], [3, 4, 5])
    np.testing.assert_array_equal(nxt[-1], [7, 8, 9])


def test_series_too_short():
    with pytest.raises(ValueError):
        train_encoder(np.ones(19), WindowConfig(window_len=10), epochs=1)


def test_gradcheck_tiny_encoder():
    errs = check_encoder(seed=0)
    assert set(errs) == {"enc_W", "enc_b", "dec_W", "dec_b", "pred_W", "pred_b"}
    assert max(errs.values()) < 1e-4


def test_constant_series_reconstructs():
    prices = np.full(60, 0.8)
    enc, trace = train_encoder(prices, WindowConfig(), epochs=150, lr=0.01, seed=0)
    assert recon_mse(enc, prices) < 1e-3
    assert trace[-1] < trace[0]


def test_lr_zero_is_frozen():
    prices = np.linspace(0.5, 1.0, 40)
    start = Encoder(WindowConfig(), seed=3)
    before = start.params.copy()
    enc, trace = train_encoder(prices, WindowConfig(), epochs=5, lr=0.0, seed=3, encoder=start)
    assert enc.params.same_values(before)
    assert len(set(trace)) == 1


def test_sine_loss_mostly_nonincreasing():
    t = np.arange(300)
    prices = 0.6 + 0.3 * np.sin(2 * np.pi * t / 25.0)
    _, trace = train_encoder(prices, WindowConfig(), epochs=200, lr=0.001, seed=0)
    drops = np.diff(trace) <= 0
    assert drops.mean() >= 0.9


def test_plain_autoencoder_on_two_levels():
    # noise off and no prediction head: a rank-deficient input is recoverable
    cfg = WindowConfig(window_len=4, noise_std=0.0, predict_weight=0.0)
    prices = np.tile([0.3, 0.9], 40)
    enc, _ = train_encoder(prices, cfg, epochs=300, lr=0.01, seed=0)
    assert recon_mse(enc, prices) < 1e-3


def test_training_is_deterministic():
    prices = 0.5 + 0.2 * np.sin(np.arange(80) / 4.0)
    a, ta = train_encoder(prices, WindowConfig(), epochs=5, seed=11)
    b, tb = train_encoder(prices, WindowConfig(), epochs=5, seed=11)
    assert ta == tb and a.params.same_values(b.params)

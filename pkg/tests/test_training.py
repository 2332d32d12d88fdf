import json

import numpy as np
import pytest
from scipy import stats

from gmemtrade.baselines import FCNNConfig, FCNNPolicy
from gmemtrade.env import EnvConfig, PriceSeries, TradingEnv, gen_synthetic, max_normalize
from gmemtrade.gradcheck import check_td
from gmemtrade.numerics import make_rng
from gmemtrade.policy import GMemConfig, GMemPolicy
from gmemtrade.training import (
    BufferUnderfull, EpisodeData, FeatureSeries, PrioritizedBuffer, SumTree, TrainConfig, Trainer,
    Transition, evaluate, sample_batch, td_target, td_targets, write_jsonl,
)

D_O = 4


def tiny_setup(length=60, L=3, horizon=8, seed=0):
    series = max_normalize(gen_synthetic(2, length, amplitude=0.01, seed=seed))
    phi = make_rng(seed, "test/phi").uniform(size=(length - L + 1, D_O))
    feats = FeatureSeries(phi, L)
    env_cfg = EnvConfig(window_len=L, horizon=horizon)
    return series, feats, env_cfg


def small_cfg(**kw):
    base = dict(episodes=6, restarts=2, warmup=16, batch=8, capacity=200, epoch_updates=5,
                lr_period_epochs=2, lr_stop_epochs=4, linear_start_epochs=1, target_update=10,
                val_rollouts=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def make_gmem(seed):
    return GMemPolicy(GMemConfig(hops=2, embed_dim=6, obs_dim=D_O, max_mem=64), seed)


def make_fcnn(seed):
    return FCNNPolicy(FCNNConfig(obs_dim=D_O, hidden=8), seed)


# -- TD targets -----------------------------------------------------------------------


def fake_episodes(rng, n_eps=2, T=6):
    return {e: EpisodeData(rng.normal(size=(T, D_O)), rng.normal(size=(T, 2))) for e in range(n_eps)}


def test_td_target_terminal():
    model = make_gmem(0)
    tr = Transition(0, 3, 1, 3.2, True)
    eps = fake_episodes(make_rng(0, "x"))
    assert td_target(model, tr, eps, model.params, model.params.copy(), 1.0) == 3.2


def test_td_target_gamma_zero():
    model = make_gmem(0)
    eps = fake_episodes(make_rng(0, "x"))
    tr = Transition(1, 2, 0, 0.0, False)
    assert td_target(model, tr, eps, model.params, make_gmem(1).params, 1e-300) == pytest.approx(0.0, abs=1e-250)
    y = td_targets(model, model.params, model.params, None, [0.7], [False], 0.5)
    assert y.tolist() == [0.7]


def test_double_q_reduces_to_max_when_nets_agree():
    model = make_gmem(2)
    eps = fake_episodes(make_rng(1, "y"))
    tr = Transition(0, 1, 2, 0.0, False)
    y = td_target(model, tr, eps, model.params, model.params.copy(), 0.9)
    from gmemtrade.training import prefix_inputs
    q, _ = model.forward_inputs(prefix_inputs(model, eps, [(0, 2)]))
    assert y == pytest.approx(0.9 * q[0].max(), rel=1e-15)


def test_double_q_uses_online_argmax():
    model = make_gmem(3)
    eps = fake_episodes(make_rng(2, "z"))
    from gmemtrade.training import prefix_inputs
    nxt = prefix_inputs(model, eps, [(1, 3)])
    target = make_gmem(4).params
    a_star = int(np.argmax(model.forward_inputs(nxt)[0][0]))
    q_t = model.forward_inputs(nxt, params=target)[0][0]
    y = td_targets(model, model.params, target, nxt, [0.1], [False], 1.0)
    assert y[0] == 0.1 + q_t[a_star]


def test_td_loss_gradcheck():
    assert max(check_td(0).values()) < 1e-4
    assert max(check_td(1, linear_start=True).values()) < 1e-4


# -- prioritized replay ---------------------------------------------------------------


def draw(buf, n, beta, rng):
    # batches never exceed the buffer size, so draw in buffer-sized chunks
    idx, w = [], []
    for _ in range(n // len(buf)):
        i, _, wi = buf.sample(len(buf), beta, rng)
        idx.append(i)
        w.append(wi)
    return np.concatenate(idx), np.concatenate(w)


def fill(buf, n):
    for i in range(n):
        buf.add(Transition(0, i, 0, 0.0, False))


def test_sum_tree_total_and_find():
    tree = SumTree(5)
    tree.set(np.arange(5), [1.0, 2.0, 3.0, 4.0, 5.0])
    assert tree.total == 15.0
    assert tree.find(np.array([0.0, 0.99, 1.0, 2.999, 3.0, 14.99])).tolist() == [0, 0, 1, 1, 2, 4]


def test_uniform_priorities_sample_uniformly():
    buf = PrioritizedBuffer(10)
    fill(buf, 10)
    idx, w = draw(buf, 100_000, 0.4, make_rng(0, "chi"))
    counts = np.bincount(idx, minlength=10)
    assert stats.chisquare(counts).pvalue > 0.01
    assert np.all(w == 1.0)


def test_alpha_zero_is_uniform():
    buf = PrioritizedBuffer(10, alpha=0.0)
    for i in range(10):
        buf.add(Transition(0, i, 0, 0.0, False), priority=float(i + 1) ** 3)
    idx, _ = draw(buf, 100_000, 0.4, make_rng(1, "chi"))
    assert stats.chisquare(np.bincount(idx, minlength=10)).pvalue > 0.01


def test_priority_ratio_one_to_three():
    buf = PrioritizedBuffer(2, alpha=1.0)
    buf.add(Transition(0, 0, 0, 0.0, False), priority=1.0)
    buf.add(Transition(0, 1, 0, 0.0, False), priority=3.0)
    idx, w = draw(buf, 100_000, 1.0, make_rng(2, "ratio"))
    c = np.bincount(idx, minlength=2)
    assert c[1] / c[0] == pytest.approx(3.0, rel=0.05)
    # weights (N P)^-beta normalized by the max
    assert set(np.round(w, 12)) <= {1.0, round(1 / 3, 12)}


def test_alpha_ratio_matches_power():
    buf = PrioritizedBuffer(3, alpha=0.6)
    for p in (1.0, 2.0, 5.0):
        buf.add(Transition(0, 0, 0, 0.0, False), priority=p)
    idx, _ = draw(buf, 100_000, 0.4, make_rng(3, "pow"))
    freq = np.bincount(idx, minlength=3) / 100_000
    want = np.array([1.0, 2.0, 5.0]) ** 0.6
    np.testing.assert_allclose(freq, want / want.sum(), rtol=0.05)


def test_priority_update_touches_only_sampled():
    buf = PrioritizedBuffer(8)
    fill(buf, 8)
    before = buf.priorities.copy()
    idx = np.array([1, 5])
    buf.update_priorities(idx, np.array([-0.3, 2.0]))
    np.testing.assert_array_equal(buf.priorities[idx], [0.3 + 1e-6, 2.0 + 1e-6])
    others = np.setdiff1d(np.arange(8), idx)
    np.testing.assert_array_equal(buf.priorities[others], before[others])
    np.testing.assert_allclose(buf.probabilities()[5] / buf.probabilities()[0], (2.0 + 1e-6) ** 0.6)


def test_underfull_buffer():
    buf = PrioritizedBuffer(8)
    fill(buf, 3)
    with pytest.raises(BufferUnderfull):
        sample_batch(buf, 4, 0.4, seed=0)


def test_sample_batch_seeded():
    buf = PrioritizedBuffer(20)
    fill(buf, 20)
    a = sample_batch(buf, 8, 0.5, seed=7)
    b = sample_batch(buf, 8, 0.5, seed=7)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[2], b[2])


# -- schedules ------------------------------------------------------------------------


def test_lr_halving_boundaries():
    cfg = TrainConfig(lr=0.001, epoch_updates=100, lr_period_epochs=30, lr_stop_epochs=100)
    assert cfg.lr_at(0) == 0.001
    assert cfg.lr_at(2999) == 0.001
    assert cfg.lr_at(3000) == 0.0005
    assert cfg.lr_at(5999) == 0.0005
    assert cfg.lr_at(6000) == 0.00025
    assert cfg.lr_at(9000) == 0.000125
    # no further halving past the stop point
    assert cfg.lr_at(10_000) == cfg.lr_at(10**7) == 0.000125


def test_linear_start_flips_once():
    cfg = TrainConfig(epoch_updates=100, linear_start_epochs=30)
    flags = [cfg.linear_start_at(u) for u in range(6000)]
    assert flags.index(False) == 3000
    assert sum(a != b for a, b in zip(flags, flags[1:])) == 1


def test_temperature_and_beta_anneal():
    cfg = TrainConfig()
    assert cfg.temperature_at(0.0) == 1.0 and cfg.temperature_at(1.0) == pytest.approx(0.1)
    assert cfg.beta_at(0.0) == 0.4 and cfg.beta_at(2.0) == 1.0


def test_config_validation():
    errs = TrainConfig(batch=0, gamma=0.0, lr=-1).validate()
    assert len(errs) == 3


# -- trainer --------------------------------------------------------------------------


def test_target_syncs_every_interval():
    series, feats, env_cfg = tiny_setup()
    seen = []

    def hook(r, steps, updates, online, target):
        if steps % 10 == 0:
            seen.append(steps)
            assert target.same_values(online)

    Trainer(make_gmem, series, feats, env_cfg, small_cfg(), train_end=50, hook=hook).train()
    assert len(seen) == 2 * (6 * 8 // 10)


def test_episodes_zero_returns_initial():
    series, feats, env_cfg = tiny_setup()
    res = Trainer(make_gmem, series, feats, env_cfg, small_cfg(episodes=0, restarts=1), train_end=50).train()
    fresh = make_gmem(Trainer(make_gmem, series, feats, env_cfg, small_cfg(), train_end=50)._restart_seed(0))
    assert res.params.same_values(fresh.params)


def test_lr_zero_keeps_initial():
    series, feats, env_cfg = tiny_setup()
    tr = Trainer(make_fcnn, series, feats, env_cfg, small_cfg(lr=0.0, restarts=1), train_end=50)
    res = tr.train()
    assert res.best.updates > 0
    assert res.params.same_values(make_fcnn(tr._restart_seed(0)).params)


def test_divergence_guard_aborts():
    series, feats, env_cfg = tiny_setup()
    cfg = small_cfg(restarts=1, divergence_limit=1e-12)
    res = Trainer(make_fcnn, series, feats, env_cfg, cfg, train_end=50).train()
    assert res.best.aborted
    assert res.log[-1]["aborted"]


def test_training_is_deterministic(tmp_path):
    series, feats, env_cfg = tiny_setup()
    runs = []
    for i in range(2):
        res = Trainer(make_gmem, series, feats, env_cfg, small_cfg(), train_end=50).train()
        write_jsonl(res.log, tmp_path / f"log{i}.jsonl")
        runs.append(res)
    assert (tmp_path / "log0.jsonl").read_bytes() == (tmp_path / "log1.jsonl").read_bytes()
    assert runs[0].params.same_values(runs[1].params)
    assert runs[0].best.restart == runs[1].best.restart


def test_training_log_records():
    series, feats, env_cfg = tiny_setup()
    res = Trainer(make_fcnn, series, feats, env_cfg, small_cfg(restarts=1), train_end=50).train()
    assert len(res.log) == 6
    rec = res.log[0]
    assert {"episode", "terminal_reward", "temperature", "lr", "steps", "aborted"} <= set(rec)
    json.dumps(res.log)


def test_trainer_rejects_short_window():
    series, feats, env_cfg = tiny_setup(horizon=40)
    with pytest.raises(ValueError):
        Trainer(make_fcnn, series, feats, env_cfg, small_cfg(), train_end=40)


# -- evaluation -----------------------------------------------------------------------


def test_greedy_eval_has_zero_std():
    series, feats, env_cfg = tiny_setup()
    model = make_gmem(0)
    rep = evaluate(model, model.params, TradingEnv(env_cfg, series), feats, 10, 5, 0.0, seed=1)
    assert rep.ratio_std == 0.0 and rep.budget_std == 0.0 and rep.rollouts == 5


def test_constant_series_budget_never_grows():
    L, T = 3, 20
    series = PriceSeries("flat", [f"d{i}" for i in range(30)], np.full(30, 0.9))
    feats = FeatureSeries(make_rng(0, "flat").uniform(size=(30 - L + 1, D_O)), L)
    env_cfg = EnvConfig(window_len=L, horizon=T)
    for seed in range(3):
        model = make_fcnn(seed)
        rep = evaluate(model, model.params, TradingEnv(env_cfg, series), feats, L, 4, 1.0, seed=seed)
        assert rep.budget_mean <= env_cfg.initial_cash


def test_report_matches_log_replay():
    series, feats, env_cfg = tiny_setup()
    model = make_gmem(1)
    logs = []
    rep = evaluate(model, model.params, TradingEnv(env_cfg, series), feats, 10, 6, 1.0, seed=2, logs=logs)
    ratios, budgets = [], []
    for log in logs:
        worths = [rec.net_worth for rec in log]
        ratios.append(np.mean(np.array(worths) > env_cfg.initial_cash))
        budgets.append(worths[-1])
    assert rep.ratio_mean == pytest.approx(np.mean(ratios), abs=1e-15)
    assert rep.budget_mean == pytest.approx(np.mean(budgets), rel=1e-15)
    assert rep.budget_std == pytest.approx(np.std(budgets), rel=1e-12, abs=1e-15)


def test_eval_requires_rollouts():
    series, feats, env_cfg = tiny_setup()
    model = make_fcnn(0)
    with pytest.raises(ValueError):
        evaluate(model, model.params, TradingEnv(env_cfg, series), feats, 10, 0, 0.1, seed=0)


def test_feature_standardization_uses_fit_rows_only():
    phi = np.vstack([np.ones((5, 2)) * [1.0, 2.0] + np.arange(5)[:, None], np.full((3, 2), 100.0)])
    fs = FeatureSeries.standardized(phi, 1, fit_rows=5)
    np.testing.assert_allclose(fs.phi[:5].mean(0), 0.0, atol=1e-15)
    np.testing.assert_allclose(fs.phi[:5].std(0), 1.0)
    again = FeatureSeries(phi, 1, **{k: np.array(v) for k, v in fs.transform_json().items()})
    assert again.phi.tobytes() == fs.phi.tobytes()
    with pytest.raises(ValueError):
        fs.for_episode(0, 3)

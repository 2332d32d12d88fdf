import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from gmemtrade.bench import ConfigError, REPORT_COLUMNS, config_from_dict
from gmemtrade.cli import main
from gmemtrade.env import EnvConfig, TradingEnv, load_csv, move_directions, rollout_actions
from gmemtrade.numerics import load_snapshot, make_rng

SCHEMA = json.loads(
    (__import__("importlib.resources").resources.files("gmemtrade") / "schemas" / "bench_report.schema.json")
    .read_text()
)

TINY = {
    "window": {"window_len": 3, "hidden_dim": 4},
    "env": {"window_len": 3, "horizon": 10},
    "train": {"episodes": 3, "restarts": 2, "warmup": 16, "batch": 8, "capacity": 500,
              "val_rollouts": 2, "target_update": 10},
    "synthetic": [{"order_k": 2, "length": 60, "amplitude": 0.01, "seed": 1}],
    "train_days": 45,
    "train_horizon": 12,
    "encoder_epochs": 4,
    "eval_rollouts": 3,
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture
def series_csv(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["synth", "--order", "2", "--length", "60", "--amplitude", "0.01", "--seed", "1",
                 "--out", str(out)]) == 0
    return out


def test_missing_series_exit_code_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    code = main(["encode", "--series", str(missing), "--out", str(tmp_path / "o")])
    assert code == 1
    assert str(missing) in capsys.readouterr().err


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gmemtrade.cli", "encode", "--series", str(tmp_path / "x.csv")],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "x.csv" in r.stderr


def test_config_errors_are_enumerated():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"train": {"bogus": 1}, "env": {"nope": 2}})
    assert exc.value.errors == ["env.nope: unknown field", "train.bogus: unknown field"]
    cfg = config_from_dict({"train": {"batch": 0}, "model": "gru", "eval_rollouts": 0})
    errs = cfg.validate(need_files=False)
    assert any("batch" in e for e in errs)
    assert any("gru" in e for e in errs)
    assert any("eval_rollouts" in e for e in errs)


def test_overrides_win():
    cfg = config_from_dict(TINY, ["train.episodes=7", "seed=5", "standardize=true"])
    assert cfg.train.episodes == 7 and cfg.seed == 5 and cfg.standardize is True
    with pytest.raises(ConfigError):
        config_from_dict(TINY, ["train.episodes=many"])


def test_encode_artifacts(tmp_path, tiny_config, series_csv):
    out = tmp_path / "enc"
    assert main(["encode", "-c", str(tiny_config), "--set", "synthetic=", "--series", str(series_csv),
                 "--out", str(out)]) == 0
    store, header = load_snapshot(out / "encoder.json")
    assert header["window_len"] == 3 and header["seed"] == 0 and "config" in header
    rows = (out / "encoder_loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss" and len(rows) - 1 == TINY["encoder_epochs"]
    # snapshot round trip
    again, _ = load_snapshot(out / "encoder.json")
    assert again.same_values(store)


def test_train_then_eval(tmp_path, tiny_config, series_csv):
    enc = tmp_path / "enc"
    pol = tmp_path / "pol"
    common = ["-c", str(tiny_config), "--set", "synthetic=", "--series", str(series_csv)]
    assert main(["encode", *common, "--out", str(enc)]) == 0
    assert main(["train", *common, "--encoder", str(enc / "encoder.json"), "--model", "fcnn",
                 "--out", str(pol)]) == 0
    _, header = load_snapshot(pol / "policy.json")
    assert header["kind"] == "fcnn" and header["command"] == "train"
    assert len((pol / "train_log.jsonl").read_text().splitlines()) == 2 * 3
    ev = tmp_path / "ev"
    assert main(["eval", *common, "--encoder", str(enc / "encoder.json"),
                 "--policy", str(pol / "policy.json"), "--out", str(ev)]) == 0
    rep = json.loads((ev / "eval_report.json").read_text())
    assert rep["rollouts"] == 3 and 0 <= rep["ratio_mean"] <= 1
    assert rep["oracle_profit"] >= rep["reward_mean"] - 1e-12
    assert len((ev / "episode_log.jsonl").read_text().splitlines()) == 10


def test_bench_rows_schema_and_rerun(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["bench", "-c", str(tiny_config), "--out", str(a)]) == 0
    assert main(["bench", "-c", str(tiny_config), "--out", str(b)]) == 0
    rep = json.loads((a / "bench.json").read_text())
    jsonschema.validate(rep, SCHEMA)
    assert [r["model"] for r in rep["rows"]] == ["gmemn2n", "fcnn"]
    assert tuple(rep["columns"]) == REPORT_COLUMNS
    # provenance differs only in out_dir
    ja, jb = json.loads((a / "bench.json").read_text()), json.loads((b / "bench.json").read_text())
    ja["config"].pop("out_dir"), jb["config"].pop("out_dir")
    assert ja == jb
    assert (a / "bench.txt").read_bytes() == (b / "bench.txt").read_bytes()
    head = (a / "bench.txt").read_text().splitlines()[0].split()
    assert head == ["series", "model", "ratio", "budget"]
    assert "±" in (a / "bench.txt").read_text().splitlines()[2]


def test_schema_rejects_bad_report():
    bad = {"format": "gmemtrade-bench/1", "seed": 0, "config": {}, "columns": list(REPORT_COLUMNS),
           "rows": [{"series": "s", "model": "gru"}]}
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, SCHEMA)


@pytest.mark.parametrize("kind", ["gmemn2n", "memn2n", "fcnn", "lstm", "encoder", "td"])
def test_gradcheck_passes(kind, capsys):
    assert main(["gradcheck", "--model", kind]) == 0
    out = capsys.readouterr().out
    assert out and all(line.startswith("PASS") for line in out.splitlines())


def test_gradcheck_corruption_names_tensor(capsys):
    assert main(["gradcheck", "--model", "gmemn2n", "--corrupt", "gate_W_1"]) == 1
    cap = capsys.readouterr()
    assert "gate_W_1" in cap.err
    fails = [line for line in cap.out.splitlines() if line.startswith("FAIL")]
    assert fails and all("gate_W_1" in line for line in fails)


def test_gradcheck_repeatable(capsys):
    main(["gradcheck", "--model", "lstm", "--seed", "4"])
    first = capsys.readouterr().out
    main(["gradcheck", "--model", "lstm", "--seed", "4"])
    assert capsys.readouterr().out == first


def test_synth_order_one_alternates(tmp_path):
    out = tmp_path / "o1.csv"
    assert main(["synth", "--order", "1", "--length", "100", "--out", str(out)]) == 0
    d = move_directions(load_csv(out))
    assert np.all(d[1:] != d[:-1])
    assert load_csv(out).opens.max() == 1.0


def test_synth_bad_args():
    assert main(["synth", "--order", "0", "--out", "x.csv"]) == 1


def test_oracle_constant_series(tmp_path, capsys):
    p = tmp_path / "flat.csv"
    p.write_text("date,open\n" + "".join(f"2020-02-{i + 1:02d},0.5\n" for i in range(20)))
    assert main(["oracle", "--series", str(p), "--window-len", "3"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["optimum"] == 0.0 and set(res["actions"]) == {"HOLD"}


def test_oracle_beats_random_rollouts(tmp_path, series_csv, capsys):
    out = tmp_path / "o.json"
    assert main(["oracle", "--series", str(series_csv), "--window-len", "3", "--start", "10",
                 "--horizon", "40", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    env = TradingEnv(EnvConfig(window_len=3, horizon=40), load_csv(series_csv))
    rng = make_rng(0, "oracle-cli")
    for _ in range(100):
        assert rollout_actions(env, 10, list(rng.choice(env.actions, size=40))) <= res["optimum"]


def test_oracle_rejects_short_series(tmp_path, series_csv):
    assert main(["oracle", "--series", str(series_csv), "--start", "50", "--horizon", "40"]) == 1

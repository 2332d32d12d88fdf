"""Memory-necessity benchmark: gated memory network vs memoryless MLP on an order-2 series.

    python3 scripts/memory_benchmark.py [--out runs/memory] [--set train.restarts=3 ...]

Writes memory_bench.json (oracle, per-model greedy test reward, per-restart
rewards, timings) and prints the three pass/fail checks.
"""
import argparse
import time
from pathlib import Path

from gmemtrade.bench import dumps, memory_bench_config, run_memory_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/memory")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    cfg = memory_bench_config(args.set)
    t0 = time.perf_counter()
    res = run_memory_bench(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {**res.to_json(), "config": cfg.to_json(), "minutes": (time.perf_counter() - t0) / 60}
    (out / "memory_bench.json").write_text(dumps(payload))
    print(f"oracle {res.oracle:.6g}")
    for kind, r in res.rewards.items():
        print(f"{kind:8s} test reward {r:.6g}  ({r / res.oracle:.1%} of oracle)")
    for name, ok in res.checks().items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")


if __name__ == "__main__":
    main()

"""Oracle profit and parity-predictor accuracy as the series order grows.

    python3 scripts/sweep_order.py

No training: shows how much history each order needs and what is at stake.
"""

from gmemtrade.env import EnvConfig, gen_synthetic, max_normalize, move_directions, oracle_profit


def lookup_accuracy(dirs, k):
    table = {}
    for t in range(k, len(dirs)):
        table.setdefault(tuple(dirs[t - k:t]), []).append(int(dirs[t]))
    return sum(max(v.count(0), v.count(1)) for v in table.values()) / (len(dirs) - k)


def main():
    print("order  oracle(test 100d)  acc(k-1)  acc(k)")
    for k in range(1, 5):
        s = max_normalize(gen_synthetic(k, 300, 0.005, seed=0))
        orc = oracle_profit(s, EnvConfig(window_len=1, horizon=100, initial_cash=1.0), 200).profit
        d = move_directions(s)
        print(f"{k:5d}  {orc:17.6f}  {lookup_accuracy(d, k - 1):8.3f}  {lookup_accuracy(d, k):6.3f}")


if __name__ == "__main__":
    main()

"""Compare trained branch moments with Monte Carlo oracle moments on (user, duration-bin) cohorts.

    python scripts/moment_recovery.py --interactions 200000 --steps 20000
"""

import argparse
import time

import numpy as np

from mbdlab.mbd import DURATION_DEBIAS, BranchConfig, build_branch, train_branch
from mbdlab.ranker import build_ranker, train
from mbdlab.synthenv import GeneratorConfig, generate_world, oracle_conditional_stats


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--interactions", type=int, default=200_000)
    ap.add_argument("--users", type=int, default=20)
    ap.add_argument("--items", type=int, default=1_000_000)
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--trunk", type=int, nargs="+", default=[64, 64])
    ap.add_argument("--bins", type=int, default=10)
    ap.add_argument("--min-cohort", type=int, default=1000)
    ap.add_argument("--mc", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.perf_counter()
    cfg = GeneratorConfig(n_interactions=args.interactions, n_users=args.users, n_items=args.items,
                          photo_fraction=0.0, seed=args.seed)
    world = generate_world(cfg)
    data = world.data
    ranker = build_ranker(data)
    train(ranker, data)
    branch = build_branch(BranchConfig("watch_time", DURATION_DEBIAS, steps=args.steps, trunk=tuple(args.trunk)),
                          ranker)
    train_branch(branch, ranker, data)
    print(f"trained in {time.perf_counter() - t0:.0f}s")

    edges = np.exp(np.linspace(np.log(2.0), np.log(600.0), args.bins + 1))
    bins = np.clip(np.digitize(data.col("item_duration"), edges[1:-1]), 0, args.bins - 1)
    users = world.users
    print("user  bin      n  oracle_mu  branch_mu  oracle_var  branch_var  mu_err  var_err")
    errs = []
    for u in range(cfg.n_users):
        for k in range(args.bins):
            n = int(np.sum((data.user_id == u) & (bins == k)))
            if n < args.min_cohort:
                continue
            ctx = {"user_patience": users.patience[u], "user_activity": users.activity[u],
                   "user_like_threshold": users.like_threshold[u], "user_region": "B" if users.region_b[u] else "A",
                   "user_taste": users.taste[u], "item_duration_range": (edges[k], edges[k + 1])}
            o = oracle_conditional_stats(cfg, ctx, "watch_time", args.mc, seed=7,
                                         predictor=lambda X: ranker.raw_outputs(X)["watch_time"])
            mu = oracle_conditional_stats(cfg, ctx, "watch_time", args.mc, seed=7,
                                          predictor=lambda X: branch.estimate_features(X).mu)
            var = oracle_conditional_stats(cfg, ctx, "watch_time", args.mc, seed=7,
                                           predictor=lambda X: branch.estimate_features(X).var)
            bvar = var.mean + mu.variance
            e = (abs(mu.mean - o.mean) / abs(o.mean), abs(bvar - o.variance) / o.variance)
            errs.append(e)
            print(f"{u:4d} {k:4d} {n:6d} {o.mean:10.4f} {mu.mean:10.4f} {o.variance:11.4f} {bvar:11.4f} "
                  f"{e[0]:7.3f} {e[1]:8.3f}")
    errs = np.array(errs)
    print(f"{len(errs)} cohorts; max mu err {errs[:, 0].max():.3f}; max var err {errs[:, 1].max():.3f}; "
          f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()

"""Signal-quality and duration-correlation tables on the default synthetic world.

Trains the default ranker and one duration branch per task, then prints the
held-out NLL/alignment metrics and rho(signal, duration) for each signal.

    python scripts/signal_tables.py
"""

import argparse

import numpy as np

from mbdlab import evaluation as ev
from mbdlab import signals as sig
from mbdlab.cli import EvalConfig, item_average
from mbdlab.mbd import DURATION_DEBIAS, BranchConfig, build_branch, train_branch
from mbdlab.ranker import build_ranker, train
from mbdlab.synthenv import GeneratorConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=10_000)
    args = ap.parse_args()

    data = generate(GeneratorConfig(seed=args.seed))
    train_set, test_set = data.split(0.2, args.seed)
    ranker = build_ranker(train_set)
    train(ranker, train_set)
    pred = ranker.predict(test_set.X)
    dur_tr, dur = train_set.col("item_duration"), test_set.col("item_duration")
    edges = np.exp(np.linspace(np.log(2.0), np.log(600.0), 11))

    signals = {}
    print("task        nll_mbd  nll_cluster  rho_p_mu  rho_sigma_buckets")
    for task in ("watch_time", "like", "loop"):
        spec = ranker.task(task)
        branch = build_branch(BranchConfig(task, DURATION_DEBIAS, steps=args.steps), ranker)
        train_branch(branch, ranker, train_set)
        keep_tr = spec.observed(train_set.columns, train_set.X)
        keep = spec.observed(test_set.columns, test_set.X)
        p = branch.signal_from_prediction(pred)
        est = branch.estimate_features(test_set.X)
        y_tr = ev.transformed_labels(train_set.label(task)[keep_tr], spec.kind, branch.space, spec.transform)
        y_te = ev.transformed_labels(test_set.label(task)[keep], spec.kind, branch.space, spec.transform)
        c_mu, c_var = ev.cluster_baseline(dur_tr[keep_tr], y_tr, 3).stats(dur[keep])
        rep = ev.signal_quality(p[keep], type(est)(est.mu[keep], est.var[keep]), c_mu, c_var,
                                attribute=dur[keep], align_edges=edges, align_labels=y_te)
        v = {k: rep.value(k) for k in ("nll_mbd", "nll_cluster", "rho_p_mu", "rho_sigma_buckets")}
        print(f"{task:10s} {v['nll_mbd']:8.3f} {v['nll_cluster']:12.3f} {v['rho_p_mu']:9.3f} "
              f"{v['rho_sigma_buckets']:18.3f}")
        s = {"y": test_set.label(task), "p": pred[task], "rps": sig.rps(p, est.mu, est.sigma)}
        signals[task] = {k: np.where(keep, x, np.nan) for k, x in s.items()}

    table = sig.build_bucket_table(dur_tr, train_set.watch_time, EvalConfig().vvp_edges)
    pred_s = np.expm1(pred["watch_time"])
    signals["watch_time"]["vvp95_predicted"] = sig.vvp95(pred_s, table, dur)
    signals["watch_time"]["vvp95_realized"] = sig.vvp95(test_set.watch_time, table, dur)
    signals["watch_time"]["vvp95_nts"] = signals["watch_time"]["vvp95_predicted"] * sig.nts(
        pred_s, 0.0, item_average(train_set, test_set), 0.1)
    print("\ntask        signal            rho(signal, duration)")
    for row in ev.debias_correlation_report(dur, signals).series["rows"]:
        rho = "undefined" if row["rho"] is None else f"{row['rho']:+.4f}"
        print(f"{row['task']:10s}  {row['signal']:16s}  {rho}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Sweep the weight-reduction strength and print the fairness/accuracy
trade-off on the biased test split.

alpha = 1 keeps the trained model, alpha = 0 removes the group offsets
entirely; intermediate values interpolate. Deltas are relative to the
untouched model.
"""

import argparse

import numpy as np

from ctrbias.debias import reduce_weights
from ctrbias.evaluation import evaluate
from ctrbias.models import predict
from ctrbias.synth import SynthConfig, generate
from ctrbias.training import TrainConfig, train


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--users", type=int, default=2500)
    p.add_argument("--items", type=int, default=1200)
    p.add_argument("--groups", type=int, default=12)
    p.add_argument("--exposures-per-user", type=int, default=104)
    p.add_argument("--pref-scale", type=float, default=1.5)
    p.add_argument("--item-offset-scale", type=float, default=0.4)
    p.add_argument("--temp-high", type=float, default=4.0)
    p.add_argument("--arch", choices=("fm", "nfm"), default="fm")
    p.add_argument("--embedding-dim", type=int, default=16)
    p.add_argument("--l2", type=float, default=1.5e-4)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--alphas", default="1.0,0.8,0.6,0.4,0.2,0.0",
                   help="comma-separated reduction strengths")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    return p.parse_args()


def main():
    args = parse_args()
    alphas = [float(v) for v in args.alphas.split(",") if v.strip()]
    scfg = SynthConfig(
        n_users=args.users, n_items=args.items, n_groups=args.groups,
        rho=tuple(np.linspace(0.1, 0.9, args.groups)),
        exposures_per_user=args.exposures_per_user,
        pref_scale=args.pref_scale,
        item_offset_scale=args.item_offset_scale,
        temp_high=args.temp_high,
        seed=args.seed,
    )
    res = generate(scfg)
    tcfg = TrainConfig(arch=args.arch, embedding_dim=args.embedding_dim,
                       l2=args.l2, max_epochs=args.max_epochs,
                       seed=args.seed + 1)
    params, report = train(res.train, res.val, tcfg)
    print(f"trained {args.arch}: {report.epochs_run} epochs, "
          f"best val UAUC {report.best_val_uauc:.4f}")

    print(f"\nbiased test split, k={args.k}:")
    print(f"  {'alpha':>6s} {'UAUC':>8s} {'dUAUC':>8s} "
          f"{'NDCG':>8s} {'dNDCG':>8s} {'REO':>8s} {'dREO':>8s}")
    base = None
    for alpha in alphas:
        reduced = reduce_weights(params, res.schema.bias_range, alpha)
        scores = predict(reduced, res.test.indices, res.test.values)
        rep = evaluate(res.test, scores, k=args.k)
        if base is None:
            base = rep

        def delta(a, b):
            if a is None or b is None or b == 0:
                return "     n/a"
            return f"{(a - b) / b:+8.2%}"

        print(f"  {alpha:6.2f} {rep.uauc:8.4f} {delta(rep.uauc, base.uauc)} "
              f"{rep.ndcg:8.4f} {delta(rep.ndcg, base.ndcg)} "
              f"{rep.reo if rep.reo is not None else float('nan'):8.4f} "
              f"{delta(rep.reo, base.reo)}")


if __name__ == "__main__":
    main()

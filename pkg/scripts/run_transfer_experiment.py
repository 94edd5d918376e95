"""Desk-scale transfer matrix with paired sign tests against each baseline.

    python scripts/run_transfer_experiment.py configs/transfer.yaml --out runs/transfer

Trains (or loads) the toy models named in the config, runs every recipe, and
for each "<base>+RAP..." recipe reports the paired comparison with <base>.
"""
import argparse
import math
import time
from pathlib import Path

import numpy as np

from rapattack.cli import load_images, resolve_models, surrogate_handles
from rapattack.config import load_config
from rapattack.evaluation import run_matrix


def sign_test(wins, losses):
    n = wins + losses
    return 1.0 if n == 0 else sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[])
    args = p.parse_args()
    overrides = args.set + ([f"output_dir={args.out}"] if args.out else [])
    cfg = load_config(args.config, overrides)
    out = Path(cfg.output_dir)

    t0 = time.perf_counter()
    res = run_matrix(surrogate_handles(cfg), resolve_models(cfg, cfg.targets), cfg.recipes, load_images(cfg),
                     cfg.attack, cfg.seeds, cfg.batch_size, out, cfg.workers)
    res.curves_csv(out)
    print(f"matrix done in {time.perf_counter() - t0:.0f}s -> {out / 'results.csv'}")

    final = cfg.attack.K
    mode = cfg.attack.loss.mode
    for (sur, tgt, rec, cp, m), rate in sorted(res.rates.items()):
        if cp == final:
            print(f"{sur:>10s} -> {tgt:<8s} {rec:<14s} {rate:6.1f}%")
    for rec in cfg.recipes:
        base = rec.split("+")[0]
        if "+" not in rec or base not in cfg.recipes:
            continue
        for sur in {k[0] for k in res.rates}:
            for tgt in cfg.targets:
                for seed in cfg.seeds:
                    r = np.array(res.per_image[(sur, tgt, rec, final, mode, seed)])
                    b = np.array(res.per_image[(sur, tgt, base, final, mode, seed)])
                    wins, losses = int(((r == 1) & (b == 0)).sum()), int(((r == 0) & (b == 1)).sum())
                    print(f"{rec} vs {base} on {tgt} (seed {seed}): {r.mean():.1%} vs {b.mean():.1%}, "
                          f"+{wins}/-{losses}, one-sided sign test p={sign_test(wins, losses):.4f}")


if __name__ == "__main__":
    main()

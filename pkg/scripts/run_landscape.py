"""Two-basin landscape: where do RAP and plain sign descent end up?

Prints basin fractions for 100 seeded starts and writes endpoint flatness
profiles to CSV.

    python scripts/run_landscape.py --out runs/landscape
"""
import argparse
from pathlib import Path

import numpy as np

from rapattack import LossSpec, RAPConfig, rap_attack
from rapattack.flatness import flatness_profile, write_profile_csv
from rapattack.landscape import FLAT, SHARP, BasinOracle, TwoBasinLandscape
from rapattack.pipelines import PipelineSpec


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/landscape")
    p.add_argument("--starts", type=int, default=100)
    p.add_argument("--epsilon-n", type=float, default=0.12)
    p.add_argument("--seed", type=int, default=2022)
    args = p.parse_args()

    land = TwoBasinLandscape()
    oracle = BasinOracle(land)
    starts = np.random.default_rng(args.seed).uniform(0, 1, (args.starts, 2))
    batch = land.batch(starts)
    loss = LossSpec("logit", "targeted")
    cfg = RAPConfig(epsilon=1.0, alpha=0.005, K=400, K_LS=0, epsilon_n=args.epsilon_n, alpha_n=args.epsilon_n / 4,
                    T=8, loss=loss, checkpoints=())
    ends = {
        "baseline": rap_attack(land.model(), batch, PipelineSpec(), cfg.replace(epsilon_n=0.0), 0).x_adv,
        "rap": rap_attack(land.model(), batch, PipelineSpec(), cfg, 0).x_adv,
    }
    start = oracle.basin_of(starts)
    print(f"starts in the sharp basin: {(start == SHARP).mean():.0%}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mags = np.linspace(0, args.epsilon_n, 13).tolist()
    for name, x in ends.items():
        basin = oracle.basin_of(x.reshape(-1, 2).numpy())
        print(f"{name:9s} flat {(basin == FLAT).mean():.0%}  sharp {(basin == SHARP).mean():.0%}")
        prof = flatness_profile(land.model(), x, batch.targets, loss, mags, 20)
        write_profile_csv(prof, out / f"profile_{name}.csv")
        print(f"{'':9s} profile area {prof.area():.5f}")


if __name__ == "__main__":
    main()

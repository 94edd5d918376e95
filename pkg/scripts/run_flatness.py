"""Flatness profiles of adversarial examples for the recipes in a config.

    python scripts/run_flatness.py configs/transfer.yaml --out runs/flatness --plot
"""
import argparse
import sys

from rapattack import cli


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true")
    args = p.parse_args()
    argv = ["flatness", "--config", args.config] + (["--out", args.out] if args.out else []) + (["--plot"] if args.plot else [])
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: attack, evaluate, ablate, flatness, train-toy."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .batch import ImageBatch
from .config import ExperimentConfig, dump_config, load_config
from .core import expected_pass_count, rap_attack
from .data import attack_set, toy_splits
from .errors import InvalidConfigError
from .evaluation import (ResultMatrix, atomic_write, digest, load_dataset, run_matrix)
from .flatness import compare_profiles, flatness_profile, write_profile_csv
from .models import Ensemble, ModelStore
from .remote import encode_png

log = logging.getLogger("rapattack")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def config_hash(cfg: ExperimentConfig) -> str:
    return digest(cfg.to_dict())


def resolve_models(cfg: ExperimentConfig, names=None) -> dict:
    """Load every model in ``names`` from the store, training those that are missing."""
    store = ModelStore(cfg.model_store)
    splits = None

    def dataset():
        nonlocal splits
        if splits is None:
            splits = toy_splits(cfg.world, cfg.train.get("n_train", 6000), cfg.train.get("n_test", 1000),
                                cfg.train.get("seed", 0))
        return splits

    names = sorted(cfg.models) if names is None else names
    return {n: store.get_or_train(n, cfg.models[n], dataset) for n in names}


def surrogate_handles(cfg: ExperimentConfig) -> dict:
    needed = sorted({m for s in cfg.surrogates for m in ([s] if isinstance(s, str) else s)})
    models = resolve_models(cfg, needed)
    out = {}
    for s in cfg.surrogates:
        if isinstance(s, str):
            out[s] = models[s]
        else:
            out["+".join(s)] = Ensemble([models[m] for m in s])
    return out


def load_images(cfg: ExperimentConfig, limit: int | None = None) -> ImageBatch:
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        n = ds.get("n_images", 200)
        batch = attack_set(n, cfg.world, ds.get("sample_seed", 7))
    else:
        index = load_dataset(ds["root"], ds.get("index", "index.csv"), ds.get("num_classes", cfg.world.num_classes))
        batch = index.load()
    return batch if limit is None else batch[:limit]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_attack(cfg: ExperimentConfig, out: Path) -> int:
    surrogates = surrogate_handles(cfg)
    images = load_images(cfg)
    chash = config_hash(cfg)
    status = EXIT_OK
    for sname, sur in surrogates.items():
        for rname, recipe in cfg.recipes.items():
            rcfg = recipe.config(cfg.attack)
            seed = cfg.seeds[0]
            dest = out / "attack" / sname / rname.replace("/", "_")
            dest.mkdir(parents=True, exist_ok=True)
            forward = backward = expected = 0
            losses = []
            for batch in images.split(cfg.batch_size):
                trace = rap_attack(sur, batch, recipe.pipeline, rcfg, seed)
                forward += trace.forward_count
                backward += trace.backward_count
                expected += expected_pass_count(rcfg, recipe.pipeline.multiplicity)
                losses.append(trace.losses)
                for img, idx in zip(trace.x_adv, batch.indices):
                    (dest / f"{int(idx):05d}.png").write_bytes(encode_png(img))
            ok = forward == backward == expected
            print(f"pass-count audit {sname}/{rname}: {forward}/{expected} {'ok' if ok else 'MISMATCH'}")
            if not ok:
                status = EXIT_RUNTIME
            manifest = {"surrogate": sname, "recipe": recipe.to_dict(), "config": rcfg.to_dict(), "seed": seed,
                        "forward_count": forward, "backward_count": backward, "expected_pass_count": expected,
                        "config_hash": chash, "losses": losses}
            atomic_write(dest / "trace.json", json.dumps(manifest, sort_keys=True) + "\n")
    return status


def _matrix(cfg: ExperimentConfig, out: Path, attack_cfg=None, recipes=None) -> ResultMatrix:
    targets = resolve_models(cfg, cfg.targets)
    return run_matrix(surrogate_handles(cfg), targets, recipes or cfg.recipes, load_images(cfg),
                      attack_cfg or cfg.attack, cfg.seeds, cfg.batch_size, out, cfg.workers)


def cmd_evaluate(cfg: ExperimentConfig, out: Path, plot: bool = False) -> int:
    result = _matrix(cfg, out)
    curves = result.curves_csv(out)
    print(f"wrote {out / 'results.csv'} ({len(result.rates)} rows) and {len(curves)} curve file(s)")
    if plot:
        from .plots import plot_curves
        for c in curves:
            plot_curves(c, c.with_suffix(".png"))
    return EXIT_PARTIAL if result.failed else EXIT_OK


ABLATION_DEFAULTS = {
    "epsilon_n": [v / 255 for v in (2, 4, 8, 12, 16, 20)],
    "K_LS": [0, 25, 50, 100, 150, 200],
    "T": [1, 2, 4, 8],
}


def cmd_ablate(cfg: ExperimentConfig, out: Path, axis: str | None) -> int:
    ab = cfg.ablation or {}
    axis = axis or ab.get("axis")
    if axis not in ABLATION_DEFAULTS:
        raise InvalidConfigError(f"ablation axis must be one of {sorted(ABLATION_DEFAULTS)}")
    values = ab.get("values") if ab.get("axis", axis) == axis and ab.get("values") is not None else ABLATION_DEFAULTS[axis]
    if not values:
        raise InvalidConfigError("ablation axis has no values")
    names = ab.get("recipes") or [k for k, r in cfg.recipes.items() if r.rap]
    recipes = {k: cfg.recipes[k] for k in names}
    coupled = ab.get("coupled_step", cfg.attack.coupled_step)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "surrogate", "target", "recipe", "checkpoint", "mode", "rate", "n"])
    partial = False
    for v in values:
        v = int(v) if axis in ("K_LS", "T") else float(v)
        if axis == "K_LS" and v > cfg.attack.K:
            raise InvalidConfigError(f"K_LS value {v} exceeds K={cfg.attack.K}")
        acfg = cfg.attack.replace(**{axis: v, "coupled_step": coupled})
        # recipe overrides of the swept field would silently win, so drop them
        swept = {k: type(r)(r.pipeline, r.rap, tuple(o for o in r.overrides if o[0] != axis)) for k, r in recipes.items()}
        result = _matrix(cfg, out / f"{axis}={v:g}", acfg, swept)
        partial |= bool(result.failed)
        if coupled:
            for key, unit in result.units.items():
                c = unit["config"]
                if c["epsilon_n"] > 0 and abs(c["alpha_n"] * c["T"] - c["epsilon_n"]) > 1e-12:
                    raise RuntimeError(f"coupled-step audit failed for {key}: alpha_n*T != epsilon_n")
        for row in result.rows():
            sur, tgt, rec, cp, mode, rate, n = row
            w.writerow([axis, f"{v:g}", sur, tgt, rec, cp, mode, f"{rate:.6f}", n])
    atomic_write(out / f"ablation_{axis}.csv", buf.getvalue())
    print(f"wrote {out / f'ablation_{axis}.csv'}")
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_flatness(cfg: ExperimentConfig, out: Path, plot: bool = False) -> int:
    fl = cfg.flatness or {}
    mags = fl.get("magnitudes")
    from .flatness import DEFAULT_MAGNITUDES
    mags = list(DEFAULT_MAGNITUDES) if mags is None else mags
    if 0.0 not in mags:
        raise InvalidConfigError("flatness magnitudes must include 0")
    names = fl.get("recipes") or list(cfg.recipes)
    images = load_images(cfg, fl.get("n_images"))
    surrogates = surrogate_handles(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for sname, sur in surrogates.items():
        profiles = {}
        for rname in names:
            recipe = cfg.recipes[rname]
            rcfg = recipe.config(cfg.attack)
            advs = [rap_attack(sur, b, recipe.pipeline, rcfg, cfg.seeds[0]).x_adv for b in images.split(cfg.batch_size)]
            adv = torch.cat(advs)
            labels = images.loss_labels(rcfg.loss.mode)
            prof = flatness_profile(sur, adv, labels, rcfg.loss, mags, fl.get("n_directions", 20), cfg.seeds[0],
                                    recipe.pipeline if fl.get("through_pipeline") else None, images.indices.tolist())
            profiles[rname] = prof
            write_profile_csv(prof, out / f"profile_{sname}_{rname.replace('/', '_')}.csv")
        report = compare_profiles(profiles, fl.get("reference"))
        atomic_write(out / f"flatness_{sname}.json", json.dumps(report, indent=2) + "\n")
        for name in report["area_order"]:
            print(f"{sname} {name}: area {report['recipes'][name]['area']:.6g}")
        if plot:
            from .plots import plot_profiles
            plot_profiles(report, out / f"flatness_{sname}.png")
    return EXIT_OK


def cmd_train_toy(cfg: ExperimentConfig, names=None) -> int:
    for name, model in resolve_models(cfg, names).items():
        m = model.manifest
        print(f"{name}: {m['spec']['architecture']} seed={m['spec']['seed']} test acc {m['test_accuracy']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--workers", type=int, help="parallel attack units")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rapattack", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("attack", parents=[common], help="run attacks and write adversarial PNGs")
    ev = sub.add_parser("evaluate", parents=[common], help="surrogate x target x recipe matrix")
    ev.add_argument("--plot", action="store_true")
    ab = sub.add_parser("ablate", parents=[common], help="sweep one RAP hyperparameter")
    ab.add_argument("--axis", choices=sorted(ABLATION_DEFAULTS))
    fl = sub.add_parser("flatness", parents=[common], help="loss-change profiles around adversarial examples")
    fl.add_argument("--plot", action="store_true")
    tr = sub.add_parser("train-toy", parents=[common], help="train and register toy models")
    tr.add_argument("--name", action="append", help="train only these models")
    sub.add_parser("show-config", parents=[common], help="print the validated config in canonical form")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"seeds=[{args.seed}]"]
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    try:
        cfg = load_config(args.config, overrides)
    except InvalidConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    try:
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "config.resolved.yaml", dump_config(cfg))
        if args.command == "attack":
            return cmd_attack(cfg, out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.plot)
        if args.command == "ablate":
            return cmd_ablate(cfg, out, args.axis)
        if args.command == "flatness":
            return cmd_flatness(cfg, out, args.plot)
        if args.command == "train-toy":
            return cmd_train_toy(cfg, args.name)
    except InvalidConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - mapped to the runtime exit code
        log.exception("run failed")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Datasets, success rates, and resumable surrogate x target x recipe result matrices."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .batch import ImageBatch
from .core import RAPConfig, expected_pass_count, rap_attack
from .errors import DatasetError, InvalidConfigError, TransportError, ProtocolError
from .pipelines import PipelineSpec, preset
from .remote import RemoteClassifier, RemoteClassifierSpec, encode_png, quantize, top_k_classes

log = logging.getLogger(__name__)

INDEX_HEADER = ["filename", "label", "target_label"]
RESULT_HEADER = ["surrogate", "target", "recipe", "checkpoint", "mode", "rate", "n"]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetIndex:
    root: Path
    records: list[tuple[str, int, int]]
    num_classes: int
    resolution: tuple[int, int] | None = None

    def __len__(self):
        return len(self.records)

    def load_image(self, i: int) -> torch.Tensor:
        img = Image.open(self.root / self.records[i][0]).convert("RGB")
        if self.resolution and img.size != (self.resolution[1], self.resolution[0]):
            raise DatasetError(f"row {i + 2}: image {self.records[i][0]} is {img.size[1]}x{img.size[0]}, "
                               f"expected {self.resolution[0]}x{self.resolution[1]}")
        arr = np.asarray(img, dtype=np.float32) / 255.0
        return torch.from_numpy(arr).permute(2, 0, 1).contiguous()

    def batches(self, size: int = 50):
        for start in range(0, len(self), size):
            yield self.load(range(start, min(start + size, len(self))))

    def load(self, rows: Sequence[int] | None = None) -> ImageBatch:
        rows = list(range(len(self))) if rows is None else list(rows)
        if not rows:
            h, w = self.resolution or (0, 0)
            return ImageBatch(torch.zeros(0, 3, h, w), torch.zeros(0), torch.zeros(0), torch.zeros(0))
        x = torch.stack([self.load_image(i) for i in rows])
        y = torch.tensor([self.records[i][1] for i in rows])
        t = torch.tensor([self.records[i][2] for i in rows])
        return ImageBatch(x, y, t, torch.tensor(rows))


def load_dataset(root: str | os.PathLike, index_file: str = "index.csv", num_classes: int = 10,
                 resolution: tuple[int, int] | None = None) -> DatasetIndex:
    """Read and validate a ``filename,label,target_label`` index.

    Row numbers in error messages count the header as row 1.
    """
    root = Path(root)
    path = root / index_file
    if not path.exists():
        raise DatasetError(f"index file {path} does not exist")
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return DatasetIndex(root, [], num_classes, resolution)
        if [h.strip() for h in header] != INDEX_HEADER:
            raise DatasetError(f"{path}: header must be {','.join(INDEX_HEADER)}")
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                name, y, yt = row[0], int(row[1]), int(row[2])
            except (IndexError, ValueError):
                raise DatasetError(f"{path} row {rownum}: expected filename,label,target_label") from None
            if not (0 <= y < num_classes and 0 <= yt < num_classes):
                raise DatasetError(f"{path} row {rownum}: label out of range [0, {num_classes})")
            if y == yt:
                raise DatasetError(f"{path} row {rownum}: target label equals true label ({y})")
            if not (root / name).is_file():
                raise DatasetError(f"{path} row {rownum}: missing image {name}")
            records.append((name, y, yt))
    return DatasetIndex(root, records, num_classes, resolution)


def write_dataset(root: str | os.PathLike, batch: ImageBatch, index_file: str = "index.csv") -> Path:
    """Write a batch as PNG files plus an index CSV (the inverse of ``load_dataset``)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if batch.targets is None:
        raise DatasetError("writing a dataset requires target labels")
    with open(root / index_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_HEADER)
        for i in range(len(batch)):
            name = f"{int(batch.indices[i]):05d}.png"
            (root / name).write_bytes(encode_png(batch.x[i]))
            w.writerow([name, int(batch.labels[i]), int(batch.targets[i])])
    return root / index_file


# ---------------------------------------------------------------------------
# success rates
# ---------------------------------------------------------------------------

def attack_succeeded(target, adv: torch.Tensor, labels: torch.Tensor, mode: str) -> torch.Tensor:
    """Per-image success: prediction != y (untargeted) or == y_t (targeted)."""
    pred = target.predict(adv)
    labels = torch.as_tensor(labels)
    return pred == labels if mode == "targeted" else pred != labels


def success_rate(target, adv: torch.Tensor, labels: torch.Tensor, mode: str) -> float:
    if len(adv) == 0:
        return 0.0
    return 100.0 * float(attack_succeeded(target, adv, labels, mode).double().mean())


def local_top_k_rate(model, adv: torch.Tensor, targets: torch.Tensor, k: int) -> float:
    """Percent of images whose top-k (after 8-bit quantization) contains the target."""
    if len(adv) == 0:
        return 0.0
    with torch.no_grad():
        logits = model.forward(quantize(adv))
    hits = [int(t) in {c for c, _ in top_k_classes(row, k)} for row, t in zip(logits, targets)]
    return 100.0 * sum(hits) / len(hits)


def remote_success_rate(spec: RemoteClassifierSpec, adv: torch.Tensor, targets: torch.Tensor,
                        label_map: Mapping | None = None, client: RemoteClassifier | None = None) -> float:
    """Percent of images whose mapped top-k remote predictions contain the target class.

    ``label_map`` maps remote labels to dataset classes; unmapped labels are
    ignored. Images whose request ultimately fails are excluded with a warning.
    """
    client = client or RemoteClassifier(spec)
    hits, failed = [], 0
    for img, t in zip(adv, targets):
        try:
            preds = client.predict_one(img)
        except (TransportError, ProtocolError) as e:
            failed += 1
            log.warning("remote prediction failed: %s", e)
            continue
        mapped = {label_map.get(lbl, label_map.get(str(lbl))) if label_map is not None else lbl for lbl, _ in preds}
        hits.append(int(t) in mapped or str(int(t)) in mapped)
    if failed:
        warnings.warn(f"{failed} image(s) excluded after remote failures", RuntimeWarning)
    return 100.0 * sum(hits) / len(hits) if hits else 0.0


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Recipe:
    """A baseline pipeline, optionally wrapped with RAP; ``overrides`` patch the RAP config."""

    pipeline: PipelineSpec = field(default_factory=PipelineSpec)
    rap: bool = False
    overrides: tuple = ()

    def config(self, base: RAPConfig) -> RAPConfig:
        cfg = base.replace(**dict(self.overrides)) if self.overrides else base
        return cfg if self.rap else cfg.replace(epsilon_n=0.0, coupled_step=False)

    def to_dict(self) -> dict:
        return {"pipeline": self.pipeline.to_list(), "rap": self.rap, "overrides": dict(self.overrides)}

    @classmethod
    def parse(cls, d) -> "Recipe":
        """From a preset name like "MI+RAP" or a mapping {pipeline, rap, overrides}."""
        if isinstance(d, str):
            base, _, suffix = d.partition("+")
            if suffix not in ("", "RAP", "RAP-LS"):
                raise InvalidConfigError(f"cannot parse recipe {d!r}")
            overrides = (("K_LS", 0),) if suffix == "RAP" else ()
            return cls(preset(base), bool(suffix), overrides)
        pipe = d.get("pipeline", [])
        pipeline = preset(pipe) if isinstance(pipe, str) else PipelineSpec.from_list(pipe)
        return cls(pipeline, bool(d.get("rap", False)), tuple(sorted((d.get("overrides") or {}).items())))


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def fingerprint(batch: ImageBatch) -> str:
    h = hashlib.sha256()
    for t in (batch.x, batch.labels, batch.targets, batch.indices):
        if t is not None:
            h.update(t.contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def model_id(name: str, model) -> str:
    manifest = getattr(model, "manifest", None)
    return f"{name}:{manifest.get('spec_key')}" if manifest else name


@dataclass
class ResultMatrix:
    rates: dict = field(default_factory=dict)        # (sur, tgt, recipe, checkpoint, mode) -> rate
    counts: dict = field(default_factory=dict)       # same key -> n
    per_image: dict = field(default_factory=dict)    # same key + (seed,) -> list[int]
    units: dict = field(default_factory=dict)        # (sur, recipe, seed) -> unit summary
    failed: dict = field(default_factory=dict)       # (sur, recipe, seed) -> error message
    metadata: dict = field(default_factory=dict)
    passes_run: int = 0

    def rows(self):
        for key in sorted(self.rates):
            yield [*key, self.rates[key], self.counts[key]]

    def to_csv(self, path: str | os.PathLike):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for sur, tgt, rec, cp, mode, rate, n in self.rows():
            w.writerow([sur, tgt, rec, cp, mode, f"{rate:.6f}", n])
        atomic_write(path, buf.getvalue())

    def curves_csv(self, out_dir: str | os.PathLike) -> list[Path]:
        """One iteration-curve CSV per target: rows (surrogate, recipe, mode, checkpoint, rate)."""
        out_dir = Path(out_dir)
        paths = []
        for tgt in sorted({k[1] for k in self.rates}):
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["surrogate", "recipe", "mode", "checkpoint", "rate"])
            for (sur, t, rec, cp, mode), rate in sorted(self.rates.items()):
                if t == tgt:
                    w.writerow([sur, rec, mode, cp, f"{rate:.6f}"])
            path = out_dir / f"curve_{tgt}.csv"
            atomic_write(path, buf.getvalue())
            paths.append(path)
        return paths

    def write_manifest(self, path: str | os.PathLike):
        body = dict(self.metadata)
        body["units"] = {"|".join(map(str, k)): v for k, v in sorted(self.units.items())}
        body["failed"] = {"|".join(map(str, k)): v for k, v in sorted(self.failed.items())}
        atomic_write(path, json.dumps(body, indent=2, sort_keys=True) + "\n")


def atomic_write(path: str | os.PathLike, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _run_unit(surrogate, targets, dataset: ImageBatch, recipe: Recipe, cfg: RAPConfig, seed: int, batch_size: int):
    checkpoints = cfg.checkpoints or (cfg.K,)
    cfg = cfg.replace(checkpoints=checkpoints)
    success = {(t, cp): [] for t in targets for cp in checkpoints}
    forward = backward = 0
    for batch in dataset.split(batch_size):
        trace = rap_attack(surrogate, batch, recipe.pipeline, cfg, seed)
        forward += trace.forward_count
        backward += trace.backward_count
        labels = batch.loss_labels(cfg.loss.mode)
        for cp in checkpoints:
            for tname, target in targets.items():
                ok = attack_succeeded(target, trace.checkpoints[cp], labels, cfg.loss.mode)
                success[(tname, cp)].extend(int(v) for v in ok)
    n_batches = -(-len(dataset) // batch_size)
    return {
        "success": {f"{t}|{cp}": v for (t, cp), v in success.items()},
        "forward_count": forward,
        "backward_count": backward,
        "expected_pass_count": n_batches * expected_pass_count(cfg, recipe.pipeline.multiplicity),
        "config": cfg.to_dict(),
    }


def run_matrix(
    surrogates: Mapping[str, object],
    targets: Mapping[str, object],
    recipes: Mapping[str, Recipe],
    dataset: ImageBatch,
    cfg: RAPConfig,
    seeds: Sequence[int] = (0,),
    batch_size: int = 50,
    out_dir: str | os.PathLike | None = None,
    workers: int = 1,
) -> ResultMatrix:
    """Attack ``dataset`` with every (surrogate, recipe, seed) unit and score every target.

    With ``out_dir`` each finished unit is persisted under ``units/`` keyed by a
    hash of everything it depends on, and reruns skip units already on disk.
    Rates are averaged over seeds.
    """
    if len(dataset) == 0:
        raise InvalidConfigError("dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    data_fp = fingerprint(dataset)
    target_ids = sorted(model_id(k, v) for k, v in targets.items())
    result = ResultMatrix()
    result.metadata = {
        "seeds": list(seeds),
        "batch_size": batch_size,
        "dataset": data_fp,
        "config": cfg.to_dict(),
        "recipes": {k: r.to_dict() for k, r in recipes.items()},
        "surrogates": sorted(model_id(k, v) for k, v in surrogates.items()),
        "targets": target_ids,
    }
    result.metadata["config_hash"] = digest({k: result.metadata[k] for k in ("config", "recipes", "surrogates", "targets", "dataset", "seeds")})

    jobs = []
    for sname, sur in surrogates.items():
        for rname, recipe in recipes.items():
            for seed in seeds:
                ucfg = recipe.config(cfg)
                key = digest({"surrogate": model_id(sname, sur), "recipe": recipe.to_dict(), "config": ucfg.to_dict(),
                              "seed": seed, "dataset": data_fp, "targets": target_ids, "batch_size": batch_size})
                jobs.append(((sname, rname, seed), sur, recipe, ucfg, key))

    def work(job):
        (sname, rname, seed), sur, recipe, ucfg, key = job
        path = out / "units" / f"{key}.json" if out is not None else None
        if path is not None and path.exists():
            return job, json.loads(path.read_text()), False
        t0 = time.perf_counter()
        unit = _run_unit(sur, targets, dataset, recipe, ucfg, seed, batch_size)
        unit["key"] = key
        if path is not None:
            atomic_write(path, json.dumps(unit, sort_keys=True))
        unit["seconds"] = time.perf_counter() - t0
        return job, unit, True

    def collect(job, unit, fresh):
        (sname, rname, seed) = job[0]
        if fresh:
            result.passes_run += unit["forward_count"]
        result.units[(sname, rname, seed)] = {k: v for k, v in unit.items() if k != "success"}
        mode = unit["config"]["loss"]["mode"]
        for tc, bits in unit["success"].items():
            tname, cp = tc.split("|")
            result.per_image[(sname, tname, rname, int(cp), mode, seed)] = bits

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            futures = [pool.submit(work, j) for j in jobs]
            outcomes = []
            for j, f in zip(jobs, futures):
                try:
                    outcomes.append(f.result())
                except Exception as e:  # noqa: BLE001 - recorded per cell
                    result.failed[j[0]] = f"{type(e).__name__}: {e}"
    else:
        outcomes = []
        for j in jobs:
            try:
                outcomes.append(work(j))
            except Exception as e:  # noqa: BLE001 - recorded per cell
                log.error("unit %s failed: %s", j[0], e)
                result.failed[j[0]] = f"{type(e).__name__}: {e}"
    for job, unit, fresh in outcomes:
        collect(job, unit, fresh)

    grouped: dict = {}
    for (sname, tname, rname, cp, mode, seed), bits in result.per_image.items():
        grouped.setdefault((sname, tname, rname, cp, mode), []).append(bits)
    for key, runs in grouped.items():
        result.rates[key] = float(np.mean([100.0 * sum(b) / len(b) for b in runs]))
        result.counts[key] = len(runs[0])
    if out is not None:
        result.to_csv(out / "results.csv")
        result.write_manifest(out / "manifest.json")
    return result

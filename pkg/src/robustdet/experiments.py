"""Evaluation protocols: robustness rows, transfer matrices and recipe ablation grids."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .attacks import AttackSpec, attack_batch
from .core import PixelImage, Sample
from .io import load_images, save_images
from .metrics import coco_eval
from .objectives import ObjectiveKind
from .training import RecipeConfig

log = logging.getLogger(__name__)

ROW_OBJECTIVES = ("cls", "reg", "cwa")
ABLATION_AXES = ("backbone_init", "optimizer", "backbone_lr_multiplier", "schedule")


def dataset_fingerprint(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.id.encode())
        h.update(np.ascontiguousarray(s.image.data).tobytes())
        h.update(np.ascontiguousarray(s.gt.boxes).tobytes())
        h.update(np.ascontiguousarray(s.gt.labels).tobytes())
    return h.hexdigest()[:16]


def spec_key(spec: AttackSpec) -> str:
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


class AdversarialCache:
    """Adversarial datasets keyed by (source model, attack spec, clean dataset).

    Kept in memory and, when ``directory`` is given, as ``.npz`` files so that a
    source's adversarial set is generated once and never regenerated.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._mem: dict[tuple, list[PixelImage]] = {}

    def path(self, key: tuple) -> Path | None:
        if self.directory is None:
            return None
        return self.directory / ("adv-" + "-".join(key) + ".npz")

    def get_or_create(self, key: tuple, make: Callable[[], list[PixelImage]]) -> list[PixelImage]:
        if key in self._mem:
            return self._mem[key]
        p = self.path(key)
        if p is not None and p.exists():
            images, _ = load_images(p)
        else:
            images = make()
            if p is not None:
                p.parent.mkdir(parents=True, exist_ok=True)
                save_images(p, images, {"source": key[0], "spec": key[1], "data": key[2]})
        self._mem[key] = images
        return images


def adversarial_images(detector, samples: Sequence[Sample], spec: AttackSpec, source_id: str = "model",
                       workers: int = 1, cache: AdversarialCache | None = None) -> list[PixelImage]:
    """Per-image PGD against ground truth; cached when ``cache`` is given."""
    def make():
        if spec.budget.epsilon == 0:
            return [s.image for s in samples]
        return attack_batch(detector, [(s.image, s.gt) for s in samples], spec, workers)

    if cache is None:
        return make()
    return cache.get_or_create((source_id, spec_key(spec), dataset_fingerprint(samples)), make)


def _evaluate_images(detector, images: Sequence[PixelImage], samples: Sequence[Sample], num_classes: int,
                     area_bands=None):
    xs = np.stack([im.data for im in images])
    dets = detector.detect_batch(xs)
    kw = {"area_bands": area_bands} if area_bands is not None else {}
    return coco_eval(list(zip(dets, [s.gt for s in samples])), num_classes, **kw)


def _num_classes(detector, samples) -> int:
    cfg = getattr(detector, "cfg", None)
    if cfg is not None and hasattr(cfg, "num_classes"):
        return int(cfg.num_classes)
    return int(max((int(s.gt.labels.max()) for s in samples if s.gt.K), default=-1)) + 1


# --------------------------------------------------------------- robustness

@dataclass
class RobustnessRow:
    """AP50 (x100) on clean images and under each attack objective."""

    model_id: str
    benign: float | None
    attacked: dict[str, float | None] = field(default_factory=dict)
    attack: dict = field(default_factory=dict)      # AttackSpec.to_dict() minus the objective
    coco: dict | None = None                       # optional full reports keyed "benign" / objective

    @property
    def a_cls(self):
        return self.attacked.get("cls")

    @property
    def a_reg(self):
        return self.attacked.get("reg")

    @property
    def a_cwa(self):
        return self.attacked.get("cwa")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessRow":
        return cls(**d)


def evaluate_under_attack(detector, dataset: Sequence[Sample], spec: AttackSpec,
                          objectives: Sequence[str] | None = None, model_id: str = "model", workers: int = 1,
                          cache: AdversarialCache | None = None, area_bands=None,
                          with_coco: bool = False) -> RobustnessRow:
    """Benign AP50 plus AP50 on adversarial copies of ``dataset``.

    ``objectives`` defaults to ``spec.objective`` alone; each entry reuses the
    rest of ``spec``.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("evaluation dataset is empty")
    nc = _num_classes(detector, samples)
    objectives = [ObjectiveKind.parse(o).value for o in (objectives or [spec.objective])]
    clean = _evaluate_images(detector, [s.image for s in samples], samples, nc, area_bands)
    row = RobustnessRow(model_id, clean.AP50, {}, {k: v for k, v in spec.to_dict().items() if k != "objective"})
    reports = {"benign": clean.to_dict()}
    for obj in objectives:
        sp = replace(spec, objective=ObjectiveKind.parse(obj))
        adv = adversarial_images(detector, samples, sp, model_id, workers, cache)
        rep = _evaluate_images(detector, adv, samples, nc, area_bands)
        row.attacked[obj] = rep.AP50
        reports[obj] = rep.to_dict()
    if with_coco:
        row.coco = reports
    return row


# ----------------------------------------------------------------- transfer

@dataclass
class TransferMatrix:
    """``values[i][j]``: AP50 of target ``ids[i]`` on examples crafted against source ``ids[j]``."""

    ids: list[str]
    values: list[list[float | None]]
    attack: dict

    def cell(self, target: str, source: str):
        return self.values[self.ids.index(target)][self.ids.index(source)]

    @property
    def diagonal(self) -> list:
        return [self.values[i][i] for i in range(len(self.ids))]

    def off_diagonal_means(self, group: Mapping[str, object]) -> tuple[float, float]:
        """Mean off-diagonal AP50 over (same-group, cross-group) pairs."""
        same, cross = [], []
        for i, t in enumerate(self.ids):
            for j, s in enumerate(self.ids):
                if i == j:
                    continue
                (same if group[t] == group[s] else cross).append(self.values[i][j])
        mean = lambda v: float(np.mean(v)) if v else float("nan")  # noqa: E731
        return mean(same), mean(cross)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrix":
        return cls(list(d["ids"]), [list(r) for r in d["values"]], dict(d["attack"]))


def transfer_matrix(models: Mapping[str, object] | Sequence, dataset: Sequence[Sample], spec: AttackSpec,
                    workers: int = 1, cache: AdversarialCache | None = None, area_bands=None) -> TransferMatrix:
    """Craft one adversarial set per source and evaluate every target on it."""
    if not isinstance(models, Mapping):
        models = {f"m{i}": m for i, m in enumerate(models)}
    if not models:
        raise ValueError("transfer_matrix needs at least one model")
    samples = list(dataset)
    cache = cache or AdversarialCache()
    ids = list(models)
    adv = {sid: adversarial_images(models[sid], samples, spec, sid, workers, cache) for sid in ids}
    values = []
    for tid in ids:
        nc = _num_classes(models[tid], samples)
        values.append([_evaluate_images(models[tid], adv[sid], samples, nc, area_bands).AP50 for sid in ids])
    return TransferMatrix(ids, values, spec.to_dict())


# ------------------------------------------------------------------ ablation

def schedule_config(cfg: RecipeConfig, schedule) -> RecipeConfig:
    """Apply a schedule axis value: an int (equivalent epochs, milestones at 2/3 and 5/6)
    or a dict with ``epochs_equivalent`` and optionally ``lr_milestones``."""
    if isinstance(schedule, Mapping):
        n = int(schedule["epochs_equivalent"])
        ms = schedule.get("lr_milestones", (n * 2 // 3, n * 5 // 6))
    else:
        n = int(schedule)
        ms = (n * 2 // 3, n * 5 // 6)
    return replace(cfg, epochs_equivalent=n, lr_milestones=tuple(int(m) for m in ms))


def cell_config(base: RecipeConfig, cell: Mapping[str, object]) -> RecipeConfig:
    cfg = base
    for k, v in cell.items():
        if k == "schedule":
            cfg = schedule_config(cfg, v)
        else:
            cfg = replace(cfg, **{k: v})
    return cfg


@dataclass
class AblationRow:
    cell: dict
    seed: int
    config: dict
    row: RobustnessRow | None = None
    error: str | None = None

    @property
    def key(self) -> str:
        return json.dumps({"cell": self.cell, "seed": self.seed}, sort_keys=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["row"] = self.row.to_dict() if self.row else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblationRow":
        row = RobustnessRow.from_dict(d["row"]) if d.get("row") else None
        return cls(dict(d["cell"]), int(d["seed"]), dict(d["config"]), row, d.get("error"))


def load_ablation(path: str | Path) -> list[AblationRow]:
    p = Path(path)
    if not p.exists():
        return []
    return [AblationRow.from_dict(json.loads(line)) for line in p.read_text().splitlines() if line.strip()]


def ablation_grid(base: RecipeConfig, axes: Mapping[str, Sequence], train: Callable[[RecipeConfig, int], object],
                  dataset: Sequence[Sample] | Callable[[int], Sequence[Sample]], spec: AttackSpec,
                  seeds: Sequence[int] = (0,), objectives: Sequence[str] | None = None,
                  store: str | Path | None = None, workers: int = 1) -> list[AblationRow]:
    """Train and evaluate every combination of ``axes`` for every seed.

    ``train(cfg, seed)`` returns a trained detector; ``dataset`` may be a
    per-seed callable. Failures are recorded on the row and the grid carries
    on. With ``store`` each finished row is appended as a JSON line, and rows
    already present there are reused instead of being retrained.
    """
    bad = [a for a in axes if a not in ABLATION_AXES and a not in RecipeConfig.__dataclass_fields__]
    if bad:
        raise ValueError(f"unknown ablation axes {bad}")
    names = list(axes)
    done = {r.key: r for r in load_ablation(store)} if store else {}
    rows = []
    for values in itertools.product(*(list(axes[n]) for n in names)):
        cell = dict(zip(names, values))
        for seed in seeds:
            probe = AblationRow(cell, int(seed), {})
            if probe.key in done:
                rows.append(done[probe.key])
                continue
            try:
                cfg = cell_config(base, cell)
                probe.config = cfg.to_dict()
                det = train(cfg, seed)
                data = dataset(seed) if callable(dataset) else dataset
                mid = "-".join(f"{k}={v}" for k, v in cell.items()) + f"-s{seed}"
                probe.row = evaluate_under_attack(det, data, spec, objectives, mid, workers)
            except Exception as exc:  # recorded, grid continues
                log.warning("ablation cell %s seed %s failed: %s", cell, seed, exc)
                probe.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            rows.append(probe)
            if store:
                Path(store).parent.mkdir(parents=True, exist_ok=True)
                with open(store, "a") as fh:
                    fh.write(json.dumps(probe.to_dict(), sort_keys=True) + "\n")
    return rows


def summarize(rows: Sequence[AblationRow], objective: str = "cls") -> list[dict]:
    """Median/std over seeds for each cell, in first-seen order."""
    groups: dict[str, list[AblationRow]] = {}
    for r in rows:
        groups.setdefault(json.dumps(r.cell, sort_keys=True), []).append(r)
    out = []
    for key, rs in groups.items():
        ok = [r.row for r in rs if r.row is not None]
        ben = [r.benign for r in ok if r.benign is not None]
        adv = [r.attacked.get(objective) for r in ok if r.attacked.get(objective) is not None]
        out.append({"cell": json.loads(key), "seeds": [r.seed for r in rs], "failures": sum(r.row is None for r in rs),
                    "benign_median": float(np.median(ben)) if ben else None,
                    "robust_median": float(np.median(adv)) if adv else None,
                    "robust_std": float(np.std(adv)) if adv else None})
    return out


def format_table(rows: Sequence[RobustnessRow], objectives: Sequence[str] = ROW_OBJECTIVES) -> str:
    """Plain-text table with one line per model: benign and attacked AP50."""
    cols = ["model", "Benign"] + [f"A_{o}" for o in objectives]
    fmt = lambda v: "-" if v is None else f"{v:.1f}"  # noqa: E731
    lines = [cols] + [[r.model_id, fmt(r.benign)] + [fmt(r.attacked.get(o)) for o in objectives] for r in rows]
    widths = [max(len(line[i]) for line in lines) for i in range(len(cols))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines) + "\n"

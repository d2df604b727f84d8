"""Command-line entry point: ``robustdet <command> --config run.yaml``.

Every command validates its YAML config, runs inside
``<out-dir>/<command>-<config-hash>-s<seed>/`` and finishes by writing a
``manifest.json`` that lists each artifact with its digest. A failed run leaves
a ``FAILED`` marker with the traceback instead.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import COMMAND_KINDS, ConfigFileError, canonical, config_hash, load_config, validate_config

log = logging.getLogger("robustdet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "manifest.json"
FAILED = "FAILED"


class RunFailure(RuntimeError):
    pass


# ------------------------------------------------------------------ manifest

def _digest_obj(obj, h) -> None:
    import torch
    if isinstance(obj, torch.Tensor):
        obj = obj.detach().cpu().numpy()
    if isinstance(obj, np.ndarray):
        h.update(str(obj.dtype).encode() + str(obj.shape).encode())
        h.update(np.ascontiguousarray(obj).tobytes())
    elif isinstance(obj, dict):
        for k in sorted(obj, key=str):
            h.update(repr(k).encode())
            _digest_obj(obj[k], h)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _digest_obj(v, h)
    else:
        h.update(repr(obj).encode())


def file_digest(path: Path) -> str:
    """sha256 of the file bytes; ``.pt`` files are hashed by content since torch.save is not byte-stable."""
    h = hashlib.sha256()
    if path.suffix == ".pt":
        import torch
        _digest_obj(torch.load(path, weights_only=False), h)
        return "content:" + h.hexdigest()
    h.update(path.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seed: int
    run_dir: str
    artifacts: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    version: str = __version__

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def digests(self) -> dict[str, str]:
        return {a["path"]: a["sha256"] for a in self.artifacts}


def run_dir_name(command: str, cfg) -> str:
    return f"{command}-{config_hash(cfg)[:12]}-s{cfg.seed}"


# ------------------------------------------------------------- model files

def save_detector(path: Path, detector) -> None:
    params = {f"param/{k}": v.detach().cpu().numpy() for k, v in detector.state_dict().items()}
    meta = {"detector_config": detector.cfg.to_dict(), "seed": detector.seed,
            "provenance": getattr(detector, "provenance", "random")}
    np.savez_compressed(path, meta=np.asarray(json.dumps(meta, sort_keys=True)), **params)


def load_detector(path: str | Path):
    import torch
    from .toydet.model import ToyDetector, ToyDetectorConfig
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    det = ToyDetector(ToyDetectorConfig(**meta["detector_config"]), meta["seed"])
    det.load_state_dict(state)
    det.provenance = meta["provenance"]
    return det


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- commands

def _cmd_dataset(cfg, rd: Path, ctx: dict) -> dict:
    from .io import save_dataset
    from .toydet.data import ShapesDatasetSpec, generate_shapes_dataset
    spec = ShapesDatasetSpec(**cfg.spec.model_dump(), seed=cfg.seed)
    ds = generate_shapes_dataset(spec)
    save_dataset(rd / "data", ds.samples, {"spec": spec.to_dict()})
    return {"images": len(ds), "instances": int(sum(s.gt.K for s in ds))}


def _cmd_pretrain(cfg, rd: Path, ctx: dict) -> dict:
    import torch
    from fractions import Fraction
    from .core import AttackBudget
    from .io import load_dataset
    from .toydet.data import crop_objects
    from .toydet.model import ToyDetectorConfig
    from .toydet.pretrain import PretrainConfig, classification_accuracy, pretrain_toy_backbone
    samples, _ = load_dataset(cfg.data)
    crops, labels = crop_objects(samples, cfg.crop_size, cfg.crop_margin, cfg.seed)
    p = cfg.pretrain.model_dump()
    p["attack_alpha_fraction"] = Fraction(str(p["attack_alpha_fraction"])).limit_denominator(10_000)
    budget = AttackBudget(cfg.epsilon)
    ckpt = pretrain_toy_backbone(cfg.mode, crops, labels, ToyDetectorConfig(**cfg.detector.model_dump()), budget,
                                 cfg.seed, PretrainConfig(**p))
    torch.save(ckpt, rd / "backbone.pt")
    res = {"crops": len(crops), "train_accuracy": classification_accuracy(ckpt, crops, labels)}
    if cfg.epsilon:
        res["train_pgd_accuracy"] = classification_accuracy(ckpt, crops, labels, budget)
    _write_json(rd / "pretrain.json", res)
    return res


def _cmd_train(cfg, rd: Path, ctx: dict) -> dict:
    from .io import load_dataset
    from .toydet.model import ToyDetector, ToyDetectorConfig
    from .training import Trainer, TrainState, load_backbone_checkpoint
    samples, _ = load_dataset(cfg.data)
    det = ToyDetector(ToyDetectorConfig(**cfg.detector.model_dump()), cfg.seed)
    recipe = cfg.recipe.to_recipe()
    if cfg.backbone.init != "random" and not cfg.backbone.checkpoint:
        raise RunFailure(f"backbone.init={cfg.backbone.init} needs backbone.checkpoint")
    load_backbone_checkpoint(det, cfg.backbone.checkpoint, cfg.backbone.init)
    if cfg.method != "free":
        from dataclasses import replace
        recipe = replace(recipe, replay_m=1)
    if ctx.get("resume"):
        state = TrainState.load(ctx["resume"])
        trainer = Trainer(det, samples, state.config, state.seed, state.method,
                          state.extra.get("inner_steps", cfg.inner_steps),
                          state.extra.get("inner_alpha", cfg.inner_alpha), state=state)
    else:
        trainer = Trainer(det, samples, recipe, cfg.seed, cfg.method, cfg.inner_steps, cfg.inner_alpha)
    state = trainer.run()
    state.extra.pop("last_adv_batch", None)
    state.save(rd / "state.pt")
    save_detector(rd / "detector.npz", det)
    res = {"steps": state.step, "counters": state.counters, "final_loss": state.losses[-1] if state.losses else None,
           "provenance": state.provenance}
    _write_json(rd / "train.json", res | {"losses": state.losses})
    return res


def _cmd_attack(cfg, rd: Path, ctx: dict) -> dict:
    from .attacks import attack_batch
    from .core import Sample
    from .io import load_dataset, save_dataset
    samples, meta = load_dataset(cfg.data)
    det = load_detector(cfg.model)
    spec = cfg.attack.to_spec(cfg.seed)
    adv = attack_batch(det, [(s.image, s.gt) for s in samples], spec, cfg.workers)
    out = Path(ctx["attack_out"]) if ctx.get("attack_out") else rd / "adv"
    save_dataset(out, [Sample(a, s.gt) for a, s in zip(adv, samples)], {"attack": spec.to_dict(), "source": meta})
    _write_json(out / "attack_spec.json", spec.to_dict())
    ctx["extra_artifacts"] = [out / "images.npz", out / "gt.txt", out / "attack_spec.json"]
    # relative to the run directory when inside it, so a rerun elsewhere writes the same record
    shown = out.relative_to(rd) if out.is_relative_to(rd) else out
    return {"images": len(adv), "out": str(shown), "attack": spec.to_dict()}


def _eval_pairs(cfg):
    from .core import DetectionSet
    from .io import load_dataset, read_records
    if cfg.model and cfg.data:
        samples, _ = load_dataset(cfg.data)
        det = load_detector(cfg.model)
        dets = det.detect_batch(np.stack([s.image.data for s in samples]))
        return det, samples, {s.image.id: d for s, d in zip(samples, dets)}, {s.image.id: s.gt for s in samples}
    if cfg.detections and cfg.ground_truth:
        gts = read_records(cfg.ground_truth, "gt")
        dets = read_records(cfg.detections, "det")
        unknown = sorted(set(dets) - set(gts))
        if unknown:
            raise RunFailure(f"detections for images without ground truth: {unknown[:5]}")
        return None, None, {k: dets.get(k, DetectionSet.empty()) for k in gts}, gts
    raise RunFailure("eval needs either model+data or detections+ground_truth")


def _cmd_eval(cfg, rd: Path, ctx: dict) -> dict:
    from .experiments import evaluate_under_attack
    from .io import write_records
    from .metrics import coco_eval, error_breakdown
    det, samples, dets, gts = _eval_pairs(cfg)
    ids = list(gts)
    pairs = [(dets[i], gts[i]) for i in ids]
    nc = cfg.num_classes or (det.cfg.num_classes if det is not None else None)
    report = coco_eval(pairs, nc, tuple(cfg.area_bands), cfg.interpolation)
    _write_json(rd / "report.json", report.to_dict())
    write_records(rd / "detections.txt", {i: dets[i] for i in ids})
    bd = error_breakdown(pairs, cfg.similarity, nc)
    _write_json(rd / "breakdown.json", bd.to_dict())
    res = {"report": report.to_dict()}
    if cfg.attack is not None:
        if det is None:
            raise RunFailure("an attack evaluation needs model+data")
        from .experiments import adversarial_images
        spec = cfg.attack.to_spec(cfg.seed)
        row = evaluate_under_attack(det, samples, spec, model_id=Path(cfg.model).stem, workers=cfg.workers,
                                    area_bands=tuple(cfg.area_bands))
        _write_json(rd / "robustness.json", row.to_dict())
        adv = adversarial_images(det, samples, spec, workers=cfg.workers)
        adv_dets = det.detect_batch(np.stack([a.data for a in adv]))
        bd_adv = error_breakdown(list(zip(adv_dets, [s.gt for s in samples])), cfg.similarity, nc)
        _write_json(rd / "breakdown_adv.json", bd_adv.to_dict())
        res["robustness"] = row.to_dict()
    return res


def _cmd_transfer(cfg, rd: Path, ctx: dict) -> dict:
    from .experiments import AdversarialCache, transfer_matrix
    from .io import load_dataset
    if len(cfg.models) < 1:
        raise RunFailure("transfer needs at least one model")
    samples, _ = load_dataset(cfg.data)
    # the config hash ignores key order, so the matrix order must not depend on it either
    models = {k: load_detector(cfg.models[k]) for k in sorted(cfg.models)}
    tm = transfer_matrix(models, samples, cfg.attack.to_spec(cfg.seed), cfg.workers,
                         AdversarialCache(rd / "adv_cache"))
    _write_json(rd / "transfer.json", tm.to_dict())
    return {"transfer": tm.to_dict()}


def _cmd_ablate(cfg, rd: Path, ctx: dict) -> dict:
    from .experiments import ablation_grid, format_table, summarize
    from .toydet.pipeline import ToyWorkbench, pipeline_config_from_dict
    wb = ToyWorkbench(pipeline_config_from_dict(cfg.pipeline.to_dict()), cfg.cache_dir)
    rows = ablation_grid(wb.cfg.recipe, cfg.axes, lambda c, s: wb.train(c, s)[0],
                         lambda s: wb.data("test", s).samples, cfg.attack.to_spec(cfg.seed), cfg.seeds,
                         cfg.objectives, rd / "ablation.jsonl", cfg.workers)
    summary = summarize(rows, cfg.objectives[0])
    _write_json(rd / "summary.json", summary)
    (rd / "table.txt").write_text(format_table([r.row for r in rows if r.row is not None], cfg.objectives))
    return {"cells": len(summary), "failures": sum(r.row is None for r in rows)}


def _cmd_report(cfg, rd: Path, ctx: dict) -> dict:
    from .experiments import RobustnessRow, format_table
    rows, found = [], []
    for r in cfg.runs:
        p = Path(r)
        if not p.is_dir():
            raise RunFailure(f"run directory {p} does not exist")
        if (p / "robustness.json").exists():
            rows.append(RobustnessRow.from_dict(json.loads((p / "robustness.json").read_text())))
            found.append(str(p / "robustness.json"))
        if (p / "ablation.jsonl").exists():
            for line in (p / "ablation.jsonl").read_text().splitlines():
                d = json.loads(line)
                if d.get("row"):
                    rows.append(RobustnessRow.from_dict(d["row"]))
            found.append(str(p / "ablation.jsonl"))
        for name in ("transfer.json", "breakdown.json", "breakdown_adv.json"):
            if (p / name).exists() and not (rd / name).exists():
                shutil.copyfile(p / name, rd / name)
                found.append(str(p / name))
    if not found:
        raise RunFailure("none of the runs holds robustness.json, ablation.jsonl, transfer.json or breakdown.json")
    objectives = sorted({o for r in rows for o in r.attacked}) or ["cls"]
    (rd / "table.txt").write_text(format_table(rows, objectives))
    _write_json(rd / "rows.json", [r.to_dict() for r in rows])
    return {"rows": len(rows), "sources": found}


COMMANDS = {"dataset": _cmd_dataset, "pretrain": _cmd_pretrain, "train-at": _cmd_train, "attack": _cmd_attack,
            "eval": _cmd_eval, "transfer": _cmd_transfer, "ablate": _cmd_ablate, "report": _cmd_report}
PLOTTING = {"eval", "transfer", "report"}


# ------------------------------------------------------------------- plots

def emit_plots(run_dir: str | Path) -> list[Path]:
    """PR-curve stage plots for every ``breakdown*.json`` and a heatmap for ``transfer.json``.

    Each figure has a JSON payload next to it holding every plotted number.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rd = Path(run_dir)
    breakdowns = sorted(rd.glob("breakdown*.json"))
    transfer = rd / "transfer.json"
    if not breakdowns and not transfer.exists():
        raise FileNotFoundError(f"{rd}: expected breakdown.json, breakdown_adv.json or transfer.json")
    out_dir = rd / "plots"
    out_dir.mkdir(exist_ok=True)
    written = []
    save_kw = {"metadata": {"Software": None}, "dpi": 100}
    for bpath in breakdowns:
        bd = json.loads(bpath.read_text())
        payload = {"source": bpath.name, "recall": bd["recall"], "stages": []}
        for stage, area, inc in zip(bd["stages"], bd["areas"], bd["increments"]):
            curve = bd["curves"][stage]
            label = f"[{area:.3f}] {stage}"
            fig, ax = plt.subplots(figsize=(4, 3.2))
            ax.plot(bd["recall"], curve, lw=1.5)
            ax.fill_between(bd["recall"], curve, alpha=0.3)
            ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="recall", ylabel="precision", title=label)
            fig.tight_layout()
            png = out_dir / f"{bpath.stem}_{stage}.png"
            fig.savefig(png, **save_kw)
            plt.close(fig)
            written.append(png)
            payload["stages"].append({"stage": stage, "area": area, "increment": inc, "label": label,
                                      "precision": curve, "file": png.name})
        p = out_dir / f"{bpath.stem}.json"
        _write_json(p, payload)
        written.append(p)
    if transfer.exists():
        tm = json.loads(transfer.read_text())
        vals = np.array([[np.nan if v is None else v for v in row] for row in tm["values"]], dtype=float)
        labels = [["-" if v is None else f"{v:.1f}" for v in row] for row in tm["values"]]
        n = len(tm["ids"])
        fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.1 * n + 1.5))
        im = ax.imshow(vals, cmap="viridis", vmin=0, vmax=max(1.0, float(np.nanmax(vals)) if vals.size else 1.0))
        for i in range(n):
            for j in range(n):
                ax.text(j, i, labels[i][j], ha="center", va="center", color="w", fontsize=9)
        ax.set_xticks(range(n), tm["ids"], rotation=45, ha="right")
        ax.set_yticks(range(n), tm["ids"])
        ax.set(xlabel="source", ylabel="target", title="AP50 under transferred attack")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        png = out_dir / "transfer_heatmap.png"
        fig.savefig(png, **save_kw)
        plt.close(fig)
        p = out_dir / "transfer_heatmap.json"
        _write_json(p, {"ids": tm["ids"], "values": tm["values"], "labels": labels, "attack": tm["attack"],
                        "file": png.name})
        written += [png, p]
    return written


# ---------------------------------------------------------------------- run

def run(command: str, config: str | Path | dict | None = None, overrides: dict | None = None,
        out_dir: str | Path = "runs", ctx: dict | None = None) -> RunManifest:
    """Validate the config, execute the command and write the manifest."""
    kind = COMMAND_KINDS.get(command)
    if kind is None:
        raise ConfigFileError(f"unknown command {command!r}")
    if isinstance(config, dict):
        data = dict(config)
        data.setdefault("kind", kind)
        for k, v in (overrides or {}).items():
            node = data
            *parents, leaf = k.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = v
        cfg = validate_config(data)
        if cfg.kind != kind:
            raise ConfigFileError(f"kind: config is {cfg.kind!r} but the command expects {kind!r}")
    else:
        cfg = load_config(config, overrides, kind)
    ctx = dict(ctx or {})
    rd = Path(out_dir) / run_dir_name(command, cfg)
    rd.mkdir(parents=True, exist_ok=True)
    for stale in (rd / FAILED, rd / MANIFEST):
        stale.unlink(missing_ok=True)
    _seed_everything(cfg.seed)
    t0 = time.perf_counter()
    try:
        result = COMMANDS[cfg.kind](cfg, rd, ctx)
        _write_json(rd / "result.json", result)
        if cfg.kind in PLOTTING:
            try:
                emit_plots(rd)
            except FileNotFoundError:
                if cfg.kind != "report":
                    raise
    except Exception as exc:
        (rd / FAILED).write_text("".join(traceback.format_exception(type(exc), exc, exc.__traceback__)))
        raise RunFailure(f"{command} failed: {exc}") from exc
    files = sorted(p for p in rd.rglob("*") if p.is_file() and p.name not in (MANIFEST, FAILED))
    files += [Path(p) for p in ctx.get("extra_artifacts", []) if not Path(p).resolve().is_relative_to(rd.resolve())]
    artifacts = [{"path": str(p.relative_to(rd)) if p.resolve().is_relative_to(rd.resolve()) else str(p.resolve()),
                  "sha256": file_digest(p)} for p in files]
    manifest = RunManifest(command, canonical(cfg), config_hash(cfg), cfg.seed, str(rd), artifacts,
                           round(time.perf_counter() - t0, 3))
    if ctx.get("resume"):
        manifest.config["_resume"] = str(ctx["resume"])
    manifest.save(rd / MANIFEST)
    return manifest


def _seed_everything(seed: int) -> None:
    import torch
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def rerun(manifest_path: str | Path, out_dir: str | Path | None = None) -> tuple[RunManifest, list[str]]:
    """Re-execute a run from its manifest; returns the new manifest and the artifacts that differ."""
    old = RunManifest.load(manifest_path)
    cfg = dict(old.config)
    ctx = {}
    if "_resume" in cfg:
        ctx["resume"] = cfg.pop("_resume")
    out = Path(out_dir) if out_dir else Path(old.run_dir).parent
    new = run(old.command, cfg, None, out, ctx)
    a, b = old.digests(), new.digests()
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    return new, diff


# --------------------------------------------------------------------- argv

def _global_flags(defaults: bool = True) -> argparse.ArgumentParser:
    # subcommands repeat the flags with suppressed defaults so that a value given
    # before the subcommand is not reset by the subparser
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="YAML run config")
    p.add_argument("--seed", type=int, default=d(None), help="overrides the config seed")
    p.add_argument("--out-dir", default=d("runs"), help="parent directory of run directories (default: runs)")
    p.add_argument("--workers", type=int, default=d(None), help="parallel attack workers")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustdet", description=__doc__.splitlines()[0],
                                     parents=[_global_flags()])
    g = _global_flags(defaults=False)
    parser.add_argument("--version", action="version", version=f"robustdet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("attack", parents=[g], help="craft adversarial copies of a dataset")
    a.add_argument("--objective", choices=("cls", "reg", "vanilla", "cwa", "mtd"))
    a.add_argument("--eps", type=int)
    a.add_argument("--alpha-frac", type=float)
    a.add_argument("--steps", type=int)
    a.add_argument("--model")
    a.add_argument("--in", dest="data", help="input dataset directory")
    a.add_argument("--out", dest="attack_out", help="output dataset directory (default: <run>/adv)")

    t = sub.add_parser("train-at", parents=[g], help="adversarial (or plain) fine-tuning of a detector")
    t.add_argument("--resume", help="state.pt of an interrupted run")

    e = sub.add_parser("eval", parents=[g], help="COCO-style report, error breakdown and PR plots")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--detections")
    e.add_argument("--gt", dest="ground_truth")

    sub.add_parser("transfer", parents=[g], help="transfer-attack matrix and heatmap")
    sub.add_parser("ablate", parents=[g], help="recipe ablation grid on the toy pipeline")
    sub.add_parser("report", parents=[g], help="tables and plots from finished runs")
    sub.add_parser("make-data", parents=[g], help="generate a synthetic shapes dataset")
    sub.add_parser("pretrain", parents=[g], help="pre-train a toy backbone on object crops")
    r = sub.add_parser("rerun", parents=[g], help="re-execute a run from its manifest and compare artifacts")
    r.add_argument("manifest")
    return parser


def _overrides(ns) -> dict:
    o = {}
    if ns.seed is not None:
        o["seed"] = ns.seed
    if ns.workers is not None:
        o["workers"] = ns.workers
    mapping = {"objective": "attack.objective", "eps": "attack.epsilon", "alpha_frac": "attack.alpha_fraction",
               "steps": "attack.steps", "model": "model", "data": "data", "detections": "detections",
               "ground_truth": "ground_truth"}
    for attr, key in mapping.items():
        v = getattr(ns, attr, None)
        if v is not None:
            o[key] = v
    return o


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if ns.command == "rerun":
            new, diff = rerun(ns.manifest, ns.out_dir if ns.out_dir != "runs" else None)
            print(json.dumps({"run_dir": new.run_dir, "reproduced": not diff, "differing": diff}, indent=2))
            return EXIT_OK if not diff else EXIT_RUNTIME
        ctx = {"resume": getattr(ns, "resume", None), "attack_out": getattr(ns, "attack_out", None)}
        m = run(ns.command, ns.config, _overrides(ns), ns.out_dir, ctx)
        print(json.dumps({"run_dir": m.run_dir, "config_hash": m.config_hash, "seed": m.seed,
                          "artifacts": len(m.artifacts), "wall_clock_s": m.wall_clock_s}, indent=2))
        return EXIT_OK
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

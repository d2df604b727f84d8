"""Adversarial fine-tuning of detectors: FreeAT, full PGD-AT and plain training."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attacks import AttackSpec, attack_batch
from .core import AttackBudget, ContractError, Sample, project_array
from .objectives import ObjectiveKind

log = logging.getLogger(__name__)

OPTIMIZERS = ("adaptive_decoupled_wd", "momentum_sgd")
BACKBONE_INITS = ("upstream_adversarial", "upstream_benign", "downstream_benign", "random")
SGD_MOMENTUM = 0.9


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RecipeConfig:
    replay_m: int = 4
    epochs_equivalent: int = 24
    base_lr: float = 1e-4
    backbone_lr_multiplier: float = 0.1
    weight_decay: float = 1e-4
    optimizer: str = "adaptive_decoupled_wd"
    lr_milestones: tuple[int, ...] = (16, 20)  # in equivalent epochs
    lr_decay: float = 0.1
    budget: AttackBudget = field(default_factory=AttackBudget)
    objective: ObjectiveKind = ObjectiveKind.VANILLA
    backbone_init: str = "upstream_adversarial"
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "objective", ObjectiveKind.parse(self.objective))
        object.__setattr__(self, "lr_milestones", tuple(int(v) for v in self.lr_milestones))
        if isinstance(self.budget, dict):
            object.__setattr__(self, "budget", _budget_from_dict(self.budget))
        if self.replay_m < 1:
            raise ConfigError("replay_m must be >= 1")
        if self.epochs_equivalent < 1 or self.epochs_equivalent % self.replay_m:
            raise ConfigError(f"epochs_equivalent ({self.epochs_equivalent}) must be a positive "
                              f"multiple of replay_m ({self.replay_m})")
        if not 0.0 <= self.backbone_lr_multiplier <= 1.0:
            raise ConfigError("backbone_lr_multiplier must lie in [0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.backbone_init not in BACKBONE_INITS:
            raise ConfigError(f"backbone_init must be one of {BACKBONE_INITS}")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigError("base_lr must be > 0, weight_decay >= 0, batch_size >= 1")

    def lr_factor(self, equivalent_epoch: int) -> float:
        return self.lr_decay ** sum(equivalent_epoch >= m for m in self.lr_milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.value
        d["lr_milestones"] = list(self.lr_milestones)
        d["budget"] = {"epsilon": self.budget.epsilon, "alpha_fraction": str(self.budget.alpha_fraction),
                       "steps": self.budget.steps}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecipeConfig":
        return cls(**d)


def _budget_from_dict(d: dict) -> AttackBudget:
    return AttackBudget(int(d.get("epsilon", 8)), Fraction(str(d.get("alpha_fraction", "1/4"))),
                        int(d.get("steps", 20)))


# ----------------------------------------------------------------- param groups

def _all_parameters(detector) -> list:
    if hasattr(detector, "net"):
        return [p for p in detector.net.parameters() if p.requires_grad]
    return [p for ps in detector.param_groups().values() for p in ps]


def build_param_groups(detector, cfg: RecipeConfig) -> list[tuple[list, float]]:
    """Optimizer groups: backbone at ``base_lr * multiplier``, head at ``base_lr``.

    A multiplier of 0 freezes the backbone by leaving it out of the optimizer.
    """
    groups = detector.param_groups()
    unknown = set(groups) - {"backbone", "head"}
    if unknown:
        raise ConfigError(f"parameters tagged {sorted(unknown)}; only 'backbone' and 'head' are allowed")
    tagged = {id(p) for ps in groups.values() for p in ps}
    n_tagged = sum(len(ps) for ps in groups.values())
    untagged = [p for p in _all_parameters(detector) if id(p) not in tagged]
    if untagged or n_tagged != len(tagged):
        raise ConfigError(f"{len(untagged)} untagged parameters; backbone/head tags must partition the model")
    out = []
    bb_lr = cfg.base_lr * cfg.backbone_lr_multiplier
    if groups.get("backbone") and bb_lr > 0:
        out.append((list(groups["backbone"]), bb_lr))
    if groups.get("head"):
        out.append((list(groups["head"]), cfg.base_lr))
    return out


def make_optimizer(groups: list[tuple[list, float]], cfg: RecipeConfig) -> torch.optim.Optimizer:
    spec = [{"params": ps, "lr": lr, "initial_lr": lr} for ps, lr in groups]
    if cfg.optimizer == "adaptive_decoupled_wd":
        return torch.optim.AdamW(spec, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(spec, lr=cfg.base_lr, momentum=SGD_MOMENTUM, weight_decay=cfg.weight_decay)


# ------------------------------------------------------------------ train state

@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    method: str
    config: RecipeConfig
    seed: int
    params: dict
    optimizer: dict
    delta: np.ndarray | None
    epoch: int = 0           # outer epochs completed
    batch_pos: int = 0       # minibatches completed in the current epoch
    perm: np.ndarray | None = None
    rng_state: dict | None = None
    step: int = 0            # optimizer updates
    provenance: str = "random"
    counters: dict = field(default_factory=lambda: {"param_updates": 0, "delta_updates": 0,
                                                    "grad_computations": 0, "images_seen": 0})
    per_minibatch: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        d = asdict(self) | {"config": self.config.to_dict()}
        torch.save(d, path)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        d = torch.load(path, weights_only=False)
        d["config"] = RecipeConfig.from_dict(d["config"])
        return cls(**d)


class Trainer:
    """Single-stream minibatch loop shared by FreeAT, PGD-AT and plain training.

    ``method`` is ``"free"`` (Alg.-S1 style batch replay with a carried
    perturbation), ``"pgd"`` (a fresh per-image PGD attack before every
    update) or ``"standard"`` (benign updates).
    """

    def __init__(self, detector, dataset: Sequence[Sample], cfg: RecipeConfig, seed: int = 0,
                 method: str = "free", inner_steps: int = 10, inner_alpha: float = 2.0,
                 state: TrainState | None = None):
        if method not in ("free", "pgd", "standard"):
            raise ConfigError(f"unknown training method {method!r}")
        if not len(dataset):
            raise ConfigError("training dataset is empty")
        self.detector = detector
        self.dataset = list(dataset)
        self.cfg = cfg
        self.method = method
        self.inner_steps = inner_steps
        self.inner_alpha = inner_alpha
        self.replays = cfg.replay_m if method == "free" else 1
        self.outer_epochs = cfg.epochs_equivalent // self.replays
        self.images = np.stack([s.image.data for s in self.dataset]).astype(np.float32)
        self.gts = [s.gt for s in self.dataset]
        self.groups = build_param_groups(detector, cfg)
        self.opt = make_optimizer(self.groups, cfg)
        if state is None:
            rng = np.random.default_rng(seed)
            state = TrainState(method=method, config=cfg, seed=seed, params={}, optimizer={},
                               delta=None, rng_state=rng.bit_generator.state,
                               provenance=getattr(detector, "provenance", "random"),
                               extra={"inner_steps": inner_steps, "inner_alpha": inner_alpha})
        else:
            detector.load_state_dict(state.params)
            self.opt.load_state_dict(state.optimizer)
        self.state = state
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = state.rng_state

    # ------------------------------------------------------------------ helpers
    def _set_lr(self, epoch: int) -> None:
        factor = self.cfg.lr_factor(epoch * self.replays)
        for g in self.opt.param_groups:
            g["lr"] = g["initial_lr"] * factor

    def _step(self, x: torch.Tensor, gts) -> tuple[float, torch.Tensor | None]:
        """One forward/backward and optimizer update; returns (loss, input grad)."""
        need_input_grad = self.method == "free"
        if need_input_grad:
            x = x.requires_grad_(True)
        loss = self.detector.training_loss(x, gts, self.cfg.objective)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at step {self.state.step}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        c = self.state.counters
        c["grad_computations"] += 1
        c["param_updates"] += 1
        c["images_seen"] += len(gts)
        self.state.step += 1
        return float(loss.item()), (x.grad.detach() if need_input_grad else None)

    def _minibatch(self, idx: np.ndarray) -> None:
        xb = self.images[idx]
        gts = [self.gts[i] for i in idx]
        st = self.state
        updates0, deltas0 = st.counters["param_updates"], st.counters["delta_updates"]
        if self.method == "free":
            eps = self.cfg.budget.eps
            if st.delta is None:
                st.delta = np.zeros((self.cfg.batch_size,) + self.images.shape[1:], dtype=np.float32)
            b, c, h, w = xb.shape
            d = project_array(st.delta[:b, :c, :h, :w], xb, eps)
            for _ in range(self.replays):
                x_in = torch.from_numpy(np.clip(xb + d, 0.0, 1.0))
                loss, g_adv = self._step(x_in, gts)
                st.losses.append(loss)
                # full-eps step on the recycled input gradient
                d = project_array(d + np.float32(eps) * np.sign(g_adv.numpy()).astype(np.float32), xb, eps)
                st.counters["delta_updates"] += 1
            st.delta[:b, :c, :h, :w] = d
        elif self.method == "pgd" and self.inner_steps > 0:
            eps = self.cfg.budget.epsilon
            spec = AttackSpec(AttackBudget(eps, Fraction(str(self.inner_alpha)) / max(eps, 1), self.inner_steps),
                              self.cfg.objective)
            adv = attack_batch(self.detector, [(s.image, s.gt) for s in (self.dataset[i] for i in idx)], spec)
            st.extra["last_adv_batch"] = (idx.copy(), np.stack([a.data for a in adv]))
            loss, _ = self._step(torch.from_numpy(np.stack([a.data for a in adv])), gts)
            st.losses.append(loss)
        else:
            loss, _ = self._step(torch.from_numpy(xb), gts)
            st.losses.append(loss)
        st.per_minibatch.append((st.counters["param_updates"] - updates0,
                                 st.counters["delta_updates"] - deltas0))

    # --------------------------------------------------------------------- run
    def run(self, max_minibatches: int | None = None) -> TrainState:
        """Train to completion, or pause after ``max_minibatches`` minibatches."""
        st = self.state
        n = len(self.images)
        bs = self.cfg.batch_size
        done = 0
        while st.epoch < self.outer_epochs:
            if st.perm is None:
                st.perm = self.rng.permutation(n)
            self._set_lr(st.epoch)
            starts = list(range(0, n, bs))
            while st.batch_pos < len(starts):
                if max_minibatches is not None and done >= max_minibatches:
                    return self._snapshot()
                s = starts[st.batch_pos]
                self._minibatch(st.perm[s:s + bs])
                st.batch_pos += 1
                done += 1
            st.epoch += 1
            st.batch_pos = 0
            st.perm = None
            if st.losses:
                log.debug("%s epoch %d/%d loss %.4f", self.method, st.epoch, self.outer_epochs, st.losses[-1])
        return self._snapshot()

    def _snapshot(self) -> TrainState:
        st = self.state
        st.params = self.detector.state_dict()
        st.optimizer = copy.deepcopy(self.opt.state_dict())
        st.rng_state = self.rng.bit_generator.state
        return st


def free_at_train(detector, dataset: Sequence[Sample], cfg: RecipeConfig, seed: int = 0) -> TrainState:
    """FreeAT: every minibatch is replayed ``m`` times; each replay updates both
    the parameters and the carried perturbation from the same backward pass."""
    return Trainer(detector, dataset, cfg, seed, method="free").run()


def pgd_at_train(detector, dataset: Sequence[Sample], cfg: RecipeConfig, inner_steps: int = 10,
                 inner_alpha: float = 2.0, seed: int = 0) -> TrainState:
    """Min-max training with a fresh PGD attack (``inner_alpha`` on the 0-255 scale) per minibatch."""
    cfg = replace(cfg, replay_m=1)
    return Trainer(detector, dataset, cfg, seed, method="pgd", inner_steps=inner_steps,
                   inner_alpha=inner_alpha).run()


def standard_train(detector, dataset: Sequence[Sample], cfg: RecipeConfig, seed: int = 0) -> TrainState:
    """Benign training with the same optimizer, schedule and batch order machinery."""
    cfg = replace(cfg, replay_m=1)
    return Trainer(detector, dataset, cfg, seed, method="standard").run()


def resume(detector, dataset: Sequence[Sample], checkpoint: str | Path | TrainState) -> TrainState:
    state = checkpoint if isinstance(checkpoint, TrainState) else TrainState.load(checkpoint)
    return Trainer(detector, dataset, state.config, state.seed, method=state.method,
                   inner_steps=state.extra.get("inner_steps", 10),
                   inner_alpha=state.extra.get("inner_alpha", 2.0), state=state).run()


# ------------------------------------------------------------ backbone loading

def load_backbone_checkpoint(detector, checkpoint, mode: str):
    """Replace the backbone parameters from an upstream checkpoint.

    ``checkpoint`` is a path or a dict with a ``"backbone"`` state dict.
    ``mode == "random"`` keeps the current initialization. The provenance tag
    is stored on the detector and copied into the training state.
    """
    if mode not in BACKBONE_INITS:
        raise ConfigError(f"backbone_init must be one of {BACKBONE_INITS}")
    if mode == "random":
        detector.provenance = "random"
        return detector
    if isinstance(checkpoint, (str, Path)):
        checkpoint = torch.load(checkpoint, weights_only=False)
    state = checkpoint["backbone"] if "backbone" in checkpoint else checkpoint
    named = detector.named_param_groups()["backbone"]
    missing = sorted(set(named) - set(state))
    unexpected = sorted(set(state) - set(named))
    bad = [f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(named[k].shape)}"
           for k in sorted(set(named) & set(state)) if tuple(state[k].shape) != tuple(named[k].shape)]
    if missing or unexpected or bad:
        raise ContractError("backbone checkpoint does not fit the detector: "
                            + "; ".join([f"missing {missing}"] * bool(missing)
                                        + [f"unexpected {unexpected}"] * bool(unexpected) + bad))
    with torch.no_grad():
        for k, p in named.items():
            p.copy_(torch.as_tensor(state[k], dtype=p.dtype))
    detector.provenance = mode
    return detector

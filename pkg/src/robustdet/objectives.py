"""Scalar attack/training objectives built from per-instance detection losses."""

from __future__ import annotations

import enum
from collections import Counter
from typing import Sequence

import numpy as np

from .core import ContractError, PerInstanceLosses


class ObjectiveKind(enum.Enum):
    CLS = "cls"
    REG = "reg"
    VANILLA = "vanilla"
    CWA = "cwa"
    MTD = "mtd"

    @classmethod
    def parse(cls, value: "ObjectiveKind | str") -> "ObjectiveKind":
        if isinstance(value, ObjectiveKind):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown objective {value!r}; expected one of {choices}") from None

    def __str__(self) -> str:
        return self.value


def cwa_weights(labels: Sequence[int]) -> np.ndarray:
    """Inverse in-image class frequency, rescaled so the weights sum to K.

    >>> cwa_weights([0, 0, 1]).tolist()
    [0.75, 0.75, 1.5]
    """
    labels = [int(v) for v in np.asarray(labels).reshape(-1)]
    if not labels:
        raise ContractError("no instances")
    counts = Counter(labels)
    raw = np.array([1.0 / counts[c] for c in labels])
    return raw * (len(labels) / raw.sum())


def _is_torch(v) -> bool:
    return type(v).__module__.startswith("torch")


def combine(kind: ObjectiveKind, cls, reg, weights=None):
    """Reduce per-instance loss vectors to the scalar objective of ``kind``.

    Works on numpy arrays and on torch tensors; with tensors the result stays
    in the autograd graph and only the selected terms receive gradient.
    """
    kind = ObjectiveKind.parse(kind)
    if kind is ObjectiveKind.CLS:
        return cls.sum()
    if kind is ObjectiveKind.REG:
        return reg.sum()
    if kind is ObjectiveKind.VANILLA:
        return (cls + reg).sum()
    if kind is ObjectiveKind.MTD:
        if _is_torch(cls):
            import torch

            return torch.maximum(cls, reg).sum()
        return np.maximum(cls, reg).sum()
    if weights is None:
        raise ContractError("CWA objective requires class weights")
    if len(weights) != len(cls):
        raise ContractError(f"{len(weights)} class weights for {len(cls)} instances")
    return (weights * (cls + reg)).sum()


def objective_value(kind: ObjectiveKind | str, losses: PerInstanceLosses,
                    weights: Sequence[float] | None = None) -> float:
    kind = ObjectiveKind.parse(kind)
    if losses.K < 1:
        raise ContractError("objective needs at least one instance")
    if kind is ObjectiveKind.CWA and weights is None:
        raise ContractError("CWA objective requires class weights")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    return float(combine(kind, np.asarray(losses.cls), np.asarray(losses.reg), w))


def needs_weights(kind: ObjectiveKind | str) -> bool:
    return ObjectiveKind.parse(kind) is ObjectiveKind.CWA

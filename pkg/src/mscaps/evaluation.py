"""Scene-wide inference and change-detection scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .capsnet import min_patch_size, network_forward
from .preprocessing import DifferenceImage, iter_patch_batches
from .tensor import Tensor
from .training import Checkpoint


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def N(self) -> int:
        return self.TP + self.TN + self.FP + self.FN


@dataclass(frozen=True)
class Metrics:
    FP: int
    FN: int
    OE: int
    PCC: float  # percent
    KC: float  # kappa scaled to 0..100

    def record(self) -> str:
        return f"FP={self.FP} FN={self.FN} OE={self.OE} PCC={self.PCC:.2f} KC={self.KC:.2f}"

    def as_dict(self) -> dict[str, float]:
        return {"FP": self.FP, "FN": self.FN, "OE": self.OE, "PCC": self.PCC, "KC": self.KC}


def infer_change_map(di: DifferenceImage, ckpt: Checkpoint, batch: int = 256) -> np.ndarray:
    """Classify every pixel from its mirror-padded patch; returns uint8 {0, 1}."""
    params = ckpt.params
    r = params.r
    if r < min_patch_size(params.arch):
        raise ValueError(f"checkpoint patch size {r} below network minimum {min_patch_size(params.arch)}")
    out = np.zeros(di.values.size, dtype=np.uint8)
    frozen = params.copy()
    for t in frozen.tensors.values():
        t.requires_grad = False
    for flat, patches in iter_patch_batches(di, r, batch):
        cls, _, _ = network_forward(Tensor(patches), frozen, ckpt.config.routing_iters)
        out[flat] = cls
    return out.reshape(di.shape)


def confusion(change_map: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """FP = predicted changed but truly unchanged; FN the reverse."""
    change_map = np.asarray(change_map)
    truth = np.asarray(truth)
    if change_map.shape != truth.shape:
        raise ValueError(f"map {change_map.shape} and truth {truth.shape} differ in shape")
    tp, tn, fp, fn = _kernels.confusion_counts(change_map, truth)
    return ConfusionCounts(tp, tn, fp, fn)


def metrics(c: ConfusionCounts) -> Metrics:
    n = c.N
    if n <= 0:
        raise ValueError("no pixels to score")
    oe = c.FP + c.FN
    pcc = 100.0 * (n - oe) / n
    # kappa from integer counts: (N*agree - chance) / (N^2 - chance), exact until the final division
    agree = c.TP + c.TN
    chance = (c.TP + c.FP) * (c.TP + c.FN) + (c.TN + c.FN) * (c.TN + c.FP)
    if chance == n * n:
        kc = 100.0 if agree == n else 0.0
    else:
        kc = 100.0 * (n * agree - chance) / (n * n - chance)
    return Metrics(c.FP, c.FN, oe, pcc, kc)


def parse_record(line: str) -> dict[str, float]:
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        out[k] = int(v) if k in ("FP", "FN", "OE") else float(v)
    return out

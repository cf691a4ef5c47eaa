"""Stage functions shared by the command line and the acceptance tests."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .capsnet import min_patch_size
from .evaluation import Metrics, confusion, infer_change_map, metrics
from .imageio import quantize_unit, read_image, write_image
from .preprocessing import DifferenceImage, ScenePair, log_ratio_di, synth_scene
from .pseudo_label import LabelMap, hierarchical_label, sample_training_set
from .training import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)

SYNTH_GAIN = 1000.0  # intensity -> 16-bit PGM count
DEFAULT_LABEL_WINDOW = 9


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"{stage} stage: {msg}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    """Re-raise data and I/O failures as a StageError carrying the stage name."""
    try:
        yield
    except StageError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise StageError(name, str(exc)) from exc


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Pin BLAS/OpenMP pools to a single thread."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def synth_to_counts(pair: ScenePair, gain: float = SYNTH_GAIN) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integer images as written by ``synth``: uint16 intensities and a 0/255 truth."""
    def q(img):
        return np.clip(np.rint(img * gain), 0, 65535).astype(np.uint16)

    return q(pair.img1), q(pair.img2), (pair.truth * 255).astype(np.uint8)


def write_synth(out: Path, seed: int, size: tuple[int, int], regions, looks: int, contrast: float) -> None:
    pair = synth_scene(seed, size[0], size[1], regions, looks, contrast)
    a, b, t = synth_to_counts(pair)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "img1.pgm", a)
    write_image(out / "img2.pgm", b)
    write_image(out / "truth.pgm", t)


def load_pair(img1, img2) -> ScenePair:
    a = read_image(img1)
    b = read_image(img2)
    return ScenePair(a.astype(np.float64), b.astype(np.float64))


def quantize_di(di: DifferenceImage) -> np.ndarray:
    """8-bit rendering written to di.pgm."""
    return quantize_unit(di.values)


def dequantize_di(counts: np.ndarray) -> DifferenceImage:
    """DI read back from a file: 8-bit counts over 255, wider counts over 65535."""
    counts = np.asarray(counts)
    if counts.ndim != 2:
        raise ValueError(f"difference image must be a single-band 2-D image, got shape {counts.shape}")
    if counts.min(initial=0) < 0 or counts.max(initial=0) > 65535:
        raise ValueError("difference image values outside the 16-bit range")
    scale = 255.0 if counts.max(initial=0) <= 255 else 65535.0
    return DifferenceImage(counts.astype(np.float64) / scale)


def make_di(pair: ScenePair) -> DifferenceImage:
    return log_ratio_di(pair)


def label_scene(di: DifferenceImage, seed: int = 0, window: int = DEFAULT_LABEL_WINDOW) -> LabelMap:
    return hierarchical_label(di, seed=seed, window=window)


def fit(di: DifferenceImage, labels: LabelMap, cfg: TrainConfig, on_epoch=None) -> Checkpoint:
    if cfg.r < min_patch_size():
        raise ValueError(f"patch size {cfg.r} below network minimum {min_patch_size()}")
    if labels.shape != di.shape:
        raise ValueError(f"label map {labels.shape} and DI {di.shape} differ in shape")
    tset = sample_training_set(labels, cfg.n_samples, cfg.seed, cfg.r)
    return train(di, tset, cfg, on_epoch=on_epoch)


def change_map_image(cm: np.ndarray) -> np.ndarray:
    return (np.asarray(cm) != 0).astype(np.uint8) * 255


@dataclass
class RunResult:
    di: DifferenceImage
    labels: LabelMap
    checkpoint: Checkpoint
    change_map: np.ndarray
    metrics: Metrics | None


def run_pipeline(pair: ScenePair, cfg: TrainConfig, window: int = DEFAULT_LABEL_WINDOW,
                 truth: np.ndarray | None = None, out: Path | None = None) -> RunResult:
    """DI, pseudo labels, training, inference and (with truth) scoring."""
    with stage("di"):
        di = make_di(pair)
    with stage("label"):
        labels = label_scene(di, cfg.seed, window)
    log.info("labels %s", labels.counts())
    with stage("train"):
        ckpt = fit(di, labels, cfg)
    with stage("infer"):
        cm = infer_change_map(di, ckpt)
    m = None
    if truth is not None:
        with stage("eval"):
            m = metrics(confusion(cm, np.asarray(truth) != 0))
    if out is not None:
        with stage("write"):
            out.mkdir(parents=True, exist_ok=True)
            write_image(out / "di.pgm", quantize_di(di))
            write_image(out / "labels.pgm", labels.to_gray())
            ckpt.save(out / "model.ckpt")
            write_image(out / "changemap.png", change_map_image(cm))
            if m is not None:
                (out / "metrics.txt").write_text(m.record() + "\n")
    return RunResult(di, labels, ckpt, cm, m)

"""Parameter initialization, Adam, the mini-batch training loop and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"MSCAPS01"
    uint32  length of the metadata block in bytes
    bytes   UTF-8 text, one ``key=value`` per line
    float64 parameter blocks, concatenated in the order listed under ``params``

``params`` in the metadata is ``name:d0xd1x...`` entries joined by ``;``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .capsnet import Arch, LossConfig, MsCapsParams, margin_loss, network_forward, param_shapes
from .preprocessing import DifferenceImage, extract_patches
from .pseudo_label import TrainingSet
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"MSCAPS01"


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    routing_iters: int = 3
    seed: int = 0
    r: int = 9
    n_samples: int = 1000
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.routing_iters < 1 or self.n_samples < 1:
            raise ValueError(f"invalid training config {self}")
        if self.r % 2 == 0:
            raise ValueError(f"patch size must be odd, got {self.r}")


def _glorot_halfwidth(shape: tuple[int, ...], name: str) -> float:
    if name.startswith("afc.attn"):
        fan_in = fan_out = shape[0]
    elif len(shape) == 4:
        k = shape[0] * shape[1]
        fan_in, fan_out = k * shape[2], k * shape[3]
    else:
        # capsule transforms: [slots, d_in, n_out * d_out]; each matrix maps d_in -> d_out
        d_in = shape[1]
        d_out = 16 if name.startswith("classcaps") else d_in
        fan_in, fan_out = d_in, d_out
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(seed: int, cfg: TrainConfig, arch: Arch = Arch()) -> MsCapsParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg.r, arch).items():
        a = _glorot_halfwidth(shape, name)
        tensors[name] = Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)
    return MsCapsParams(tensors, cfg.r, arch)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; arrays in ``params`` are updated in place."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("parameter, gradient and optimizer-state names differ")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class Checkpoint:
    params: MsCapsParams
    config: TrainConfig
    losses: list[float] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        meta = {"format": "1", "r": str(self.params.r)}
        for f in fields(Arch):
            meta[f"arch.{f.name}"] = str(getattr(self.params.arch, f.name))
        for key, val in asdict(self.config).items():
            if key == "loss":
                for lk, lv in val.items():
                    meta[f"loss.{lk}"] = repr(lv)
            else:
                meta[f"train.{key}"] = repr(val)
        meta["losses"] = ",".join(repr(float(x)) for x in self.losses)
        meta["params"] = ";".join(f"{k}:{'x'.join(map(str, t.shape))}" for k, t in self.params.items())
        text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
        blocks = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in self.params.items())
        return MAGIC + struct.pack("<I", len(text)) + text + blocks

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointFormatError("bad magic; not an MSCAPS01 checkpoint")
        if len(buf) < 12:
            raise CheckpointFormatError("truncated header")
        (n,) = struct.unpack("<I", buf[8:12])
        try:
            text = buf[12:12 + n].decode("utf-8")
            meta = dict(line.split("=", 1) for line in text.splitlines() if line)
            arch = Arch(**{f.name: int(meta[f"arch.{f.name}"]) for f in fields(Arch)})
            loss = LossConfig(**{f.name: float(meta[f"loss.{f.name}"]) for f in fields(LossConfig)})
            tkw = {}
            for f in fields(TrainConfig):
                if f.name == "loss":
                    continue
                raw = meta[f"train.{f.name}"]
                tkw[f.name] = float(raw) if f.name == "lr" else int(raw)
            config = TrainConfig(loss=loss, **tkw)
            r = int(meta["r"])
            losses = [float(x) for x in meta["losses"].split(",")] if meta["losses"] else []
            specs = [entry.split(":") for entry in meta["params"].split(";")]
        except (KeyError, ValueError, UnicodeDecodeError, TypeError) as exc:
            raise CheckpointFormatError(f"corrupt checkpoint metadata: {exc}") from exc
        expected = param_shapes(r, arch)
        pos = 12 + n
        tensors = {}
        for name, dims in specs:
            shape = tuple(int(d) for d in dims.split("x"))
            if expected.get(name) != shape:
                raise CheckpointFormatError(f"unexpected parameter {name} with shape {shape}")
            count = int(np.prod(shape))
            chunk = buf[pos:pos + 8 * count]
            if len(chunk) != 8 * count:
                raise CheckpointFormatError(f"truncated parameter block {name}")
            tensors[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64), True)
            pos += 8 * count
        if pos != len(buf):
            raise CheckpointFormatError("trailing bytes after parameter blocks")
        return cls(MsCapsParams(tensors, r, arch), config, losses)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def batch_loss(params: MsCapsParams, patches: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> Tensor:
    _, _, v_o = network_forward(Tensor(patches), params, cfg.routing_iters)
    return T.mean(margin_loss(v_o, labels, cfg.loss))


def train(
    di: DifferenceImage,
    tset: TrainingSet,
    cfg: TrainConfig,
    params: MsCapsParams | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Adam on the mean margin loss of shuffled mini-batches.

    Everything runs in one thread in a fixed order, so a given config and
    seed always produce the same checkpoint bytes.
    """
    if len(tset) == 0:
        raise ValueError("training set is empty")
    if tset.r != cfg.r:
        raise ValueError(f"training set patch size {tset.r} differs from config r={cfg.r}")
    if params is None:
        params = init_params(cfg.seed, cfg)
    patches = extract_patches(di, tset.centers, cfg.r)
    labels = tset.labels
    arrays = {k: t.data for k, t in params.items()}
    state = OptimizerState.like(arrays)
    rng = np.random.default_rng([cfg.seed, 1])
    losses: list[float] = []
    n = len(tset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            params.zero_grad()
            loss = batch_loss(params, patches[idx], labels[idx], cfg)
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
            adam_step(arrays, grads, state, cfg.lr)
            total += loss.item() * idx.size
        losses.append(total / n)
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    params.zero_grad()
    return Checkpoint(params, cfg, losses)

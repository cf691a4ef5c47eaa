"""Two-scale capsule network over AFC features, with routing-by-agreement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .afc import AfcParams, afc_forward
from .tensor import DimensionError, Tensor

PRIMARY_KERNELS = (3, 5)
CAPS_DIM = 8
CLASS_DIM = 16
N_CLASSES = 2


@dataclass(frozen=True)
class Arch:
    """Layer widths. Defaults give 64 fused channels -> 8 capsule types of 8 dims."""

    c0: int = 32
    c: int = 64
    attn_k: int = 3
    d: int = CAPS_DIM
    conv_types: int = 8
    extent: int = 3
    class_dim: int = CLASS_DIM

    @property
    def n(self) -> int:
        return self.c // self.d


@dataclass(frozen=True)
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not (0 < self.m_minus < self.m_plus < 1) or self.lam <= 0:
            raise ValueError(f"invalid margin-loss config {self}")


def min_patch_size(arch: Arch = Arch()) -> int:
    # the k=5 primary layer followed by a valid conv-capsule window must leave >= 1 cell
    return max(PRIMARY_KERNELS) + arch.extent - 1


def grid_sizes(r: int, arch: Arch = Arch()) -> list[tuple[int, int]]:
    """(primary grid, conv-capsule grid) side lengths per scale branch."""
    if r < min_patch_size(arch):
        raise ValueError(f"patch size {r} too small; the network needs r >= {min_patch_size(arch)}")
    return [(r - k + 1, r - k + 1 - arch.extent + 1) for k in PRIMARY_KERNELS]


def param_shapes(r: int, arch: Arch = Arch()) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in serialization order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for b in range(3):
        shapes[f"afc.branch{b + 1}"] = (3, 3, 1, arch.c0)
    for b in range(3):
        shapes[f"afc.attn{b + 1}"] = (arch.attn_k,)
    for b in range(3):
        shapes[f"afc.match{b + 1}"] = (1, 1, arch.c0, arch.c)
    for i, k in enumerate(PRIMARY_KERNELS):
        shapes[f"primary{i + 1}"] = (k, k, arch.c, arch.n * arch.d)
    for i in range(len(PRIMARY_KERNELS)):
        shapes[f"convcaps{i + 1}"] = (arch.extent * arch.extent * arch.n, arch.d, arch.conv_types * arch.d)
    for i, (_, g) in enumerate(grid_sizes(r, arch)):
        shapes[f"classcaps{i + 1}"] = (g * g * arch.conv_types, arch.d, N_CLASSES * arch.class_dim)
    return shapes


class MsCapsParams:
    """All learnable tensors, addressable by canonical name."""

    def __init__(self, tensors: dict[str, Tensor], r: int, arch: Arch = Arch()):
        expected = param_shapes(r, arch)
        if list(tensors) != list(expected):
            raise ValueError(f"parameter names/order mismatch: {list(tensors)}")
        for name, shp in expected.items():
            if tensors[name].shape != shp:
                raise DimensionError(f"{name}: expected shape {shp}, got {tensors[name].shape}")
        self.tensors = tensors
        self.r = r
        self.arch = arch

    @classmethod
    def zeros(cls, r: int, arch: Arch = Arch()) -> "MsCapsParams":
        return cls({k: Tensor(np.zeros(s), True) for k, s in param_shapes(r, arch).items()}, r, arch)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    @property
    def afc(self) -> AfcParams:
        t = self.tensors
        return AfcParams(
            [t[f"afc.branch{i}"] for i in (1, 2, 3)],
            [t[f"afc.attn{i}"] for i in (1, 2, 3)],
            [t[f"afc.match{i}"] for i in (1, 2, 3)],
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "MsCapsParams":
        return MsCapsParams({k: Tensor(v.data.copy(), True) for k, v in self.tensors.items()}, self.r, self.arch)

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


# ---------------------------------------------------------------------------
# layers

def squash(s, axis: int = -1) -> Tensor:
    return T.squash(s, axis)


def primary_caps_forward(f, kernel, d: int = CAPS_DIM) -> Tensor:
    """Valid conv, then reshape channels into n capsules of d dims and squash.

    [.., w, w, c] -> [.., w1, w1, n, d]
    """
    f, kernel = T.as_tensor(f), T.as_tensor(kernel)
    cout = kernel.shape[-1]
    if cout % d:
        raise ValueError(f"{cout} output channels not divisible by capsule dim {d}")
    out = T.conv2d(f, kernel, padding="valid")
    out = T.reshape(out, out.shape[:-1] + (cout // d, d))
    return T.squash(out)


def _route_slot_major(u: Tensor, iters: int) -> tuple[Tensor, np.ndarray]:
    # u: [I, N, J, E] -> (v [N, J, E], per-iteration coefficients [iters, N, I, J])
    if iters < 1:
        raise ValueError("routing needs at least one iteration")
    data = np.ascontiguousarray(u.data)
    v, cs, ss, vs = _kernels.routing_forward(data, iters)

    def back(g):
        return (_kernels.routing_backward(data, cs, ss, vs, g),)

    return T.make_op(v, (u,), back, "routing"), cs


def dynamic_routing(u_hat, iters: int = 3, trace: list | None = None) -> tuple[Tensor, Tensor]:
    """Routing-by-agreement over predictions [.., I, J, E].

    Returns (v [.., J, E], c [.., I, J]); gradients flow through every
    unrolled iteration. If ``trace`` is a list, each iteration's coupling
    coefficients are appended to it.
    """
    u_hat = T.as_tensor(u_hat)
    if u_hat.ndim < 3:
        raise DimensionError(f"predictions need shape [.., I, J, E], got {u_hat.shape}")
    lead = u_hat.shape[:-3]
    i_n, j_n, e_n = u_hat.shape[-3:]
    u = T.transpose(T.reshape(u_hat, (-1, i_n, j_n, e_n)), (1, 0, 2, 3))
    v, cs = _route_slot_major(u, iters)
    if trace is not None:
        trace.extend(c.reshape(lead + (i_n, j_n)) for c in cs)
    return T.reshape(v, lead + (j_n, e_n)), Tensor(cs[-1].reshape(lead + (i_n, j_n)))


def conv_caps_forward(grid, W, kernel_extent: int = 3, iters: int = 3, out_dim: int = CAPS_DIM) -> Tensor:
    """Local capsule layer with grid-shared transforms.

    ``grid`` is [B, g, g, n, d]; ``W`` is [extent^2 * n, d, n_out * out_dim],
    one d -> (n_out, out_dim) transform per (window offset, input type).
    Output is [B, g - extent + 1, g - extent + 1, n_out, out_dim].
    """
    grid, W = T.as_tensor(grid), T.as_tensor(W)
    if kernel_extent % 2 == 0:
        raise ValueError("conv-capsule extent must be odd")
    single = grid.ndim == 4
    if single:
        grid = T.reshape(grid, (1,) + grid.shape)
    bsz, g, _, n, d = grid.shape
    if kernel_extent > g:
        raise ValueError(f"conv-capsule window {kernel_extent} larger than grid {g}")
    slots = kernel_extent * kernel_extent * n
    if W.shape[0] != slots or W.shape[1] != d or W.shape[2] % out_dim:
        raise DimensionError(f"transform shape {W.shape} does not fit grid {grid.shape}")
    n_out = W.shape[2] // out_dim
    go = g - kernel_extent + 1
    win = T.extract_windows(T.reshape(grid, (bsz, g, g, n * d)), kernel_extent)
    positions = bsz * go * go
    caps = T.transpose(T.reshape(win, (positions, slots, d)), (1, 0, 2))  # [slots, P, d]
    u = T.matmul(caps, W)  # [slots, P, n_out*out_dim]
    v, _ = _route_slot_major(T.reshape(u, (slots, positions, n_out, out_dim)), iters)
    out = T.reshape(v, (bsz, go, go, n_out, out_dim))
    return T.reshape(out, out.shape[1:]) if single else out


def class_caps_forward(grid, W, iters: int = 3, class_dim: int = CLASS_DIM) -> Tensor:
    """Fully connected capsules: every grid capsule votes for each class.

    ``grid`` [B, g, g, n, d] (or unbatched), ``W`` [g*g*n, d, classes*class_dim];
    returns [B, classes, class_dim].
    """
    grid, W = T.as_tensor(grid), T.as_tensor(W)
    single = grid.ndim == 4
    if single:
        grid = T.reshape(grid, (1,) + grid.shape)
    bsz = grid.shape[0]
    d = grid.shape[-1]
    n_in = int(np.prod(grid.shape[1:-1]))
    if W.shape[0] != n_in or W.shape[1] != d or W.shape[2] % class_dim:
        raise DimensionError(f"class transform {W.shape} does not fit grid {grid.shape}")
    n_cls = W.shape[2] // class_dim
    caps = T.transpose(T.reshape(grid, (bsz, n_in, d)), (1, 0, 2))  # [I, B, d]
    u = T.matmul(caps, W)  # [I, B, classes*class_dim]
    v, _ = _route_slot_major(T.reshape(u, (n_in, bsz, n_cls, class_dim)), iters)
    return T.reshape(v, v.shape[1:]) if single else v


def fuse_and_classify(v_o1, v_o2) -> tuple[Tensor, np.ndarray, Tensor]:
    """Sum the two scales' class capsules; class = longest vector, ties -> 0."""
    v_o = T.add(v_o1, v_o2)
    norms = T.norm(v_o, axis=-1)
    cls = np.argmax(norms.data, axis=-1)  # first maximum wins, so exact ties go to class 0
    return v_o, cls, norms


def margin_loss(v_o, label, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-sample margin loss summed over class capsules.

    ``v_o`` is [.., classes, dim]; ``label`` is an int or an int array
    matching the leading axes. Returns a tensor over the leading axes.
    """
    v_o = T.as_tensor(v_o)
    lengths = T.norm(v_o, axis=-1)
    onehot = np.zeros(lengths.shape)
    np.put_along_axis(onehot, np.asarray(label, dtype=np.int64)[..., None], 1.0, axis=-1)
    present = T.square(T.relu(T.sub(cfg.m_plus, lengths)))
    absent = T.square(T.relu(T.sub(lengths, cfg.m_minus)))
    per_class = T.add(T.mul(present, onehot), T.scale(T.mul(absent, 1.0 - onehot), cfg.lam))
    return T.sum(per_class, axis=-1)


def margin_loss_from_norms(norms, label, cfg: LossConfig = LossConfig()) -> float:
    norms = np.asarray(norms, dtype=np.float64)
    t = np.zeros_like(norms)
    t[int(label)] = 1.0
    return float(
        np.sum(t * np.maximum(0.0, cfg.m_plus - norms) ** 2 + cfg.lam * (1 - t) * np.maximum(0.0, norms - cfg.m_minus) ** 2)
    )


def network_forward(patch, params: MsCapsParams, iters: int = 3, shapes: dict | None = None):
    """Full forward pass. ``patch`` is [r, r, 1] or a batch [B, r, r, 1].

    Returns (class, norms, v_o). When ``shapes`` is a dict it is filled with
    the intermediate shapes, keyed by stage.
    """
    patch = T.as_tensor(patch)
    r = patch.shape[-2]
    if r < min_patch_size(params.arch):
        raise ValueError(f"patch size {r} too small; the network needs r >= {min_patch_size(params.arch)}")
    if r != params.r:
        raise DimensionError(f"parameters were built for r={params.r}, got patch size {r}")
    feat = afc_forward(patch, params.afc)
    if shapes is not None:
        shapes["afc"] = feat.shape
    outs = []
    for i in range(len(PRIMARY_KERNELS)):
        prim = primary_caps_forward(feat, params[f"primary{i + 1}"], params.arch.d)
        conv = conv_caps_forward(prim, params[f"convcaps{i + 1}"], params.arch.extent, iters, params.arch.d)
        cls_caps = class_caps_forward(conv, params[f"classcaps{i + 1}"], iters, params.arch.class_dim)
        if shapes is not None:
            shapes[f"primary{i + 1}"] = prim.shape
            shapes[f"convcaps{i + 1}"] = conv.shape
            shapes[f"classcaps{i + 1}"] = cls_caps.shape
        outs.append(cls_caps)
    v_o, cls, norms = fuse_and_classify(*outs)
    return cls, norms, v_o

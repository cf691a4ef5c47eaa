"""Adaptive fusion convolution: three atrous branches with channel attention."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .tensor import DimensionError, Tensor

DILATIONS = (1, 2, 3)


@dataclass
class AfcParams:
    branch_kernels: list[Tensor]  # 3 x [3, 3, 1, c0]
    attn_kernels: list[Tensor]  # 3 x [k]
    match_kernels: list[Tensor]  # 3 x [1, 1, c0, c]
    dilations: tuple[int, ...] = field(default=DILATIONS)

    def __post_init__(self):
        if not (len(self.branch_kernels) == len(self.attn_kernels) == len(self.match_kernels) == len(self.dilations)):
            raise ValueError("AFC needs one kernel of each kind per branch")
        c0 = self.branch_kernels[0].shape[-1]
        c = self.match_kernels[0].shape[-1]
        for bk, mk in zip(self.branch_kernels, self.match_kernels):
            if bk.shape[-1] != c0 or mk.shape[-2] != c0 or mk.shape[-1] != c:
                raise DimensionError("AFC branches disagree on channel counts")

    @property
    def c0(self) -> int:
        return self.branch_kernels[0].shape[-1]

    @property
    def c(self) -> int:
        return self.match_kernels[0].shape[-1]

    def tensors(self) -> list[Tensor]:
        return [*self.branch_kernels, *self.attn_kernels, *self.match_kernels]


def channel_attention(f_in, attn_kernel) -> Tensor:
    """Rescale each channel by sigmoid(conv1d(spatial mean))."""
    f_in = T.as_tensor(f_in)
    if f_in.ndim not in (3, 4):
        raise DimensionError(f"expected [h, w, c] or [b, h, w, c], got {f_in.shape}")
    weights = T.sigmoid(T.conv1d_channels(T.global_avg_pool(f_in), attn_kernel))
    if f_in.ndim == 4:
        weights = T.reshape(weights, (weights.shape[0], 1, 1, weights.shape[1]))
    return T.mul(f_in, weights)


def afc_branch(patch, params: AfcParams, b: int) -> Tensor:
    feat = T.conv2d(patch, params.branch_kernels[b], dilation=params.dilations[b], padding="same")
    feat = channel_attention(feat, params.attn_kernels[b])
    return T.conv2d(feat, params.match_kernels[b])


def afc_forward(patch, params: AfcParams) -> Tensor:
    """[.., r, r, 1] -> [.., r, r, c]: pixel-wise sum of the matched branches."""
    out = afc_branch(patch, params, 0)
    for b in range(1, len(params.dilations)):
        out = T.add(out, afc_branch(patch, params, b))
    return out

"""Context-aware module: SE gating of a hybrid-dilated branch plus a residual path.

    out = relu(se(hdc_concat) * hdc(x) + res(x))

where ``*`` scales each channel of the HDC output by its SE gate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm, Conv, Module
from .tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    channel_scale,
    concat_channels,
    deconv_spec,
    global_avg_pool,
    relu,
    sigmoid,
    upsample2x_nearest,
)

DILATIONS = (1, 2, 3, 4)


@dataclass(frozen=True)
class CamConfig:
    index: int
    in_channels: int
    out_channels: int
    stride: int = 2
    se_bn: bool = True
    init_std: float = 0.001
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.out_channels % 4 or self.out_channels <= 0:
            raise ValueError(f"CAM {self.index}: out_channels must be a positive multiple of 4, got {self.out_channels}")
        if self.stride not in (1, 2):
            raise ValueError(f"CAM {self.index}: stride must be 1 or 2, got {self.stride}")

    @property
    def quarter(self) -> int:
        return self.out_channels // 4


class Cam(Module):
    def __init__(self, cfg: CamConfig, rng: np.random.Generator):
        self.cfg = cfg
        c_in, c, q = cfg.in_channels, cfg.out_channels, cfg.quarter
        std = cfg.init_std

        def bn(ch):
            return BatchNorm(ch, cfg.bn_momentum, cfg.bn_eps)

        self.se_reduce = Conv(ConvSpec(1, 1, c, q), rng, std)
        self.se_bn = bn(q) if cfg.se_bn else None
        self.se_expand = Conv(ConvSpec(1, 1, q, c), rng, std)

        self.hdc_convs = [Conv(ConvSpec(3, 3, c_in, q, dilation=d, padding=d), rng, std) for d in DILATIONS]
        self.hdc_bns = [bn(q) for _ in DILATIONS]
        if cfg.stride == 2:
            self.hdc_fuse = Conv(deconv_spec(c, c), rng, std, transposed=True)
        else:
            self.hdc_fuse = Conv(ConvSpec(3, 3, c, c, padding=1), rng, std)
        self.hdc_bn = bn(c)

        self.res_conv = Conv(ConvSpec(1, 1, c_in, c), rng, std)
        self.res_bn = bn(c)

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4:
            raise ShapeError(f"cam[{self.cfg.index}]", "rank", 4, x.data.ndim)
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"cam[{self.cfg.index}]", "input channels", self.cfg.in_channels, x.shape[1])


def hdc_concat(cam: Cam, x: Tensor, mode: str = "train") -> Tensor:
    """The four dilated 3x3 branches (BN + ReLU each), concatenated to C_k channels."""
    cam._check_input(x)
    parts = [relu(bn(conv(x), mode)) for conv, bn in zip(cam.hdc_convs, cam.hdc_bns)]
    return concat_channels(parts)


def hdc_fuse(cam: Cam, concat: Tensor, mode: str = "train") -> Tensor:
    return cam.hdc_bn(cam.hdc_fuse(concat), mode)


def hdc_forward(cam: Cam, x: Tensor, mode: str = "train") -> Tensor:
    return hdc_fuse(cam, hdc_concat(cam, x, mode), mode)


def se_forward(cam: Cam, feats: Tensor, mode: str = "train") -> Tensor:
    """Channel gate in (0, 1) of shape ``(N, C_k, 1, 1)`` computed from ``feats``."""
    if feats.data.ndim != 4 or feats.shape[1] != cam.cfg.out_channels:
        got = feats.shape[1] if feats.data.ndim == 4 else feats.shape
        raise ShapeError(f"cam[{cam.cfg.index}].se", "channels", cam.cfg.out_channels, got)
    z = cam.se_reduce(global_avg_pool(feats))
    if cam.se_bn is not None:
        z = cam.se_bn(z, mode)
    return sigmoid(cam.se_expand(relu(z)))


def res_forward(cam: Cam, x: Tensor, mode: str = "train") -> Tensor:
    cam._check_input(x)
    if cam.cfg.stride == 2:
        x = upsample2x_nearest(x)
    return cam.res_bn(cam.res_conv(x), mode)


def cam_forward(cam: Cam, x: Tensor, mode: str = "train", se_scale: Tensor | None = None) -> Tensor:
    """Fuse the three branches. ``se_scale`` replaces the learned gate when given."""
    concat = hdc_concat(cam, x, mode)
    f_hdc = hdc_fuse(cam, concat, mode)
    gate = se_forward(cam, concat, mode) if se_scale is None else se_scale
    f_res = res_forward(cam, x, mode)
    return relu(add(channel_scale(f_hdc, gate), f_res))

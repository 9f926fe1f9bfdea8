"""Progressive context refinement network: toy encoder, L parallel CAM decoders,
fused per-level prediction heads and an optional auxiliary head.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cam import Cam, CamConfig, cam_forward
from .nn import BatchNorm, Conv, Module
from .tensor import (
    ConvSpec,
    NumericalError,
    ShapeError,
    Tensor,
    add,
    backward,
    load_array,
    relu,
    save_array,
    scale,
    upsample2x_nearest,
    weighted_mse,
)

logger = logging.getLogger(__name__)

HEATMAP_STRIDE = 4


@dataclass(frozen=True)
class PcrConfig:
    K: int = 3
    L: int = 2
    channels: tuple[int, ...] = (32, 32, 32)
    joints: int = 17
    input_h: int = 64
    input_w: int = 48
    aux: bool = False
    cam_strides: tuple[int, ...] | None = None
    enc_channels: tuple[int, ...] | None = None
    in_channels: int = 3
    se_bn: bool = True
    init_std: float = 0.001
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.cam_strides is None:
            object.__setattr__(self, "cam_strides", default_cam_strides(self.K))
        else:
            object.__setattr__(self, "cam_strides", tuple(int(s) for s in self.cam_strides))
        if self.enc_channels is None:
            object.__setattr__(self, "enc_channels", (self.channels[0] if self.channels else 0,) * self.encoder_stages)
        else:
            object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        self.validate()

    @property
    def encoder_stages(self) -> int:
        return 2 + sum(1 for s in self.cam_strides if s == 2)

    @property
    def encoder_stride(self) -> int:
        return 2 ** self.encoder_stages

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return self.input_h // HEATMAP_STRIDE, self.input_w // HEATMAP_STRIDE

    def validate(self) -> None:
        if self.K < 1 or self.L < 1:
            raise ValueError(f"K and L must be >= 1 (got K={self.K}, L={self.L})")
        if len(self.channels) != self.K:
            raise ValueError(f"channel plan has {len(self.channels)} entries, expected K={self.K}")
        if any(c <= 0 or c % 4 for c in self.channels):
            raise ValueError(f"every CAM width must be a positive multiple of 4: {self.channels}")
        if len(self.cam_strides) != self.K or any(s not in (1, 2) for s in self.cam_strides):
            raise ValueError(f"cam_strides must be K values in {{1, 2}}: {self.cam_strides}")
        if len(self.enc_channels) != self.encoder_stages:
            raise ValueError(f"enc_channels needs {self.encoder_stages} entries, got {len(self.enc_channels)}")
        if self.joints < 1:
            raise ValueError("joints must be >= 1")
        st = self.encoder_stride
        if self.input_h % st or self.input_w % st:
            raise ValueError(f"input {self.input_h}x{self.input_w} not divisible by encoder stride {st}")
        if self.aux and self.K < 2:
            raise ValueError("auxiliary head needs a penultimate CAM (K >= 2)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PcrConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PcrConfig keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("channels", "cam_strides", "enc_channels"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def default_cam_strides(k: int) -> tuple[int, ...]:
    """Only the last CAM upsamples; with a stride-8 encoder the output stride is 4."""
    return (1,) * (k - 1) + (2,)


class ToyEncoder(Module):
    def __init__(self, cfg: PcrConfig, rng: np.random.Generator):
        self.convs = []
        self.bns = []
        c_in = cfg.in_channels
        for c in cfg.enc_channels:
            self.convs.append(Conv(ConvSpec(3, 3, c_in, c, stride=2, padding=1), rng, cfg.init_std))
            self.bns.append(BatchNorm(c, cfg.bn_momentum, cfg.bn_eps))
            c_in = c

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        for conv, bn in zip(self.convs, self.bns):
            x = relu(bn(conv(x), mode))
        return x


class Decoder(Module):
    def __init__(self, cfg: PcrConfig, rng: np.random.Generator):
        c_in = cfg.enc_channels[-1]
        self.cams = []
        for k, (c, s) in enumerate(zip(cfg.channels, cfg.cam_strides), start=1):
            cc = CamConfig(k, c_in, c, s, cfg.se_bn, cfg.init_std, cfg.bn_momentum, cfg.bn_eps)
            self.cams.append(Cam(cc, rng))
            c_in = c


class PcrModel(Module):
    def __init__(self, cfg: PcrConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = ToyEncoder(cfg, rng)
        self.decoders = [Decoder(cfg, rng) for _ in range(cfg.L)]
        c_last = cfg.channels[-1]
        self.heads = [Conv(ConvSpec(1, 1, c_last, cfg.joints), rng, cfg.init_std) for _ in range(cfg.L)]
        self.aux_head = None
        if cfg.aux:
            self.aux_head = Conv(ConvSpec(1, 1, cfg.channels[-2], cfg.joints), rng, cfg.init_std)


@dataclass
class PcrOutput:
    heatmaps: list[Tensor]
    aux: Tensor | None
    fused: list[Tensor]
    cam_outputs: list[list[Tensor]] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.heatmaps[-1]


def decoder_forward(model: PcrModel, feats: Tensor, level: int, mode: str = "train") -> list[Tensor]:
    """All K CAM outputs of decoder ``level`` (1-based); the last feeds the fusion."""
    if not 1 <= level <= model.cfg.L:
        raise ValueError(f"level {level} outside 1..{model.cfg.L}")
    expected = model.cfg.enc_channels[-1]
    if feats.data.ndim != 4 or feats.shape[1] != expected:
        raise ShapeError("decoder_forward", "feature channels", expected, feats.shape)
    outs = []
    x = feats
    for cam in model.decoders[level - 1].cams:
        x = cam_forward(cam, x, mode)
        outs.append(x)
    return outs


def pcr_forward(model: PcrModel, images, mode: str = "train") -> PcrOutput:
    """Level ``l`` predicts from the running sum of the last CAM output of levels 1..l."""
    cfg = model.cfg
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_h, cfg.input_w):
        raise ShapeError("pcr_forward", "image shape",
                         ("N", cfg.in_channels, cfg.input_h, cfg.input_w), x.shape)
    feats = model.encoder(x, mode)
    heatmaps, fused, cam_outputs = [], [], []
    running = None
    for level in range(1, cfg.L + 1):
        outs = decoder_forward(model, feats, level, mode)
        cam_outputs.append(outs)
        running = outs[-1] if running is None else add(running, outs[-1])
        fused.append(running)
        heatmaps.append(model.heads[level - 1](running))
    aux = None
    if model.aux_head is not None:
        aux = model.aux_head(cam_outputs[-1][-2])
        if cfg.cam_strides[-1] == 2:
            aux = upsample2x_nearest(aux)
    return PcrOutput(heatmaps, aux, fused, cam_outputs)


def multi_task_loss(out: PcrOutput, target, weights, level_weights=None, aux_weight: float = 1.0) -> tuple[Tensor, list[float]]:
    """Weighted sum of per-level heatmap losses plus the auxiliary loss.

    Returns the loss node and the unweighted per-term values (levels, then aux).
    """
    if level_weights is None:
        level_weights = [1.0] * len(out.heatmaps)
    if len(level_weights) != len(out.heatmaps):
        raise ValueError(f"{len(level_weights)} level weights for {len(out.heatmaps)} levels")
    terms = [weighted_mse(h, target, weights) for h in out.heatmaps]
    weighted = [scale(t, w) for t, w in zip(terms, level_weights)]
    if out.aux is not None:
        aux_term = weighted_mse(out.aux, target, weights)
        terms.append(aux_term)
        weighted.append(scale(aux_term, aux_weight))
    total = weighted[0]
    for t in weighted[1:]:
        total = add(total, t)
    return total, [t.item() for t in terms]


@dataclass
class StepResult:
    loss: float
    terms: list[float]


def train_step(model: PcrModel, images, target, weights, lr: float, level_weights=None,
               aux_weight: float = 1.0) -> StepResult:
    """One full-batch gradient-descent update of every parameter."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    model.zero_grad()
    out = pcr_forward(model, images, "train")
    loss, terms = multi_task_loss(out, target, weights, level_weights, aux_weight)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} (per-term: {terms})")
    backward(loss)
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {name}")
        if lr:
            p.data -= lr * p.grad
    return StepResult(value, terms)


def predict(model: PcrModel, images) -> np.ndarray:
    """Inference heatmaps (final level, running BN statistics)."""
    return pcr_forward(model, images, "infer").final.data


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: PcrModel, directory: str | Path, seed: int | None = None) -> Path:
    directory = Path(directory)
    blobs = directory / "tensors"
    blobs.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        fname = f"{name}.bin"
        save_array(blobs / fname, p.data)
        entries.append({"name": name, "kind": "param", "shape": list(p.shape), "file": f"tensors/{fname}"})
    for name, st in model.named_states():
        for part in ("running_mean", "running_var"):
            fname = f"{name}.{part}.bin"
            arr = getattr(st, part)
            save_array(blobs / fname, arr)
            entries.append({"name": f"{name}.{part}", "kind": "bn_state", "shape": list(arr.shape), "file": f"tensors/{fname}"})
    manifest = {"format": "pcrpose-checkpoint/1", "config": model.cfg.to_dict(), "seed": seed, "tensors": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(directory: str | Path) -> PcrModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = PcrConfig.from_dict(manifest["config"])
    model = PcrModel(cfg, seed=manifest.get("seed") or 0)
    params = dict(model.named_parameters())
    states = dict(model.named_states())
    for entry in manifest["tensors"]:
        arr = load_array(directory / entry["file"], entry["shape"])
        if entry["kind"] == "param":
            target = params[entry["name"]]
            if target.shape != arr.shape:
                raise ShapeError("load_checkpoint", entry["name"], target.shape, arr.shape)
            target.data = arr.copy()
        else:
            sname, part = entry["name"].rsplit(".", 1)
            setattr(states[sname], part, arr.copy())
    return model

"""Flat ``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import COCO_KAPPAS, EvalConfig
from .model import PcrConfig


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(" ", "").split(",") if x)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace(" ", "").split(",") if x)


# key -> (parser, default)
KEYS = {
    # model
    "K": (int, 3),
    "L": (int, 2),
    "channels": (_ints, None),
    "joints": (int, 17),
    "input_h": (int, 256),
    "input_w": (int, 192),
    "aux": (_bool, False),
    "cam_strides": (_ints, None),
    "enc_channels": (_ints, None),
    "se_bn": (_bool, True),
    "init_std": (float, 0.001),
    # training
    "seed": (int, 0),
    "lr": (float, 0.1),
    "steps": (int, 100),
    "sigma": (float, 2.0),
    "flip": (_bool, False),
    "level_weights": (_floats, None),
    "aux_weight": (float, 1.0),
    "crop_padding": (float, 1.25),
    # data strategies and evaluation
    "hn_score_thr": (float, 0.5),
    "pseudo_thr": (float, 0.9),
    "nms_threshold": (float, 0.9),
    "kappa": (float, None),
    # paths
    "annotations": (str, None),
    "images": (str, None),
    "detections": (str, None),
}

PATH_KEYS = ("annotations", "images", "detections")


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def model_config(self) -> PcrConfig:
        v = self.values
        channels = v["channels"] if v["channels"] is not None else (256,) * v["K"]
        try:
            return PcrConfig(K=v["K"], L=v["L"], channels=channels, joints=v["joints"], input_h=v["input_h"],
                             input_w=v["input_w"], aux=v["aux"], cam_strides=v["cam_strides"],
                             enc_channels=v["enc_channels"], se_bn=v["se_bn"], init_std=v["init_std"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def eval_config(self) -> EvalConfig:
        joints = self.values["joints"]
        if self.values["kappa"] is not None:
            return EvalConfig.uniform(joints, self.values["kappa"])
        if joints != len(COCO_KAPPAS):
            raise ConfigError(f"no standard falloff constants for {joints} joints; set 'kappa'")
        return EvalConfig()


def parse_config(text: str, base_dir: Path | None = None, check_paths: bool = True) -> RunConfig:
    values = {k: d for k, (_, d) in KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if check_paths:
        for key in PATH_KEYS:
            if values[key] is None:
                continue
            p = Path(values[key])
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            if not p.exists():
                raise ConfigError(f"{key}: path {p} does not exist")
            values[key] = str(p)
    cfg = RunConfig(values)
    if not values["lr"] >= 0:
        raise ConfigError("lr must be non-negative")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config("")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), base_dir=path.parent)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.values.items():
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

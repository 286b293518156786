"""Run configuration: every knob of the model, recursion, scene generator and
trainer, parseable from and serializable to a flat UTF-8 "key = value" file
with "#" comments.  The round trip is lossless (floats use repr)."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass

from .recursion import RecursionConfig
from .segnet import ModelConfig
from .synthdata import SceneConfig


@dataclass
class RunConfig:
    # model
    num_classes: int = 3
    mask_size: int = 40
    roi_size: int = 7
    feat_stride: int = 4
    backbone_channels: tuple = (16, 32, 64)
    seg_hidden: int = 16
    ae_hidden: int = 512
    fc_width: int = 256
    # recursion / ablations
    iterations: int = 4
    gates_enabled: bool = True
    train_recursive: bool = True
    no_autoencoder: bool = False
    fully_no_autoencoder: bool = False
    no_seg_aware: bool = False
    stop_seg_grad: bool = False
    # scenes
    img_w: int = 64
    img_h: int = 64
    min_instances: int = 1
    max_instances: int = 4
    min_visible_frac: float = 0.25
    color_jitter: float = 0.12
    noise_sigma: float = 0.02
    center_jitter: float = 0.3
    scale_jitter: float = 0.4
    jitters_per_instance: int = 12
    random_proposals: int = 16
    # optimisation
    lr: float = 0.001
    ae_lr_scale: float = 30.0
    grad_clip: float = 60.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    stage1_steps: int = 4000
    stage2_steps: int = 3000
    batch_proposals: int = 64
    fg_fraction: float = 0.25
    flip_prob: float = 0.5
    checkpoint_every: int = 500
    log_every: int = 50
    # data
    train_images: int = 200
    test_images: int = 200
    # misc
    seed: int = 7
    nms_thresh: float = 0.3

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes, mask_size=self.mask_size,
            roi_size=self.roi_size, feat_stride=self.feat_stride,
            backbone_channels=self.backbone_channels, seg_hidden=self.seg_hidden,
            ae_hidden=self.ae_hidden, fc_width=self.fc_width)

    def recursion_config(self) -> RecursionConfig:
        return RecursionConfig(
            iterations=self.iterations, gates_enabled=self.gates_enabled,
            train_recursive=self.train_recursive,
            no_autoencoder=self.no_autoencoder,
            fully_no_autoencoder=self.fully_no_autoencoder,
            no_seg_aware=self.no_seg_aware, stop_seg_grad=self.stop_seg_grad)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            img_w=self.img_w, img_h=self.img_h, num_classes=self.num_classes,
            min_instances=self.min_instances, max_instances=self.max_instances,
            min_visible_frac=self.min_visible_frac, color_jitter=self.color_jitter,
            noise_sigma=self.noise_sigma, center_jitter=self.center_jitter,
            scale_jitter=self.scale_jitter,
            jitters_per_instance=self.jitters_per_instance,
            random_proposals=self.random_proposals, seed=self.seed)


_HINTS = typing.get_type_hints(RunConfig)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, text: str):
    hint = _HINTS.get(key)
    if hint is None:
        raise ValueError(f"unknown config key: {key}")
    text = text.strip()
    if hint is bool:
        if text not in ("true", "false"):
            raise ValueError(f"{key}: expected true/false, got {text!r}")
        return text == "true"
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is tuple:
        return tuple(int(v) for v in text.split(",") if v.strip())
    raise ValueError(f"{key}: unsupported config field type {hint}")


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        setattr(cfg, key, _parse_value(key, value))
    cfg.__post_init__()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply "key=value" strings in place (CLI --set)."""
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        setattr(cfg, key.strip(), _parse_value(key.strip(), value))
    cfg.__post_init__()
    return cfg

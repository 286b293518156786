"""Seeded synthetic multi-instance shapes benchmark.

Scenes contain 1..4 disks, triangles and rectangles drawn back-to-front with
occlusion; each instance keeps a full-image visibility-resolved binary mask
and a tight box.  A proposal sampler jitters the ground-truth boxes (plus a
handful of uniform random boxes) to stand in for an external proposal method.

On-disk layout: images as binary PPM (P6), masks as binary PGM (P5, 0/255)
and a tab-separated UTF-8 manifest ``index.txt`` with one record per line:
image path, then per instance ``class:box(cx,cy,w,h):maskpath``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, clip_box

CLASS_NAMES = {1: "disk", 2: "triangle", 3: "rectangle"}

_CLASS_COLORS = {
    1: (0.85, 0.25, 0.25),
    2: (0.25, 0.80, 0.30),
    3: (0.25, 0.35, 0.85),
}


@dataclass
class SceneConfig:
    img_w: int = 64
    img_h: int = 64
    num_classes: int = 3
    min_instances: int = 1
    max_instances: int = 4
    min_visible_frac: float = 0.25
    color_jitter: float = 0.12
    noise_sigma: float = 0.02
    center_jitter: float = 0.3
    scale_jitter: float = 0.4
    jitters_per_instance: int = 12
    random_proposals: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.img_w < 16 or self.img_h < 16:
            raise ValueError("image sides must be at least 16 pixels")
        if not (1 <= self.min_instances <= self.max_instances):
            raise ValueError("instance count range is degenerate")
        if not (0.0 < self.min_visible_frac <= 1.0):
            raise ValueError("min_visible_frac must be in (0, 1]")


@dataclass
class InstanceGT:
    id: int
    cls: int
    mask: np.ndarray  # bool [H, W], occlusion-resolved
    box: Box          # tight around the visible mask

    def __eq__(self, other):
        return (self.id == other.id and self.cls == other.cls
                and self.box == other.box and np.array_equal(self.mask, other.mask))


@dataclass
class Scene:
    image: np.ndarray  # uint8 [H, W, 3]
    gts: list[InstanceGT] = field(default_factory=list)

    def __eq__(self, other):
        return np.array_equal(self.image, other.image) and self.gts == other.gts


def _rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, domain, index])


def _raster_shape(cls: int, cx: float, cy: float, half_w: float, half_h: float,
                  img_w: int, img_h: int) -> np.ndarray:
    px = np.arange(img_w) + 0.5
    py = np.arange(img_h) + 0.5
    xx, yy = np.meshgrid(px, py)
    if cls == 1:
        r = min(half_w, half_h)
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if cls == 2:
        # isoceles triangle, apex up: width grows linearly from apex to base
        rel = (yy - (cy - half_h)) / (2.0 * half_h)
        inside_y = (rel >= 0.0) & (rel <= 1.0)
        return inside_y & (np.abs(xx - cx) <= half_w * rel)
    if cls == 3:
        return (np.abs(xx - cx) <= half_w) & (np.abs(yy - cy) <= half_h)
    raise ValueError(f"unknown shape class {cls}")


def _tight_box(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    return Box.from_corners(float(xs.min()), float(ys.min()),
                            float(xs.max() + 1), float(ys.max() + 1))


def generate_scene(config: SceneConfig, index: int) -> Scene:
    """Deterministic scene for (config.seed, index)."""
    rng = _rng(config.seed, 0, index)
    h, w = config.img_h, config.img_w
    n_target = int(rng.integers(config.min_instances, config.max_instances + 1))

    full_masks: list[np.ndarray] = []
    classes: list[int] = []
    canvas = np.full((h, w), -1, dtype=np.int64)

    for i in range(n_target):
        placed = False
        for _ in range(40):
            cls = int(rng.integers(1, config.num_classes + 1))
            half = rng.uniform(5.0, min(w, h) * 0.2, size=2)
            cx = rng.uniform(half[0] + 1, w - half[0] - 1)
            cy = rng.uniform(half[1] + 1, h - half[1] - 1)
            mask = _raster_shape(cls, cx, cy, half[0], half[1], w, h)
            if not mask.any():
                continue
            trial = canvas.copy()
            trial[mask] = i
            ok = True
            for j, fm in enumerate(full_masks + [mask]):
                visible = np.count_nonzero(trial == j)
                if visible < config.min_visible_frac * np.count_nonzero(fm):
                    ok = False
                    break
            if ok:
                canvas = trial
                full_masks.append(mask)
                classes.append(cls)
                placed = True
                break
        if not placed:
            break  # bounded rejection: emit fewer instances

    gts = []
    for i, cls in enumerate(classes):
        visible = canvas == i
        gts.append(InstanceGT(id=i, cls=cls, mask=visible, box=_tight_box(visible)))

    img = np.empty((h, w, 3))
    img[...] = rng.uniform(0.05, 0.35, size=3)
    for gt in gts:
        base = np.array(_CLASS_COLORS[gt.cls])
        color = base + rng.uniform(-config.color_jitter, config.color_jitter, size=3)
        img[gt.mask] = color
    img += rng.normal(0.0, config.noise_sigma, size=img.shape)
    image = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return Scene(image=image, gts=gts)


def generate_proposals(gts, config: SceneConfig, index: int) -> list[Box]:
    """Jittered copies of every ground-truth box plus uniform random boxes,
    all clipped to the image; deterministic for (config.seed, index)."""
    rng = _rng(config.seed, 1, index)
    w, h = config.img_w, config.img_h
    proposals: list[Box] = []
    for gt in gts:
        for _ in range(config.jitters_per_instance):
            dx, dy = rng.uniform(-config.center_jitter, config.center_jitter, size=2)
            sw, sh = rng.uniform(-config.scale_jitter, config.scale_jitter, size=2)
            b = Box(gt.box.cx + dx * gt.box.w, gt.box.cy + dy * gt.box.h,
                    gt.box.w * math.exp(sw), gt.box.h * math.exp(sh))
            proposals.append(clip_box(b, w, h))
    for _ in range(config.random_proposals):
        bw = rng.uniform(6.0, 0.6 * w)
        bh = rng.uniform(6.0, 0.6 * h)
        cx = rng.uniform(0.0, w)
        cy = rng.uniform(0.0, h)
        proposals.append(clip_box(Box(cx, cy, bw, bh), w, h))
    return proposals


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("write_ppm expects a uint8 [H, W, 3] array")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(image.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    data = np.where(mask, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise OSError(f"{path}: cannot read image file: {exc}") from exc
    if not blob.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} image")
    # header: magic, width, height, maxval as whitespace-separated tokens
    tokens, pos = [], len(magic)
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    n = w * h * channels
    raster = blob[pos:pos + n]
    if len(raster) != n:
        raise ValueError(f"{path}: raster truncated ({len(raster)} of {n} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((h, w, 3)) if channels == 3 else arr.reshape((h, w))


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def format_box(b: Box) -> str:
    return f"box({b.cx!r},{b.cy!r},{b.w!r},{b.h!r})"


def parse_box(text: str) -> Box:
    if not (text.startswith("box(") and text.endswith(")")):
        raise ValueError(f"malformed box field: {text!r}")
    cx, cy, w, h = (float(t) for t in text[4:-1].split(","))
    return Box(cx, cy, w, h)


def write_dataset(root, scenes: list[Scene]) -> str:
    """Write scenes under ``root``; returns the manifest path."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    lines = []
    for i, scene in enumerate(scenes):
        img_rel = f"images/img_{i:05d}.ppm"
        write_ppm(os.path.join(root, img_rel), scene.image)
        fields = [img_rel]
        for gt in scene.gts:
            mask_rel = f"masks/img_{i:05d}_inst{gt.id}.pgm"
            write_pgm(os.path.join(root, mask_rel), gt.mask)
            fields.append(f"{gt.cls}:{format_box(gt.box)}:{mask_rel}")
        lines.append("\t".join(fields))
    manifest = os.path.join(root, "index.txt")
    with open(manifest, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    return manifest


def read_dataset(root) -> list[Scene]:
    manifest = os.path.join(root, "index.txt")
    try:
        with open(manifest, encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    except OSError as exc:
        raise OSError(f"{manifest}: cannot read manifest: {exc}") from exc
    scenes = []
    for line in lines:
        fields = line.split("\t")
        image = read_ppm(os.path.join(root, fields[0]))
        gts = []
        for inst_id, field_ in enumerate(fields[1:]):
            try:
                cls_s, box_s, mask_rel = field_.split(":")
            except ValueError as exc:
                raise ValueError(f"{manifest}: malformed record {field_!r}") from exc
            mask = read_pgm(os.path.join(root, mask_rel)) >= 128
            gts.append(InstanceGT(id=inst_id, cls=int(cls_s),
                                  mask=mask, box=parse_box(box_s)))
        scenes.append(Scene(image=image, gts=gts))
    return scenes

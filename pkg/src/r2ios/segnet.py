"""Segmentation sub-network: shared backbone, per-proposal ROI pooling to an
M x M grid, 1x1 convolutions producing 2-channel confidence maps, and the
instance-aware denoising autoencoder that reconstructs the dominant
foreground mask.

Because ROI max pooling emits verbatim rows of the per-image window-max
stack (see diffcore.ops), the 1x1 convolutions are applied once per image to
the stack rows and gathered per proposal afterwards; this is exactly equal to
convolving each pooled map and is what makes desk-scale training cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    ParamStore,
    StackRows,
    Tape,
    Tensor,
    conv2d,
    linear,
    max_pool2d,
    permute,
    relu,
    reshape,
    roi_row_indices,
    select_rows,
    softmax,
    stack_sizes_for,
    window_max_stack,
)
from .geometry import Box


@dataclass
class ModelConfig:
    num_classes: int = 3            # K foreground classes
    mask_size: int = 40             # M, side of the confidence maps
    roi_size: int = 7               # R, side of the refinement ROI
    feat_stride: int = 4
    backbone_channels: tuple = (16, 32, 64)
    seg_hidden: int = 16            # width of the intermediate 1x1 convolution
    ae_hidden: int = 512
    fc_width: int = 256             # refinement fully-connected width

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.ae_hidden >= 2 * self.mask_size ** 2:
            raise ValueError("autoencoder hidden width must be < 2*M^2")
        n_pools = round(math.log2(self.feat_stride))
        if 2 ** n_pools != self.feat_stride:
            raise ValueError("feat_stride must be a power of two")
        if n_pools > len(self.backbone_channels):
            raise ValueError("not enough backbone blocks for feat_stride")

    @property
    def mask_len(self) -> int:
        return 2 * self.mask_size ** 2

    @property
    def n_pools(self) -> int:
        return round(math.log2(self.feat_stride))


@dataclass
class ConfidenceMaps:
    """Foreground/background logits per pixel of the pooled grid."""

    C: Tensor  # [2, M, M]


@dataclass
class DominantMask:
    """Autoencoder reconstruction of the dominant-instance mask."""

    v: Tensor             # [2, M, M], same layout as the confidence maps
    fg_prob: np.ndarray   # [M, M], per-pixel 2-way softmax foreground channel


def init_segnet_params(store: ParamStore, cfg: ModelConfig,
                       rng: np.random.Generator,
                       fully_no_autoencoder: bool = False,
                       no_autoencoder: bool = False) -> None:
    """Backbone, segmentation head and autoencoder parameters.

    Hidden layers use variance-preserving Gaussians (the network trains from
    scratch); the confidence-map output layer uses std 0.01 and all biases
    start at zero.
    """
    cin = 3
    for i, cout in enumerate(cfg.backbone_channels, 1):
        store.create(f"backbone.conv{i}.w", (cout, cin, 3, 3),
                     math.sqrt(2.0 / (cin * 9)), rng)
        store.create(f"backbone.conv{i}.b", (cout,), 0.0, rng)
        cin = cout
    cf = cfg.backbone_channels[-1]
    store.create("seg.conv1.w", (cfg.seg_hidden, cf), math.sqrt(2.0 / cf), rng)
    store.create("seg.conv1.b", (cfg.seg_hidden,), 0.0, rng)
    # O(1) confidence maps at init keep the autoencoder's gradients alive
    store.create("seg.conv2.w", (2, cfg.seg_hidden),
                 math.sqrt(1.0 / cfg.seg_hidden), rng)
    store.create("seg.conv2.b", (2,), 0.0, rng)
    d = cfg.mask_len
    if fully_no_autoencoder:
        store.create("ae.fc1.w", (d, d), math.sqrt(2.0 / d), rng)
        store.create("ae.fc1.b", (d,), 0.0, rng)
        store.create("ae.fc2.w", (d, d), math.sqrt(1.0 / d), rng)
        store.create("ae.fc2.b", (d,), 0.0, rng)
    elif no_autoencoder:
        pass  # identity bypass uses no autoencoder parameters
    else:
        store.create("ae.enc.w", (cfg.ae_hidden, d), math.sqrt(2.0 / d), rng)
        store.create("ae.enc.b", (cfg.ae_hidden,), 0.0, rng)
        store.create("ae.dec.w", (d, cfg.ae_hidden),
                     math.sqrt(1.0 / cfg.ae_hidden), rng)
        store.create("ae.dec.b", (d,), 0.0, rng)


def backbone_forward(image: Tensor, params: ParamStore, cfg: ModelConfig,
                     tape: Tape | None = None) -> Tensor:
    """conv3x3/relu blocks with a 2x2 max pool after the first n_pools
    blocks; output spatial size is input / feat_stride."""
    _, _, h, w = image.data.shape
    if h % cfg.feat_stride or w % cfg.feat_stride:
        raise ValueError(f"image sides {h}x{w} not divisible by stride {cfg.feat_stride}")
    x = image
    for i in range(1, len(cfg.backbone_channels) + 1):
        x = conv2d(x, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"],
                   stride=1, pad=1, tape=tape)
        x = relu(x, tape)
        if i <= cfg.n_pools:
            x = max_pool2d(x, 2, 2, tape)
    return x


@dataclass
class FeatureCache:
    """Per-image state shared by every proposal and refinement iteration."""

    feat: Tensor
    stack: StackRows
    seg_rows: Tensor  # 1x1-conv chain applied to the stack rows, [rows, 2]


def _seg_conv_rows(stack: StackRows, params: ParamStore,
                   tape: Tape | None) -> Tensor:
    h1 = relu(linear(stack.rows, params["seg.conv1.w"], params["seg.conv1.b"], tape), tape)
    return linear(h1, params["seg.conv2.w"], params["seg.conv2.b"], tape)


def build_feature_cache(image: Tensor, params: ParamStore, cfg: ModelConfig,
                        tape: Tape | None = None) -> FeatureCache:
    feat = backbone_forward(image, params, cfg, tape)
    hf, wf = feat.data.shape[2], feat.data.shape[3]
    smax_y, smax_x = stack_sizes_for(hf, wf, (cfg.mask_size, cfg.roi_size))
    stack = window_max_stack(feat, smax_y, smax_x, tape)
    return FeatureCache(feat=feat, stack=stack,
                        seg_rows=_seg_conv_rows(stack, params, tape))


@dataclass
class SegBatch:
    """Batched segmentation outputs for one iteration over B proposals."""

    cvec: Tensor            # [B, 2*M*M], vectorised confidence maps
    vvec: Tensor            # [B, 2*M*M], vectorised dominant-mask logits
    hidden: Tensor | None   # [B, ae_hidden] (None under the identity bypass)
    fg_prob: np.ndarray     # [B, M, M]
    n_empty_bins: int


def seg_forward_batch(cache: FeatureCache, boxes: list[Box], params: ParamStore,
                      cfg: ModelConfig, tape: Tape | None = None,
                      no_autoencoder: bool = False,
                      fully_no_autoencoder: bool = False) -> SegBatch:
    b = len(boxes)
    m = cfg.mask_size
    idx, n_empty = roi_row_indices(boxes, cache.stack, cfg.feat_stride, m, m)
    crows = select_rows(cache.seg_rows, idx, tape)               # [B*M*M, 2]
    cvec = reshape(permute(reshape(crows, (b, m * m, 2), tape), (0, 2, 1), tape),
                   (b, cfg.mask_len), tape)
    hidden = None
    if fully_no_autoencoder:
        hidden = relu(linear(cvec, params["ae.fc1.w"], params["ae.fc1.b"], tape), tape)
        vvec = linear(hidden, params["ae.fc2.w"], params["ae.fc2.b"], tape)
    elif no_autoencoder:
        vvec = cvec  # identity bypass, shapes unchanged
    else:
        hidden = relu(linear(cvec, params["ae.enc.w"], params["ae.enc.b"], tape), tape)
        vvec = linear(hidden, params["ae.dec.w"], params["ae.dec.b"], tape)
    probs = softmax(vvec.data.reshape(b, 2, m * m), axis=1)
    return SegBatch(cvec=cvec, vvec=vvec, hidden=hidden,
                    fg_prob=probs[:, 1, :].reshape(b, m, m), n_empty_bins=n_empty)


def seg_forward(featmap: Tensor, box: Box, params: ParamStore, cfg: ModelConfig,
                tape: Tape | None = None, no_autoencoder: bool = False,
                fully_no_autoencoder: bool = False
                ) -> tuple[ConfidenceMaps, DominantMask, Tensor | None]:
    """Single-proposal contract surface over the batched implementation."""
    hf, wf = featmap.data.shape[2], featmap.data.shape[3]
    smax_y, smax_x = stack_sizes_for(hf, wf, (cfg.mask_size, cfg.roi_size))
    stack = window_max_stack(featmap, smax_y, smax_x, tape)
    cache = FeatureCache(feat=featmap, stack=stack,
                         seg_rows=_seg_conv_rows(stack, params, tape))
    out = seg_forward_batch(cache, [box], params, cfg, tape,
                            no_autoencoder, fully_no_autoencoder)
    m = cfg.mask_size
    c_maps = ConfidenceMaps(C=reshape(out.cvec, (2, m, m), tape))
    v = DominantMask(v=reshape(out.vvec, (2, m, m), tape), fg_prob=out.fg_prob[0])
    hidden = None if out.hidden is None else reshape(out.hidden, (-1,), tape)
    return c_maps, v, hidden


def seg_target(gt_mask: np.ndarray, box: Box, m: int) -> np.ndarray:
    """Ground-truth mask restricted to the box, resampled to M x M by
    nearest neighbour over bin centers."""
    h, w = gt_mask.shape
    x0, y0, x1, y1 = box.corners()
    us = x0 + (np.arange(m) + 0.5) * (x1 - x0) / m
    vs = y0 + (np.arange(m) + 0.5) * (y1 - y0) / m
    cols = np.clip(np.floor(us).astype(np.intp), 0, w - 1)
    rows = np.clip(np.floor(vs).astype(np.intp), 0, h - 1)
    return gt_mask[np.ix_(rows, cols)].astype(np.float64)

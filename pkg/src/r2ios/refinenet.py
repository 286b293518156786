"""Proposal refinement sub-network: ROI pooling to R x R, two fully-connected
layers, concatenation of the flattened dominant-mask logits (the
segmentation-aware features) and the two output heads: K+1 classification
and per-class box regression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    ParamStore,
    Tape,
    Tensor,
    concat,
    detach,
    linear,
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
from .segnet import FeatureCache, ModelConfig, _seg_conv_rows


@dataclass
class ClassScores:
    """Softmax probabilities over K+1 categories; index 0 is background."""

    p: np.ndarray


@dataclass
class OffsetTable:
    """Per-foreground-class regression offsets, one row per class."""

    O: np.ndarray  # [K, 4]


def init_refine_params(store: ParamStore, cfg: ModelConfig,
                       rng: np.random.Generator) -> None:
    """Hidden layers variance-preserving; output heads zero-mean Gaussian
    with std 0.01 (classifier) and 0.001 (regressor), zero biases."""
    cf = cfg.backbone_channels[-1]
    d_in = cf * cfg.roi_size ** 2
    store.create("ref.fc1.w", (cfg.fc_width, d_in), math.sqrt(2.0 / d_in), rng)
    store.create("ref.fc1.b", (cfg.fc_width,), 0.0, rng)
    store.create("ref.fc2.w", (cfg.fc_width, cfg.fc_width),
                 math.sqrt(2.0 / cfg.fc_width), rng)
    store.create("ref.fc2.b", (cfg.fc_width,), 0.0, rng)
    d_feat = cfg.fc_width + cfg.mask_len
    k = cfg.num_classes
    store.create("ref.cls.w", (k + 1, d_feat), 0.01, rng)
    store.create("ref.cls.b", (k + 1,), 0.0, rng)
    store.create("ref.box.w", (4 * k, d_feat), 0.001, rng)
    store.create("ref.box.b", (4 * k,), 0.0, rng)


@dataclass
class RefineBatch:
    cls_logits: Tensor  # [B, K+1]
    box_pred: Tensor    # [B, 4K]
    n_empty_bins: int


def refine_forward_batch(cache: FeatureCache, boxes: list[Box],
                         vvec: Tensor | None, params: ParamStore,
                         cfg: ModelConfig, tape: Tape | None = None,
                         no_seg_aware: bool = False,
                         stop_seg_grad: bool = False) -> RefineBatch:
    b = len(boxes)
    r = cfg.roi_size
    cf = cache.stack.channels
    idx, n_empty = roi_row_indices(boxes, cache.stack, cfg.feat_stride, r, r)
    rows = select_rows(cache.stack.rows, idx, tape)                # [B*R*R, Cf]
    flat = reshape(permute(reshape(rows, (b, r * r, cf), tape), (0, 2, 1), tape),
                   (b, cf * r * r), tape)
    f1 = relu(linear(flat, params["ref.fc1.w"], params["ref.fc1.b"], tape), tape)
    f2 = relu(linear(f1, params["ref.fc2.w"], params["ref.fc2.b"], tape), tape)
    if no_seg_aware or vvec is None:
        seg_feat = Tensor(np.zeros((b, cfg.mask_len)))
    elif stop_seg_grad:
        seg_feat = detach(vvec)
    else:
        seg_feat = vvec
    feat = concat([f2, seg_feat], axis=1, tape=tape)
    cls_logits = linear(feat, params["ref.cls.w"], params["ref.cls.b"], tape)
    box_pred = linear(feat, params["ref.box.w"], params["ref.box.b"], tape)
    return RefineBatch(cls_logits=cls_logits, box_pred=box_pred, n_empty_bins=n_empty)


def refine_forward(featmap: Tensor, box: Box, v: Tensor | None,
                   params: ParamStore, cfg: ModelConfig,
                   tape: Tape | None = None, no_seg_aware: bool = False,
                   stop_seg_grad: bool = False) -> tuple[ClassScores, OffsetTable]:
    """Single-proposal contract surface; ``v`` is the [2, M, M] dominant-mask
    logits produced by the segmentation sub-network for the same box."""
    hf, wf = featmap.data.shape[2], featmap.data.shape[3]
    smax_y, smax_x = stack_sizes_for(hf, wf, (cfg.mask_size, cfg.roi_size))
    stack = window_max_stack(featmap, smax_y, smax_x, tape)
    cache = FeatureCache(feat=featmap, stack=stack,
                         seg_rows=_seg_conv_rows(stack, params, tape))
    vvec = None if v is None else reshape(v, (1, cfg.mask_len), tape)
    out = refine_forward_batch(cache, [box], vvec, params, cfg, tape,
                               no_seg_aware, stop_seg_grad)
    p = softmax(out.cls_logits.data[0])
    table = out.box_pred.data[0].reshape(cfg.num_classes, 4).copy()
    return ClassScores(p=p), OffsetTable(O=table)


def predict_class(scores: ClassScores) -> int:
    """Argmax over all K+1 entries, background included; ties break to the
    lowest index."""
    return int(np.argmax(scores.p))

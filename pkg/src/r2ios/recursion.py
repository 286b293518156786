"""Unrolled T-iteration refinement with shared parameters, reversible-gate
selection of the best iteration, multi-loss assembly with loss masking
(iterations past the selected one contribute zero gradient), and the
test-time reversal that emits each proposal's outputs at its gate iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    ParamStore,
    Tape,
    Tensor,
    add_n,
    pixel_ce_rows,
    reshape,
    select_class_rows,
    smooth_l1_rows,
    softmax,
    softmax_nll_rows,
)
from .geometry import Box, LabeledProposal, Offsets, clip_box, decode_offsets, encode_offsets, nms
from .refinenet import ClassScores, OffsetTable, RefineBatch, init_refine_params, refine_forward_batch
from .segnet import (
    DominantMask,
    FeatureCache,
    ModelConfig,
    SegBatch,
    build_feature_cache,
    init_segnet_params,
    seg_forward_batch,
    seg_target,
)

# predicted offsets beyond this are pathological and would overflow exp()
OFFSET_CLAMP = 5.0


@dataclass
class RecursionConfig:
    iterations: int = 4          # T
    gates_enabled: bool = True
    train_recursive: bool = True  # False = refinement recursion only at test time
    no_autoencoder: bool = False
    fully_no_autoencoder: bool = False
    no_seg_aware: bool = False
    stop_seg_grad: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class GateState:
    """Per-proposal reversible gates: all inactive at creation, exactly one
    activated once the optimal iteration is selected."""

    r: list[bool]
    t_prime: int | None = None


@dataclass
class IterationRecord:
    """Outputs of one refinement iteration for a single proposal."""

    t: int
    p: ClassScores
    O: OffsetTable
    v: DominantMask
    l: Box                      # post-refinement box l_t
    g_hat: int
    J: Tensor | None = None     # multi-loss (train mode)
    cls_logits: Tensor | None = None
    box_pred: Tensor | None = None
    vvec: Tensor | None = None


def init_model_params(mcfg: ModelConfig, rcfg: RecursionConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng([seed, 2])
    store = ParamStore()
    init_segnet_params(store, mcfg, rng, rcfg.fully_no_autoencoder,
                       rcfg.no_autoencoder)
    init_refine_params(store, mcfg, rng)
    return store


def image_to_tensor(image: np.ndarray) -> Tensor:
    """uint8 [H, W, 3] image to a [1, 3, H, W] float tensor in [0, 1]."""
    return Tensor(image.astype(np.float64).transpose(2, 0, 1)[None] / 255.0)


def _clamped_offsets(row: np.ndarray) -> Offsets:
    if not np.isfinite(row).all():
        raise RuntimeError("non-finite predicted offsets; optimisation diverged")
    ox, oy, ow, oh = np.clip(row, -OFFSET_CLAMP, OFFSET_CLAMP)
    return Offsets(float(ox), float(oy), float(ow), float(oh))


@dataclass
class BatchIteration:
    """One refinement iteration over a whole proposal batch."""

    t: int
    seg: SegBatch
    ref: RefineBatch
    probs: np.ndarray               # [B, K+1]
    g_hat: np.ndarray               # [B]
    boxes_in: list[Box]
    boxes_out: list[Box]
    off_targets: np.ndarray | None = None   # [B, 4] (train)
    mask_targets: np.ndarray | None = None  # [B, M*M] (train)


def run_recursion_batch(cache: FeatureCache, boxes: list[Box], params: ParamStore,
                        mcfg: ModelConfig, rcfg: RecursionConfig, mode: str,
                        img_w: int, img_h: int, tape: Tape | None = None,
                        labels: np.ndarray | None = None,
                        gt_boxes: list[Box | None] | None = None,
                        gt_masks: list[np.ndarray | None] | None = None
                        ) -> list[BatchIteration]:
    """Unroll the two sub-networks over a proposal batch.

    In train mode boxes follow the labelled class g and per-iteration targets
    are recomputed against the current box; in test mode boxes follow the
    predicted class and background predictions freeze the box.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    if train and labels is None:
        raise ValueError("train mode requires proposal labels")
    n_iter = rcfg.iterations if (not train or rcfg.train_recursive) else 1
    b = len(boxes)
    m = mcfg.mask_size
    iters: list[BatchIteration] = []
    for t in range(1, n_iter + 1):
        seg = seg_forward_batch(cache, boxes, params, mcfg, tape,
                                rcfg.no_autoencoder, rcfg.fully_no_autoencoder)
        ref = refine_forward_batch(cache, boxes, seg.vvec, params, mcfg, tape,
                                   rcfg.no_seg_aware, rcfg.stop_seg_grad)
        probs = softmax(ref.cls_logits.data, axis=1)
        g_hat = probs.argmax(axis=1)

        off_targets = mask_targets = None
        if train:
            off_targets = np.zeros((b, 4))
            mask_targets = np.zeros((b, m * m))
            for i in range(b):
                if labels[i] >= 1:
                    if gt_boxes is None or gt_boxes[i] is None or \
                       gt_masks is None or gt_masks[i] is None:
                        raise RuntimeError(
                            f"foreground proposal {i} lacks ground-truth targets")
                    off_targets[i] = encode_offsets(boxes[i], gt_boxes[i]).as_tuple()
                    mask_targets[i] = seg_target(gt_masks[i], boxes[i], m).ravel()

        boxes_out: list[Box] = []
        for i in range(b):
            cls_u = int(labels[i]) if train else int(g_hat[i])
            if cls_u >= 1:
                o = _clamped_offsets(ref.box_pred.data[i, 4 * (cls_u - 1):4 * cls_u])
                boxes_out.append(clip_box(decode_offsets(boxes[i], o), img_w, img_h))
            else:
                boxes_out.append(boxes[i])

        iters.append(BatchIteration(t=t, seg=seg, ref=ref, probs=probs,
                                    g_hat=g_hat, boxes_in=boxes,
                                    boxes_out=boxes_out,
                                    off_targets=off_targets,
                                    mask_targets=mask_targets))
        boxes = boxes_out
    return iters


def select_gate_batch(iters: list[BatchIteration]) -> np.ndarray:
    """1-based optimal iteration per proposal: the first iteration with the
    highest predicted-class confidence."""
    conf = np.stack([it.probs[np.arange(len(it.g_hat)), it.g_hat] for it in iters])
    return conf.argmax(axis=0) + 1


def batch_loss(iters: list[BatchIteration], labels: np.ndarray,
               t_prime: np.ndarray, mcfg: ModelConfig,
               tape: Tape | None = None) -> Tensor:
    """Mean over the batch of the per-proposal global loss sum_{t<=t'} J_t.

    Implemented with per-row weights so iterations past a proposal's gate
    contribute exactly zero gradient.
    """
    b = len(labels)
    m = mcfg.mask_size
    fg = labels >= 1
    terms = []
    for it in iters:
        active = (it.t <= t_prime).astype(np.float64)
        w_cls = active / b
        w_fg = active * fg / b
        terms.append(softmax_nll_rows(it.ref.cls_logits, labels, w_cls, tape))
        sel = select_class_rows(it.ref.box_pred, np.maximum(labels, 1) - 1, 4, tape)
        terms.append(smooth_l1_rows(sel, it.off_targets, w_fg, tape))
        v3 = reshape(it.seg.vvec, (b, 2, m * m), tape)
        terms.append(pixel_ce_rows(v3, it.mask_targets, w_fg, tape))
    return add_n(terms, tape)


# ---------------------------------------------------------------------------
# single-proposal contract surface
# ---------------------------------------------------------------------------


def _records_from_batch(iters: list[BatchIteration], mcfg: ModelConfig,
                        tape: Tape | None) -> list[IterationRecord]:
    m = mcfg.mask_size
    k = mcfg.num_classes
    records = []
    for it in iters:
        v = reshape(it.seg.vvec, (2, m, m), tape)
        records.append(IterationRecord(
            t=it.t,
            p=ClassScores(p=it.probs[0]),
            O=OffsetTable(O=it.ref.box_pred.data[0].reshape(k, 4).copy()),
            v=DominantMask(v=v, fg_prob=it.seg.fg_prob[0]),
            l=it.boxes_out[0],
            g_hat=int(it.g_hat[0]),
            cls_logits=it.ref.cls_logits,
            box_pred=it.ref.box_pred,
            vvec=it.seg.vvec,
        ))
    return records


def run_recursion(image: np.ndarray, proposal, params: ParamStore,
                  mcfg: ModelConfig, rcfg: RecursionConfig, mode: str,
                  gts=None, tape: Tape | None = None) -> list[IterationRecord]:
    """Full unroll for one proposal of one image.

    The backbone feature map is computed once and shared by all iterations.
    In train mode ``proposal`` must be a LabeledProposal and ``gts`` must
    contain its dominant instance; J_t is then populated on every record.
    """
    img_h, img_w = image.shape[:2]
    cache = build_feature_cache(image_to_tensor(image), params, mcfg, tape)
    if isinstance(proposal, LabeledProposal):
        box, g = proposal.box, proposal.g
    else:
        box, g = proposal, 0
    gt_box = gt_mask = None
    if mode == "train" and g >= 1:
        matches = [gt for gt in gts or [] if gt.id == proposal.dominant_instance]
        if not matches:
            raise RuntimeError("foreground proposal lacks its dominant instance")
        gt_box, gt_mask = matches[0].box, matches[0].mask
    iters = run_recursion_batch(
        cache, [box], params, mcfg, rcfg, mode, img_w, img_h, tape,
        labels=np.array([g]), gt_boxes=[gt_box], gt_masks=[gt_mask])
    records = _records_from_batch(iters, mcfg, tape)
    if mode == "train":
        for it, rec in zip(iters, records):
            off = Offsets(*it.off_targets[0]) if g >= 1 else None
            tgt = it.mask_targets[0].reshape(mcfg.mask_size, -1) if g >= 1 else None
            rec.J = compute_Jt(rec, g, off, tgt, tape)
    return records


def compute_Jt(record: IterationRecord, g: int, off_target: Offsets | None,
               mask_target: np.ndarray | None, tape: Tape | None = None) -> Tensor:
    """Multi-loss of one iteration: classification log loss, plus smooth-L1
    box loss and pixel-wise cross entropy for foreground proposals only."""
    terms = [softmax_nll_rows(record.cls_logits, [g], [1.0], tape)]
    if g >= 1:
        if off_target is None or mask_target is None:
            raise RuntimeError("foreground proposal lacks loss targets")
        sel = select_class_rows(record.box_pred, [g - 1], 4, tape)
        terms.append(smooth_l1_rows(sel, np.asarray(off_target.as_tuple())[None],
                                    [1.0], tape))
        m2 = mask_target.size
        v3 = reshape(record.vvec, (1, 2, m2), tape)
        terms.append(pixel_ce_rows(v3, mask_target.reshape(1, -1), [1.0], tape))
    return add_n(terms, tape)


def select_gate(records: list[IterationRecord]) -> GateState:
    """Activate the gate of the first iteration with the highest
    predicted-class confidence."""
    conf = [rec.p.p[rec.g_hat] for rec in records]
    t_prime = int(np.argmax(conf)) + 1
    r = [False] * len(records)
    r[t_prime - 1] = True
    return GateState(r=r, t_prime=t_prime)


def assemble_loss(records: list[IterationRecord], gate: GateState | None,
                  tape: Tape | None = None) -> Tensor:
    """Global loss J = sum of J_t over the first t' iterations (all of them
    when the gates are disabled)."""
    t_prime = gate.t_prime if gate is not None else len(records)
    picked = records[:t_prime]
    if any(rec.J is None for rec in picked):
        raise RuntimeError("assemble_loss requires train-mode records with J_t")
    return add_n([rec.J for rec in picked], tape)


# ---------------------------------------------------------------------------
# testing: reversal and output combination
# ---------------------------------------------------------------------------


@dataclass
class InstancePrediction:
    cls: int
    confidence: float
    box: Box
    fg_prob: np.ndarray           # [M, M]
    mask: np.ndarray | None = None  # full-image bool mask after pasting


def paste_mask(fg_prob: np.ndarray, box: Box, img_w: int, img_h: int) -> np.ndarray:
    """Resize a soft mask to the box by bilinear sampling over pixel centers
    and threshold at 0.5."""
    m = fg_prob.shape[0]
    x0, y0, x1, y1 = box.corners()
    px0 = max(0, math.ceil(x0 - 0.5))
    px1 = min(img_w, math.ceil(x1 - 0.5))
    py0 = max(0, math.ceil(y0 - 0.5))
    py1 = min(img_h, math.ceil(y1 - 0.5))
    out = np.zeros((img_h, img_w), dtype=bool)
    if px1 <= px0 or py1 <= py0:
        return out
    u = (np.arange(px0, px1) + 0.5 - x0) / (x1 - x0) * m - 0.5
    v = (np.arange(py0, py1) + 0.5 - y0) / (y1 - y0) * m - 0.5
    u = np.clip(u, 0.0, m - 1.0)
    v = np.clip(v, 0.0, m - 1.0)
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    u1 = np.minimum(u0 + 1, m - 1)
    v1 = np.minimum(v0 + 1, m - 1)
    fu = (u - u0)[None, :]
    fv = (v - v0)[:, None]
    patch = (fg_prob[np.ix_(v0, u0)] * (1 - fv) * (1 - fu)
             + fg_prob[np.ix_(v0, u1)] * (1 - fv) * fu
             + fg_prob[np.ix_(v1, u0)] * fv * (1 - fu)
             + fg_prob[np.ix_(v1, u1)] * fv * fu)
    out[py0:py1, px0:px1] = patch > 0.5
    return out


def predict_final(image: np.ndarray, proposals: list[Box], params: ParamStore,
                  mcfg: ModelConfig, rcfg: RecursionConfig,
                  nms_thresh: float = 0.3
                  ) -> tuple[list[InstancePrediction], dict]:
    """Run the recursion over all proposals of one image, reverse each to its
    gate iteration, combine with per-class NMS, and paste the surviving masks
    (painted in ascending confidence so higher confidence claims contested
    pixels)."""
    img_h, img_w = image.shape[:2]
    stats = {"gate_background_discards": 0, "proposals": len(proposals)}
    if not proposals:
        return [], stats
    cache = build_feature_cache(image_to_tensor(image), params, mcfg, None)
    iters = run_recursion_batch(cache, proposals, params, mcfg, rcfg, "test",
                                img_w, img_h, None)
    if rcfg.gates_enabled:
        t_prime = select_gate_batch(iters)
    else:
        t_prime = np.full(len(proposals), len(iters), dtype=np.intp)

    raw: list[InstancePrediction] = []
    for i in range(len(proposals)):
        it = iters[t_prime[i] - 1]
        g_hat = int(it.g_hat[i])
        if g_hat == 0:
            if any(other.g_hat[i] >= 1 for other in iters):
                stats["gate_background_discards"] += 1
            continue
        raw.append(InstancePrediction(
            cls=g_hat,
            confidence=float(it.probs[i, g_hat]),
            box=it.boxes_out[i],
            fg_prob=it.seg.fg_prob[i]))

    kept: list[InstancePrediction] = []
    for cls in range(1, mcfg.num_classes + 1):
        group = [p for p in raw if p.cls == cls]
        for j in nms([(p.box, p.confidence) for p in group], nms_thresh):
            kept.append(group[j])
    kept.sort(key=lambda p: (-p.confidence, p.cls))

    canvas = np.full((img_h, img_w), -1, dtype=np.int64)
    for idx in range(len(kept) - 1, -1, -1):  # ascending confidence
        pasted = paste_mask(kept[idx].fg_prob, kept[idx].box, img_w, img_h)
        canvas[pasted] = idx
    final = []
    for idx, pred in enumerate(kept):
        mask = canvas == idx
        if mask.any():
            pred.mask = mask
            final.append(pred)
    return final, stats

"""Box algebra: IoU, the scale-invariant/log-space offset transform and its
inverse, proposal labeling, dominant-instance assignment, clipping and NMS.

Boxes live in continuous image coordinates where pixel (row r, col c) covers
[c, c+1) x [r, r+1).  All functions here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center form (center x/y, width, height), pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @staticmethod
    def from_corners(x0: float, y0: float, x1: float, y1: float) -> "Box":
        return Box((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Offsets:
    """Dimensionless box regression offsets: translation relative to the
    proposal size plus log-space width/height ratios."""

    ox: float
    oy: float
    ow: float
    oh: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ox, self.oy, self.ow, self.oh)


@dataclass
class LabeledProposal:
    """A proposal with its class label g (0 = background) and, for
    foreground, the dominant ground-truth instance and regression targets."""

    box: Box
    g: int
    dominant_instance: int | None = None
    target_offsets: Offsets | None = None

    def __post_init__(self):
        fg = self.g >= 1
        if fg != (self.dominant_instance is not None) or \
           fg != (self.target_offsets is not None):
            raise ValueError("foreground iff dominant instance and targets present")


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner differences keep iou(a, a) == 1 exactly
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    return inter / (area_a + area_b - inter)


def encode_offsets(proposal: Box, gt: Box) -> Offsets:
    """Forward transform of a target box relative to a proposal."""
    return Offsets(
        ox=(gt.cx - proposal.cx) / proposal.w,
        oy=(gt.cy - proposal.cy) / proposal.h,
        ow=math.log(gt.w / proposal.w),
        oh=math.log(gt.h / proposal.h),
    )


def decode_offsets(proposal: Box, o: Offsets) -> Box:
    """Inverse transform: apply offsets to a proposal box."""
    return Box(
        cx=proposal.cx + o.ox * proposal.w,
        cy=proposal.cy + o.oy * proposal.h,
        w=proposal.w * math.exp(o.ow),
        h=proposal.h * math.exp(o.oh),
    )


def _clip_side(lo: float, hi: float, bound: float) -> tuple[float, float]:
    lo_c, hi_c = min(max(lo, 0.0), bound), min(max(hi, 0.0), bound)
    if hi_c - lo_c < 1.0:
        # the clamp collapsed this side: keep a 1-pixel sliver at the border
        if lo_c >= bound - 0.5:
            return bound - 1.0, bound
        if hi_c <= 0.5:
            return 0.0, 1.0
        mid = (lo_c + hi_c) / 2.0
        lo_c = min(max(mid - 0.5, 0.0), bound - 1.0)
        return lo_c, lo_c + 1.0
    return lo_c, hi_c


def clip_box(b: Box, img_w: int, img_h: int) -> Box:
    """Clamp corners to the image; a side collapsed by the clamp is floored
    at 1 pixel (at the nearest border for fully-outside boxes)."""
    x0, y0, x1, y1 = b.corners()
    if x0 >= 0 and y0 >= 0 and x1 <= img_w and y1 <= img_h:
        return b
    x0, x1 = _clip_side(x0, x1, float(img_w))
    y0, y1 = _clip_side(y0, y1, float(img_h))
    return Box.from_corners(x0, y0, x1, y1)


def best_overlap(proposal: Box, gts) -> tuple[int, float]:
    """Index and IoU of the maximally-overlapping ground truth (first on
    ties); (-1, 0.0) when gts is empty."""
    best_i, best = -1, 0.0
    for i, gt in enumerate(gts):
        v = iou(proposal, gt.box)
        if v > best:
            best_i, best = i, v
    return best_i, best


def dominant_instance(proposal: Box, gts) -> int | None:
    """Id of the instance with the largest box IoU against the proposal,
    provided the overlap is positive; ties break to the smallest id."""
    best_id, best = None, 0.0
    for gt in sorted(gts, key=lambda g: g.id):
        v = iou(proposal, gt.box)
        if v > best:
            best_id, best = gt.id, v
    return best_id


def label_proposals(proposals, gts) -> list[LabeledProposal]:
    """Foreground (g = class of the max-IoU ground truth) iff that IoU is at
    least 0.5; foreground proposals carry offset targets against the matched
    box and the dominant instance id."""
    out = []
    for p in proposals:
        i, v = best_overlap(p, gts)
        if i >= 0 and v >= 0.5:
            gt = gts[i]
            out.append(LabeledProposal(
                box=p, g=gt.cls, dominant_instance=gt.id,
                target_offsets=encode_offsets(p, gt.box)))
        else:
            out.append(LabeledProposal(box=p, g=0))
    return out


def nms(boxes: list[tuple[Box, float]], iou_thresh: float) -> list[int]:
    """Greedy descending-score suppression; returns kept indices sorted by
    descending score (ties break to the lower index)."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i][1], i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i][0], boxes[j][0]) <= iou_thresh for j in kept):
            kept.append(i)
    return kept

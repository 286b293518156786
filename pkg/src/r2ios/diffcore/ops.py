"""Differentiable primitives: convolution, pooling, ROI pooling, linear
layers, activations, the three training losses and the structural ops that
glue them together.

Every op takes an optional ``tape``; when given, a backward closure is
recorded that accumulates gradients into the operands.  All forward passes
are plain deterministic numpy on float64.

ROI pooling is implemented in two layers:

* ``window_max_stack`` precomputes, once per feature map, the per-channel
  maxima of every (wy, wx) sliding window up to a small maximal size, laid
  out as a flat row matrix with one trailing all-zero sentinel row.
* ``roi_row_indices`` maps a batch of boxes to rows of that stack (empty
  bins map to the sentinel), so pooling is an exact row gather.

Because every pooled bin is verbatim one stack row, any per-pixel 1x1
convolution applied after pooling can equivalently be applied to the stack
rows once and gathered afterwards; segnet exploits this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor

# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        def bwd():
            x.grad += out.grad.reshape(x.data.shape)
        tape.record(bwd)
    return out


def permute(x: Tensor, axes, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    if tape is not None:
        inv = np.argsort(axes)
        def bwd():
            x.grad += out.grad.transpose(inv)
        tape.record(bwd)
    return out


def concat(xs: list[Tensor], axis: int = 1, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    if tape is not None:
        splits = np.cumsum([x.data.shape[axis] for x in xs])[:-1]
        def bwd():
            for x, piece in zip(xs, np.split(out.grad, splits, axis=axis)):
                x.grad += piece
        tape.record(bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bwd():
            a.grad += out.grad
            b.grad += out.grad
        tape.record(bwd)
    return out


def add_n(xs: list[Tensor], tape: Tape | None = None) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x, tape)
    return out


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data * c)
    if tape is not None:
        def bwd():
            x.grad += out.grad * c
        tape.record(bwd)
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.sum())
    if tape is not None:
        def bwd():
            x.grad += out.grad
        tape.record(bwd)
    return out


def select_rows(src: Tensor, idx: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.intp).ravel()
    out = Tensor(src.data.take(idx, axis=0))
    if tape is not None:
        ncols = src.data.shape[1]
        nrows = src.data.shape[0]
        def bwd():
            flat = idx[:, None] * ncols + np.arange(ncols, dtype=np.intp)
            acc = np.bincount(flat.ravel(), weights=out.grad.ravel(),
                              minlength=nrows * ncols)
            src.grad += acc.reshape(nrows, ncols)
        tape.record(bwd)
    return out


def select_class_rows(x: Tensor, cls: np.ndarray, width: int,
                      tape: Tape | None = None) -> Tensor:
    """Per-row slice x[i, cls[i]*width : (cls[i]+1)*width] of a [N, K*width] tensor."""
    cls = np.asarray(cls, dtype=np.intp)
    cols = cls[:, None] * width + np.arange(width, dtype=np.intp)
    out = Tensor(np.take_along_axis(x.data, cols, axis=1))
    if tape is not None:
        rows = np.arange(x.data.shape[0], dtype=np.intp)[:, None]
        def bwd():
            np.add.at(x.grad, (rows, cols), out.grad)
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """out[n, j] = b[j] + sum_i x[n, i] * w[j, i]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ValueError(f"linear bias shape {b.shape} != ({w.data.shape[0]},)")
    out = Tensor(x.data @ w.data.T + b.data)
    if tape is not None:
        def bwd():
            g = out.grad
            x.grad += g @ w.data
            w.grad += g.T @ x.data
            b.grad += g.sum(axis=0)
        tape.record(bwd)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0.0
        def bwd():
            x.grad += out.grad * mask
        tape.record(bwd)
    return out


_COL2IM_CACHE: dict[tuple, np.ndarray] = {}


def _col2im_index(cin, kh, kw, ho, wo, hp, wp, stride) -> np.ndarray:
    """Flat padded-input index per im2col column entry (cached per shape)."""
    key = (cin, kh, kw, ho, wo, hp, wp, stride)
    idx = _COL2IM_CACHE.get(key)
    if idx is None:
        oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        cc, ky, kx = np.meshgrid(np.arange(cin), np.arange(kh),
                                 np.arange(kw), indexing="ij")
        idx = (cc.ravel()[None, :] * (hp * wp)
               + (oy.ravel()[:, None] * stride + ky.ravel()[None, :]) * wp
               + (ox.ravel()[:, None] * stride + kx.ravel()[None, :])).ravel()
        _COL2IM_CACHE[key] = idx
    return idx


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw))
    return view.reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0,
           tape: Tape | None = None) -> Tensor:
    """Cross-correlation (no kernel flip) of NCHW input with OIHW weights."""
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin} vs weight {cin_w}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError("conv2d kernel larger than padded input")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out_rows = cols @ wmat.T + b.data
    out = Tensor(np.ascontiguousarray(
        out_rows.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)))
    if tape is not None:
        hp, wp = xp.shape[2], xp.shape[3]
        def bwd():
            g_rows = out.grad.transpose(0, 2, 3, 1).reshape(-1, cout)
            b.grad += g_rows.sum(axis=0)
            w.grad += (g_rows.T @ cols).reshape(w.data.shape)
            dcols = g_rows @ wmat
            idx = _col2im_index(cin, kh, kw, ho, wo, hp, wp, stride)
            dcols = dcols.reshape(n, ho * wo, cin * kh * kw)
            for i in range(n):
                acc = np.bincount(idx, weights=dcols[i].ravel(),
                                  minlength=cin * hp * wp).reshape(cin, hp, wp)
                if pad:
                    x.grad[i] += acc[:, pad:-pad, pad:-pad]
                else:
                    x.grad[i] += acc
        tape.record(bwd)
    return out


def max_pool2d(x: Tensor, k: int, stride: int, tape: Tape | None = None) -> Tensor:
    """k x k max pooling; ties route the gradient to the first cell in
    row-major window order."""
    n, c, h, w = x.data.shape
    if k > h or k > w:
        raise ValueError(f"max_pool2d window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.data.strides
    view = np.lib.stride_tricks.as_strided(
        x.data, shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw))
    win = view.reshape(n, c, ho, wo, k * k)
    am = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, am[..., None], axis=-1)[..., 0])
    if tape is not None:
        def bwd():
            oy = np.arange(ho)[:, None] * stride
            ox = np.arange(wo)[None, :] * stride
            iy = oy[None, None] + am // k
            ix = ox[None, None] + am % k
            base = (np.arange(n)[:, None, None, None] * c
                    + np.arange(c)[None, :, None, None]) * (h * w)
            flat = base + iy * w + ix
            acc = np.bincount(flat.ravel(), weights=out.grad.ravel(),
                              minlength=n * c * h * w)
            x.grad += acc.reshape(x.data.shape)
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# ROI pooling
# ---------------------------------------------------------------------------


@dataclass
class StackRows:
    """Window-maxima of a feature map as a flat row matrix.

    Row layout: variant-major, where variant v = (wy-1)*smax_x + (wx-1) is a
    window size, then cell row-major (y*wf + x).  Row v*hf*wf + y*wf + x holds
    the per-channel max of feat[:, y:y+wy, x:x+wx].  The final row is an
    all-zero sentinel used for empty ROI bins.
    """

    rows: Tensor
    hf: int
    wf: int
    channels: int
    smax_y: int
    smax_x: int

    @property
    def sentinel(self) -> int:
        return self.smax_y * self.smax_x * self.hf * self.wf


def window_max_stack(feat: Tensor, smax_y: int, smax_x: int,
                     tape: Tape | None = None) -> StackRows:
    """Build the window-max row matrix for a [1, C, Hf, Wf] feature map."""
    if feat.data.ndim != 4 or feat.data.shape[0] != 1:
        raise ValueError(f"window_max_stack expects [1,C,H,W], got {feat.shape}")
    _, c, hf, wf = feat.data.shape
    smax_y = min(smax_y, hf)
    smax_x = min(smax_x, wf)
    base = np.ascontiguousarray(feat.data[0].transpose(1, 2, 0))  # [hf, wf, c]

    # maxima along x for window widths 1..smax_x, tracking the argmax column
    # (ties keep the leftmost column)
    mx = [base]
    ix = [np.broadcast_to(np.arange(wf)[None, :, None], base.shape)]
    for k in range(2, smax_x + 1):
        shift_col = np.minimum(np.arange(wf) + k - 1, wf - 1)
        shifted = base[:, shift_col, :]
        keep = mx[-1] >= shifted
        mx.append(np.where(keep, mx[-1], shifted))
        ix.append(np.where(keep, ix[-1],
                           np.broadcast_to(shift_col[None, :, None], base.shape)))

    # then along y on each width, tracking the flat argmax cell
    # (ties keep the smallest row, giving row-major-first overall)
    pieces = []
    argcells = []
    for wy in range(1, smax_y + 1):
        for wx in range(1, smax_x + 1):
            m = mx[wx - 1]
            cell = np.arange(hf)[:, None, None] * wf + ix[wx - 1]
            acc_m, acc_cell = m, cell
            for dy in range(1, wy):
                shift_row = np.minimum(np.arange(hf) + dy, hf - 1)
                sm = m[shift_row]
                scell = cell[shift_row]
                keep = acc_m >= sm
                acc_m = np.where(keep, acc_m, sm)
                acc_cell = np.where(keep, acc_cell, scell)
            pieces.append(acc_m.reshape(hf * wf, c))
            argcells.append(acc_cell.reshape(hf * wf, c))

    data = np.concatenate(pieces + [np.zeros((1, c))], axis=0)
    rows = Tensor(data)
    stack = StackRows(rows, hf, wf, c, smax_y, smax_x)
    if tape is not None:
        argcell = np.concatenate(argcells, axis=0)  # [V*hf*wf, c]
        def bwd():
            g = rows.grad[:-1]  # sentinel is constant, its gradient is dropped
            flat = argcell * c + np.arange(c, dtype=np.intp)[None, :]
            acc = np.bincount(flat.ravel(), weights=g.ravel(),
                              minlength=hf * wf * c)
            feat.grad[0] += acc.reshape(hf, wf, c).transpose(2, 0, 1)
        tape.record(bwd)
    return stack


def _bin_edges(c0: np.ndarray, n: np.ndarray, out: int):
    """Outward-rounded cell windows of an even real partition of n cells,
    vectorised over boxes: c0, n are [B]; returns start/width [B, out]."""
    j = np.arange(out)
    start = np.floor(c0[:, None] + j[None, :] * (n[:, None] / out)).astype(np.intp)
    end = np.ceil(c0[:, None] + (j[None, :] + 1) * (n[:, None] / out)).astype(np.intp)
    return start, end - start


def roi_row_indices(boxes, stack: StackRows, feat_stride: int,
                    out_h: int, out_w: int) -> tuple[np.ndarray, int]:
    """Map boxes to stack row indices, one row per output bin.

    Returns ([B, out_h*out_w] indices, number of empty bins).  Boxes whose
    clipped region is degenerate map every bin to the zero sentinel.
    """
    hf, wf = stack.hf, stack.wf
    b = len(boxes)
    corners = np.array([box.corners() for box in boxes]).reshape(b, 4)
    cx0 = np.clip(np.floor(corners[:, 0] / feat_stride), 0, wf).astype(np.intp)
    cx1 = np.clip(np.ceil(corners[:, 2] / feat_stride), 0, wf).astype(np.intp)
    cy0 = np.clip(np.floor(corners[:, 1] / feat_stride), 0, hf).astype(np.intp)
    cy1 = np.clip(np.ceil(corners[:, 3] / feat_stride), 0, hf).astype(np.intp)
    nx, ny = cx1 - cx0, cy1 - cy0
    ok = (nx > 0) & (ny > 0)
    n_empty = int(np.count_nonzero(~ok)) * out_h * out_w
    if not ok.any():
        return np.full((b, out_h * out_w), stack.sentinel, dtype=np.intp), n_empty
    xs, wx = _bin_edges(cx0, np.maximum(nx, 1), out_w)
    ys, wy = _bin_edges(cy0, np.maximum(ny, 1), out_h)
    if wx[ok].max() > stack.smax_x or wy[ok].max() > stack.smax_y:
        raise ValueError("ROI bin window exceeds the precomputed stack size")
    variant = (wy[:, :, None] - 1) * stack.smax_x + (wx[:, None, :] - 1)
    idx = (variant * (hf * wf) + ys[:, :, None] * wf + xs[:, None, :])
    idx = idx.reshape(b, out_h * out_w)
    idx[~ok] = stack.sentinel
    return idx, n_empty


def stack_sizes_for(hf: int, wf: int, out_sizes) -> tuple[int, int]:
    """Smallest window-stack sizes covering ROI pooling to any of out_sizes."""
    smax_y = min(hf, max(math.ceil(hf / o) + 1 for o in out_sizes))
    smax_x = min(wf, max(math.ceil(wf / o) + 1 for o in out_sizes))
    return smax_y, smax_x


def roi_pool(featmap: Tensor, box, feat_stride: int, out_h: int, out_w: int,
             tape: Tape | None = None) -> tuple[Tensor, int]:
    """Max-pool one box region of a [1, C, Hf, Wf] map to [1, C, out_h, out_w].

    The box is mapped to feature cells by floor(start/stride), ceil(end/stride)
    and clipped; bins are the even real partition of the region, rounded
    outward to cell boundaries.  Empty bins (degenerate clipped region) emit 0
    with zero gradient; the count of empty bins is returned alongside.
    """
    _, c, hf, wf = featmap.data.shape
    smax_y = min(hf, math.ceil(hf / out_h) + 1)
    smax_x = min(wf, math.ceil(wf / out_w) + 1)
    stack = window_max_stack(featmap, smax_y, smax_x, tape)
    idx, n_empty = roi_row_indices([box], stack, feat_stride, out_h, out_w)
    rows = select_rows(stack.rows, idx[0], tape)           # [out_h*out_w, C]
    out = permute(reshape(rows, (out_h, out_w, c), tape), (2, 0, 1), tape)
    return reshape(out, (1, c, out_h, out_w), tape), n_empty


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _log_softmax(z: np.ndarray, axis: int):
    zs = z - z.max(axis=axis, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=axis, keepdims=True))


def softmax_nll_rows(logits: Tensor, targets, weights,
                     tape: Tape | None = None) -> Tensor:
    """Weighted sum over rows of -log softmax(logits)[target]."""
    t = np.asarray(targets, dtype=np.intp)
    wgt = np.asarray(weights, dtype=np.float64)
    n, k = logits.data.shape
    if t.shape != (n,) or wgt.shape != (n,):
        raise ValueError("softmax_nll_rows: targets/weights must have one entry per row")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"softmax_nll_rows: target out of range [0, {k})")
    logp = _log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    out = Tensor(-(logp[rows, t] * wgt).sum())
    if tape is not None:
        def bwd():
            p = np.exp(logp)
            p[rows, t] -= 1.0
            logits.grad += p * (wgt * float(out.grad))[:, None]
        tape.record(bwd)
    return out


def softmax_nll_loss(logits: Tensor, targets, tape: Tape | None = None) -> Tensor:
    """Mean over rows of the negative log softmax likelihood of the target."""
    n = logits.data.shape[0]
    return softmax_nll_rows(logits, targets, np.full(n, 1.0 / n), tape)


def smooth_l1_rows(pred: Tensor, target, weights,
                   tape: Tape | None = None) -> Tensor:
    """Weighted sum over rows of the per-row smooth-L1 coordinate sum."""
    tgt = np.asarray(target, dtype=np.float64)
    wgt = np.asarray(weights, dtype=np.float64)
    if pred.data.shape != tgt.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {pred.shape} vs {tgt.shape}")
    d = pred.data - tgt
    a = np.abs(d)
    elem = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    out = Tensor((elem.sum(axis=1) * wgt).sum())
    if tape is not None:
        def bwd():
            pred.grad += np.clip(d, -1.0, 1.0) * (wgt * float(out.grad))[:, None]
        tape.record(bwd)
    return out


def smooth_l1_loss(pred: Tensor, target, tape: Tape | None = None) -> Tensor:
    """Smooth-L1 between two same-shape vectors, summed over coordinates."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, float)
    p2 = reshape(pred, (1, pred.size), tape)
    return smooth_l1_rows(p2, tgt.reshape(1, -1), np.ones(1), tape)


def pixel_ce_rows(v: Tensor, targets, weights, tape: Tape | None = None) -> Tensor:
    """Weighted sum over rows of the per-pixel 2-way cross entropy mean.

    v is [N, 2, P] (background/foreground logits per pixel), targets [N, P]
    with values in {0, 1}.
    """
    t = np.asarray(targets)
    wgt = np.asarray(weights, dtype=np.float64)
    n, ch, p = v.data.shape
    if ch != 2 or t.shape != (n, p):
        raise ValueError(f"pixel_ce_rows shape mismatch: v {v.shape}, targets {t.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("pixel_ce_rows: target mask must be binary")
    t = t.astype(np.intp)
    logp = _log_softmax(v.data, axis=1)
    picked = np.take_along_axis(logp, t[:, None, :], axis=1)[:, 0, :]
    out = Tensor(-(picked.mean(axis=1) * wgt).sum())
    if tape is not None:
        def bwd():
            prob = np.exp(logp)
            onehot = np.zeros_like(prob)
            np.put_along_axis(onehot, t[:, None, :], 1.0, axis=1)
            v.grad += (prob - onehot) * (wgt * float(out.grad) / p)[:, None, None]
        tape.record(bwd)
    return out


def pixel_ce_loss(v: Tensor, target_mask, tape: Tape | None = None) -> Tensor:
    """Per-pixel 2-way cross entropy between a [2, M, M] logit map and a
    binary [M, M] mask, averaged over pixels."""
    tgt = target_mask.data if isinstance(target_mask, Tensor) else np.asarray(target_mask)
    ch, m1, m2 = v.data.shape
    if ch != 2 or tgt.shape != (m1, m2):
        raise ValueError(f"pixel_ce_loss shape mismatch: v {v.shape}, target {tgt.shape}")
    v2 = reshape(v, (1, 2, m1 * m2), tape)
    return pixel_ce_rows(v2, tgt.reshape(1, -1), np.ones(1), tape)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (not taped); used for predictions and gates."""
    zs = z - z.max(axis=axis, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=axis, keepdims=True)

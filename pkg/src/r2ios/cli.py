"""Command-line surface: dataset generation, two-stage training, inference
with mask dumps, and AP evaluation, with every ablation as a flag.

Commands: gen, train, infer, eval.  Exit codes: 0 success, 2 usage/data
error, 64 unknown flag.  R2IOS_THREADS caps worker parallelism (the desk
implementation processes work sequentially, which always satisfies the cap).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .diffcore import (
    ParamStore,
    Tape,
    backward,
    checkpoint_meta,
    load_state,
    save_checkpoint,
    sgd_step,
)
from .evaluation import Prediction, evaluate_apr, format_report, report_lines
from .geometry import Box, label_proposals
from .recursion import (
    batch_loss,
    build_feature_cache,
    image_to_tensor,
    init_model_params,
    predict_final,
    run_recursion_batch,
    select_gate_batch,
)
from .synthdata import (
    CLASS_NAMES,
    InstanceGT,
    Scene,
    format_box,
    generate_proposals,
    generate_scene,
    parse_box,
    read_dataset,
    read_pgm,
    write_dataset,
    write_pgm,
    write_ppm,
)

_CLASS_RGB = {1: (217, 64, 64), 2: (64, 204, 77), 3: (64, 89, 217)}


class UsageError(Exception):
    """Raised for usage or data errors; mapped to exit code 2."""


def worker_cap() -> int:
    """Parallelism cap from R2IOS_THREADS (>= 1)."""
    raw = os.environ.get("R2IOS_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        cap = int(raw)
    except ValueError as exc:
        raise UsageError(f"R2IOS_THREADS must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise UsageError("R2IOS_THREADS must be >= 1")
    return cap


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def flip_sample(image: np.ndarray, gts: list[InstanceGT],
                proposals: list[Box], img_w: int):
    """Horizontal flip of an image together with its masks and boxes."""
    def flip_box(b: Box) -> Box:
        return Box(img_w - b.cx, b.cy, b.w, b.h)
    flipped_gts = [InstanceGT(id=g.id, cls=g.cls, mask=g.mask[:, ::-1],
                              box=flip_box(g.box)) for g in gts]
    return image[:, ::-1], flipped_gts, [flip_box(p) for p in proposals]


def build_minibatch(scene: Scene, proposals: list[Box], gts: list[InstanceGT],
                    cfg: RunConfig, rng: np.random.Generator):
    """64-proposal batch at the configured foreground fraction; classes of
    short sides are resampled with replacement.  Images without any
    foreground (or background) proposal fill the batch from the other side."""
    labeled = label_proposals(proposals, gts)
    fg = [i for i, lp in enumerate(labeled) if lp.g >= 1]
    bg = [i for i, lp in enumerate(labeled) if lp.g == 0]
    total = cfg.batch_proposals
    n_fg = round(total * cfg.fg_fraction) if fg else 0
    if not bg:
        n_fg = total if fg else 0
    n_bg = total - n_fg
    picks = []
    if n_fg:
        picks.extend(rng.choice(np.array(fg), size=n_fg,
                                replace=len(fg) < n_fg).tolist())
    if n_bg:
        picks.extend(rng.choice(np.array(bg), size=n_bg,
                                replace=len(bg) < n_bg).tolist())
    by_id = {g.id: g for g in gts}
    boxes, labels, gt_boxes, gt_masks = [], [], [], []
    for i in picks:
        lp = labeled[i]
        boxes.append(lp.box)
        labels.append(lp.g)
        dom = by_id.get(lp.dominant_instance) if lp.g >= 1 else None
        gt_boxes.append(dom.box if dom else None)
        gt_masks.append(dom.mask if dom else None)
    return boxes, np.array(labels, dtype=np.intp), gt_boxes, gt_masks


def clip_gradients(params: ParamStore, max_norm: float) -> None:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Tames the episodic gradient spikes of the unrolled multi-loss, which
    momentum otherwise amplifies into divergence; 0 disables."""
    if max_norm <= 0:
        return
    total = 0.0
    for name in params.names():
        g = params[name]._grad
        if g is not None:
            total += float((g * g).sum())
    total = total ** 0.5
    if total > max_norm:
        factor = max_norm / total
        for name in params.names():
            g = params[name]._grad
            if g is not None:
                g *= factor


def train_step(scene_index: int, scenes: list[Scene], params: ParamStore,
               cfg: RunConfig, rcfg, rng: np.random.Generator):
    scene = scenes[scene_index]
    scfg = cfg.scene_config()
    mcfg = cfg.model_config()
    image, gts = scene.image, scene.gts
    proposals = generate_proposals(gts, scfg, scene_index)
    if rng.random() < cfg.flip_prob:
        image, gts, proposals = flip_sample(image, gts, proposals, cfg.img_w)
    boxes, labels, gt_boxes, gt_masks = build_minibatch(scene, proposals, gts, cfg, rng)
    tape = Tape()
    cache = build_feature_cache(image_to_tensor(image), params, mcfg, tape)
    iters = run_recursion_batch(cache, boxes, params, mcfg, rcfg, "train",
                                cfg.img_w, cfg.img_h, tape, labels,
                                gt_boxes, gt_masks)
    if rcfg.gates_enabled:
        t_prime = select_gate_batch(iters)
    else:
        t_prime = np.full(len(boxes), len(iters), dtype=np.intp)
    loss = batch_loss(iters, labels, t_prime, mcfg, tape)
    backward(loss, tape)
    clip_gradients(params, cfg.grad_clip)
    sgd_step(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    hist = np.bincount(t_prime, minlength=rcfg.iterations + 1)[1:]
    return float(loss.data), hist


def checkpoint_metadata(cfg: RunConfig) -> dict:
    meta = {}
    for key in ("num_classes", "mask_size", "roi_size", "feat_stride",
                "seg_hidden", "ae_hidden", "fc_width", "iterations",
                "gates_enabled", "train_recursive", "no_autoencoder",
                "fully_no_autoencoder", "no_seg_aware", "stop_seg_grad"):
        meta[key] = float(getattr(cfg, key))
    meta["backbone_channels"] = np.array(cfg.backbone_channels, dtype=np.float64)
    return meta


def train_model(cfg: RunConfig, scenes: list[Scene], log=None,
                checkpoint_path=None, initial_params: ParamStore | None = None,
                stage_end_hook=None):
    """Two-stage schedule: stage 1 without the reversible gates, stage 2
    (when gates are enabled) fine-tunes with them.  ``stage_end_hook`` is
    called as hook(stage_name, params) when a stage completes."""
    if not scenes:
        raise UsageError("training dataset is empty")
    params = initial_params or init_model_params(
        cfg.model_config(), cfg.recursion_config(), cfg.seed)
    # the pixel-mean mask loss reaches the autoencoder ~M^2-fold diluted, so
    # that parameter group trains at lr * ae_lr_scale
    params.set_lr_scale("ae.", cfg.ae_lr_scale)
    rng = np.random.default_rng([cfg.seed, 3])
    base = cfg.recursion_config()
    stages = [("stage1", replace(base, gates_enabled=False), cfg.stage1_steps)]
    if cfg.gates_enabled and cfg.stage2_steps > 0:
        stages.append(("stage2", replace(base, gates_enabled=True), cfg.stage2_steps))
    step = 0
    for stage_name, stage_rcfg, n_steps in stages:
        for _ in range(n_steps):
            scene_index = int(rng.integers(0, len(scenes)))
            loss, hist = train_step(scene_index, scenes, params, cfg, stage_rcfg, rng)
            step += 1
            if log and (step % cfg.log_every == 0 or step == 1):
                log(f"step {step:6d}  {stage_name}  gates="
                    f"{str(stage_rcfg.gates_enabled).lower()}  loss {loss:.4f}"
                    f"  t'={hist.tolist()}")
            if checkpoint_path and step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, checkpoint_metadata(cfg))
        if stage_end_hook:
            stage_end_hook(stage_name, params)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, checkpoint_metadata(cfg))
    return params


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def run_inference(cfg: RunConfig, params: ParamStore, scenes: list[Scene],
                  out_dir: str, log=None) -> str:
    """Predict every image; writes per-instance PGM masks, a predictions
    manifest and a colour composite PPM per image.  Returns the manifest path."""
    mcfg = cfg.model_config()
    rcfg = cfg.recursion_config()
    scfg = cfg.scene_config()
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "composites"), exist_ok=True)
    lines = []
    gate_bg = 0
    for i, scene in enumerate(scenes):
        proposals = generate_proposals(scene.gts, scfg, i)
        preds, stats = predict_final(scene.image, proposals, params, mcfg, rcfg,
                                     cfg.nms_thresh)
        gate_bg += stats["gate_background_discards"]
        img_rel = f"images/img_{i:05d}.ppm"
        composite = (scene.image // 2).astype(np.uint16)
        for j, p in enumerate(preds):
            mask_rel = f"masks/pred_{i:05d}_{j}.pgm"
            write_pgm(os.path.join(out_dir, mask_rel), p.mask)
            lines.append(f"{img_rel}\t{p.cls}\t{p.confidence!r}\t"
                         f"{format_box(p.box)}\t{mask_rel}")
            color = np.array(_CLASS_RGB.get(p.cls, (200, 200, 200)), dtype=np.uint16)
            composite[p.mask] = composite[p.mask] // 2 + color // 2 + 64
        write_ppm(os.path.join(out_dir, "composites", f"img_{i:05d}.ppm"),
                  np.clip(composite, 0, 255).astype(np.uint8))
    manifest = os.path.join(out_dir, "predictions.txt")
    with open(manifest, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    if log:
        log(f"wrote {len(lines)} predictions for {len(scenes)} images"
            f" (gate chose a background iteration {gate_bg} times)")
    return manifest


def read_predictions(manifest: str, pred_root: str):
    """Parse a predictions manifest into {image path: [Prediction, ...]}."""
    per_image: dict[str, list[Prediction]] = {}
    boxes: dict[str, list[Box]] = {}
    try:
        with open(manifest, encoding="utf-8") as f:
            rows = [ln.rstrip("\n") for ln in f if ln.strip()]
    except OSError as exc:
        raise UsageError(f"cannot read predictions manifest: {exc}") from exc
    for row in rows:
        try:
            img_rel, cls_s, conf_s, box_s, mask_rel = row.split("\t")
        except ValueError as exc:
            raise UsageError(f"malformed prediction row: {row!r}") from exc
        mask = read_pgm(os.path.join(pred_root, mask_rel)) >= 128
        per_image.setdefault(img_rel, []).append(
            Prediction(cls=int(cls_s), confidence=float(conf_s), mask=mask))
        boxes.setdefault(img_rel, []).append(parse_box(box_s))
    return per_image, boxes


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    _apply_ablation_flags(cfg, args)
    return cfg


def _apply_ablation_flags(cfg: RunConfig, args) -> None:
    if getattr(args, "iterations", None) is not None:
        cfg.iterations = args.iterations
    if getattr(args, "no_gates", False):
        cfg.gates_enabled = False
    if getattr(args, "no_autoencoder", False):
        cfg.no_autoencoder = True
    if getattr(args, "fully_no_autoencoder", False):
        cfg.fully_no_autoencoder = True
    if getattr(args, "no_seg_aware", False):
        cfg.no_seg_aware = True
    if getattr(args, "recursive_only_testing", False):
        cfg.train_recursive = False


def cmd_gen(args) -> int:
    cfg = _load_run_config(args)
    scfg = cfg.scene_config()
    scenes = [generate_scene(scfg, i) for i in range(args.count)]
    try:
        write_dataset(args.out, scenes)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from exc
    counts = {c: 0 for c in range(1, cfg.num_classes + 1)}
    for scene in scenes:
        for gt in scene.gts:
            counts[gt.cls] += 1
    summary = "  ".join(f"{CLASS_NAMES.get(c, c)}:{n}" for c, n in counts.items())
    print(f"wrote {len(scenes)} scenes to {args.out}  instances per class: {summary}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    scenes = read_dataset(args.dataset)
    if not scenes:
        raise UsageError(f"dataset {args.dataset} is empty")
    params = train_model(cfg, scenes, log=print, checkpoint_path=args.out)
    print(f"checkpoint written to {args.out} ({len(params.names())} tensors)")
    return 0


def apply_checkpoint_meta(cfg: RunConfig, state: dict) -> None:
    """Model architecture and ablation flags travel with the checkpoint."""
    meta = checkpoint_meta(state)
    for key, value in meta.items():
        if key == "backbone_channels":
            continue
        if hasattr(cfg, key):
            current = getattr(cfg, key)
            setattr(cfg, key, type(current)(value) if not isinstance(current, bool)
                    else bool(value))
    if "meta.backbone_channels" in state:
        cfg.backbone_channels = tuple(
            int(v) for v in state["meta.backbone_channels"].ravel())


def cmd_infer(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    try:
        state = load_state(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    apply_checkpoint_meta(cfg, state)
    if getattr(args, "set", None):
        apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    _apply_ablation_flags(cfg, args)
    params = init_model_params(cfg.model_config(), cfg.recursion_config(), cfg.seed)
    try:
        params.load_state(state)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scenes = read_dataset(args.dataset)
    worker_cap()  # validate the environment override even though we run serially
    run_inference(cfg, params, scenes, args.out, log=print)
    return 0


def cmd_eval(args) -> int:
    scenes = read_dataset(args.dataset)
    dataset_images = [f"images/img_{i:05d}.ppm" for i in range(len(scenes))]
    pred_root = args.predictions
    manifest = os.path.join(pred_root, "predictions.txt")
    if not os.path.isdir(pred_root):
        pred_root, manifest = os.path.dirname(args.predictions), args.predictions
    per_image, _ = read_predictions(manifest, pred_root)
    unknown = sorted(set(per_image) - set(dataset_images))
    if unknown:
        raise UsageError("predictions reference images absent from the dataset: "
                         + ", ".join(unknown))
    preds = [per_image.get(rel, []) for rel in dataset_images]
    gts = [scene.gts for scene in scenes]
    report = evaluate_apr(preds, gts, num_classes=max(
        (gt.cls for per in gts for gt in per), default=0))
    print(format_report(report, CLASS_NAMES))
    out_path = args.out or os.path.join(pred_root, "apr_report.txt")
    with open(out_path, "w", encoding="utf-8") as f:
        for line in report_lines(report):
            f.write(line + "\n")
    print(f"report written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse with the documented exit codes: 64 for unknown flags, 2 for
    other usage errors."""

    def error(self, message):
        code = 64 if "unrecognized arguments" in message else 2
        self.exit(code, f"{self.prog}: error: {message}\n")


def _add_shared(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")


def _add_ablations(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, help="refinement iterations T")
    p.add_argument("--no-gates", action="store_true", dest="no_gates")
    p.add_argument("--no-autoencoder", action="store_true", dest="no_autoencoder")
    p.add_argument("--fully-no-autoencoder", action="store_true",
                   dest="fully_no_autoencoder")
    p.add_argument("--no-seg-aware", action="store_true", dest="no_seg_aware")
    p.add_argument("--recursive-only-testing", action="store_true",
                   dest="recursive_only_testing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="r2ios",
                     description="recursive instance segmentation on synthetic shapes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_shared(p, "output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="two-stage training")
    _add_shared(p, "output checkpoint path")
    p.add_argument("--dataset", required=True, help="dataset directory")
    _add_ablations(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict instances with a checkpoint")
    _add_shared(p, "output predictions directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    _add_ablations(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="region AP against a dataset")
    p.add_argument("--config", help="unused; accepted for uniformity")
    p.add_argument("--seed", type=int, help="unused; accepted for uniformity")
    p.add_argument("--predictions", required=True,
                   help="predictions directory or manifest path")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="report file path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

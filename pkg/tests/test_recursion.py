"""Recursion control-loop tests: unrolling, gate selection, loss assembly and
masking, background freezing, and test-time reversal."""

import numpy as np
import pytest

from r2ios.diffcore import Tape, Tensor, backward
from r2ios.geometry import Box, LabeledProposal, Offsets, encode_offsets
from r2ios.recursion import (
    GateState,
    IterationRecord,
    RecursionConfig,
    assemble_loss,
    batch_loss,
    build_feature_cache,
    compute_Jt,
    image_to_tensor,
    init_model_params,
    paste_mask,
    predict_final,
    run_recursion,
    run_recursion_batch,
    select_gate,
    select_gate_batch,
)
from r2ios.refinenet import ClassScores, OffsetTable
from r2ios.segnet import DominantMask, ModelConfig, seg_target
from r2ios.synthdata import InstanceGT, SceneConfig, generate_proposals, generate_scene

MINI = ModelConfig(num_classes=3, mask_size=4, roi_size=3, feat_stride=2,
                   backbone_channels=(4, 6), seg_hidden=5, ae_hidden=8, fc_width=7)
RC = RecursionConfig(iterations=3)


def rand_image(seed=1, h=8, w=8):
    return np.random.default_rng(seed).integers(0, 255, size=(h, w, 3)).astype(np.uint8)


def make_gt(seed=2, h=8, w=8):
    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), dtype=bool)
    mask[2:6, 2:7] = True
    return InstanceGT(id=0, cls=2, mask=mask, box=Box.from_corners(2, 2, 7, 6))


def fake_record(t, probs, g_hat=None):
    p = np.asarray(probs, dtype=float)
    return IterationRecord(
        t=t, p=ClassScores(p=p), O=OffsetTable(O=np.zeros((3, 4))),
        v=DominantMask(v=Tensor(np.zeros((2, 2, 2))), fg_prob=np.zeros((2, 2))),
        l=Box(1, 1, 2, 2), g_hat=int(np.argmax(p)) if g_hat is None else g_hat)


class TestSelectGate:
    def test_highest_confidence_wins(self):
        records = [fake_record(1, [0.4, 0.6, 0.0, 0.0]),
                   fake_record(2, [0.2, 0.8, 0.0, 0.0]),
                   fake_record(3, [0.25, 0.75, 0.0, 0.0]),
                   fake_record(4, [0.3, 0.7, 0.0, 0.0])]
        gate = select_gate(records)
        assert gate.t_prime == 2
        assert gate.r == [False, True, False, False]

    def test_monotone_increasing_selects_last(self):
        records = [fake_record(t, [1 - c, c, 0, 0])
                   for t, c in enumerate((0.5, 0.6, 0.7, 0.9), start=1)]
        assert select_gate(records).t_prime == 4

    def test_tie_breaks_to_earliest(self):
        records = [fake_record(1, [0.8, 0.2, 0, 0]),
                   fake_record(2, [0.8, 0.2, 0, 0]),
                   fake_record(3, [0.5, 0.5, 0, 0]),
                   fake_record(4, [0.5, 0.5, 0, 0])]
        assert select_gate(records).t_prime == 1

    def test_uses_predicted_class_confidence_background_included(self):
        records = [fake_record(1, [0.9, 0.1, 0, 0]),   # background, conf 0.9
                   fake_record(2, [0.2, 0.8, 0, 0])]   # class 1, conf 0.8
        assert select_gate(records).t_prime == 1


class TestAssembleLoss:
    def test_sums_first_t_prime(self):
        records = [fake_record(t, [1, 0, 0, 0]) for t in range(1, 5)]
        for rec, val in zip(records, (1.0, 0.5, 0.7, 0.9)):
            rec.J = Tensor(np.array(val))
        gate = GateState(r=[False, True, False, False], t_prime=2)
        assert float(assemble_loss(records, gate).data) == pytest.approx(1.5)

    def test_gates_disabled_sums_all(self):
        records = [fake_record(t, [1, 0, 0, 0]) for t in range(1, 5)]
        for rec, val in zip(records, (1.0, 0.5, 0.7, 0.9)):
            rec.J = Tensor(np.array(val))
        assert float(assemble_loss(records, None).data) == pytest.approx(3.1)

    def test_missing_J_raises(self):
        records = [fake_record(1, [1, 0, 0, 0])]
        with pytest.raises(RuntimeError):
            assemble_loss(records, None)


class TestRunRecursion:
    def test_t1_is_single_pass(self):
        params = init_model_params(MINI, RecursionConfig(iterations=1), 0)
        gt = make_gt()
        prop = LabeledProposal(box=gt.box, g=gt.cls, dominant_instance=0,
                               target_offsets=encode_offsets(gt.box, gt.box))
        records = run_recursion(rand_image(), prop, params,
                                MINI, RecursionConfig(iterations=1), "test")
        assert len(records) == 1

    def test_background_test_proposal_box_frozen(self):
        params = init_model_params(MINI, RC, 0)
        # zero head weights force uniform scores -> argmax = background
        params["ref.cls.w"].data[...] = 0.0
        params["ref.cls.b"].data[...] = 0.0
        box = Box(4, 4, 3, 3)
        records = run_recursion(rand_image(3), box, params, MINI, RC, "test")
        for rec in records:
            assert rec.g_hat == 0
            assert rec.l is box  # bitwise-identical object, never updated

    def test_zero_offset_table_keeps_boxes(self):
        params = init_model_params(MINI, RC, 1)
        # zero regression head means decode is the identity
        params["ref.box.w"].data[...] = 0.0
        params["ref.box.b"].data[...] = 0.0
        # bias the classifier towards class 1 so boxes would move if offsets were nonzero
        params["ref.cls.b"].data[...] = np.array([0.0, 5.0, 0.0, 0.0])
        box = Box(4, 4, 3, 3)
        records = run_recursion(rand_image(4), box, params, MINI, RC, "test")
        for rec in records:
            assert rec.g_hat == 1
            assert (rec.l.cx, rec.l.cy, rec.l.w, rec.l.h) == (4, 4, 3, 3)

    def test_train_mode_records_carry_losses(self):
        params = init_model_params(MINI, RC, 2)
        gt = make_gt()
        prop = LabeledProposal(box=Box(4.2, 3.8, 5.5, 4.5), g=gt.cls,
                               dominant_instance=0,
                               target_offsets=encode_offsets(Box(4.2, 3.8, 5.5, 4.5), gt.box))
        records = run_recursion(rand_image(5), prop, params, MINI, RC, "train",
                                gts=[gt])
        assert all(rec.J is not None for rec in records)
        assert all(float(rec.J.data) > 0 for rec in records)

    def test_foreground_without_gts_raises(self):
        params = init_model_params(MINI, RC, 2)
        gt = make_gt()
        prop = LabeledProposal(box=gt.box, g=1, dominant_instance=5,
                               target_offsets=Offsets(0, 0, 0, 0))
        with pytest.raises(RuntimeError):
            run_recursion(rand_image(5), prop, params, MINI, RC, "train", gts=[gt])

    def test_parameters_untouched_by_forward(self):
        params = init_model_params(MINI, RC, 3)
        before = params.fingerprint()
        run_recursion(rand_image(6), Box(4, 4, 4, 4), params, MINI, RC, "test")
        assert params.fingerprint() == before


class TestComputeJt:
    def test_background_is_classification_only(self):
        params = init_model_params(MINI, RC, 4)
        records = run_recursion(rand_image(7), Box(4, 4, 4, 4), params, MINI,
                                RecursionConfig(iterations=1), "train",
                                gts=[])
        rec = records[0]
        from r2ios.diffcore import softmax_nll_rows
        ref = softmax_nll_rows(rec.cls_logits, [0], [1.0])
        assert float(rec.J.data) == pytest.approx(float(ref.data), abs=1e-12)

    def test_foreground_sums_three_terms(self):
        params = init_model_params(MINI, RC, 5)
        gt = make_gt()
        box = Box(4.0, 4.0, 5.0, 4.4)
        prop = LabeledProposal(box=box, g=gt.cls, dominant_instance=0,
                               target_offsets=encode_offsets(box, gt.box))
        records = run_recursion(rand_image(8), prop, params, MINI,
                                RecursionConfig(iterations=1), "train", gts=[gt])
        rec = records[0]
        from r2ios.diffcore import pixel_ce_rows, reshape, select_class_rows, smooth_l1_rows, softmax_nll_rows
        off = encode_offsets(box, gt.box)
        tgt = seg_target(gt.mask, box, MINI.mask_size)
        cls = float(softmax_nll_rows(rec.cls_logits, [gt.cls], [1.0]).data)
        sel = select_class_rows(rec.box_pred, [gt.cls - 1], 4)
        loc = float(smooth_l1_rows(sel, np.asarray(off.as_tuple())[None], [1.0]).data)
        v3 = reshape(rec.vvec, (1, 2, MINI.mask_size ** 2))
        seg = float(pixel_ce_rows(v3, tgt.reshape(1, -1), [1.0]).data)
        assert float(rec.J.data) == pytest.approx(cls + loc + seg, abs=1e-12)

    def test_missing_targets_raise(self):
        rec = fake_record(1, [0.25, 0.75, 0, 0])
        rec.cls_logits = Tensor(np.zeros((1, 4)))
        rec.box_pred = Tensor(np.zeros((1, 12)))
        rec.vvec = Tensor(np.zeros((1, 32)))
        with pytest.raises(RuntimeError):
            compute_Jt(rec, 1, None, None)


class TestLossMasking:
    def _grads_for(self, t_prime_cap, seed=21):
        params = init_model_params(MINI, RC, 9)
        gt = make_gt()
        box = Box(4.1, 3.9, 5.2, 4.6)
        prop = LabeledProposal(box=box, g=gt.cls, dominant_instance=0,
                               target_offsets=encode_offsets(box, gt.box))
        tape = Tape()
        records = run_recursion(rand_image(seed), prop, params, MINI, RC,
                                "train", gts=[gt], tape=tape)
        gate = GateState(r=[t == t_prime_cap for t in range(1, RC.iterations + 1)],
                         t_prime=t_prime_cap)
        loss = assemble_loss(records, gate, tape)
        backward(loss, tape)
        return params, {n: params[n].grad.copy() for n in params.names()}

    def test_masked_equals_isolated_sum(self):
        _, masked = self._grads_for(2)
        # isolated: run the same forward twice, backward each J_t separately
        params = init_model_params(MINI, RC, 9)
        gt = make_gt()
        box = Box(4.1, 3.9, 5.2, 4.6)
        prop = LabeledProposal(box=box, g=gt.cls, dominant_instance=0,
                               target_offsets=encode_offsets(box, gt.box))
        tape = Tape()
        records = run_recursion(rand_image(21), prop, params, MINI, RC,
                                "train", gts=[gt], tape=tape)
        backward(assemble_loss(records[:2], None, tape), tape)
        isolated = {n: params[n].grad.copy() for n in params.names()}
        for name, g in masked.items():
            np.testing.assert_allclose(g, isolated[name], atol=1e-10,
                                       err_msg=name)

    def test_gradients_ignore_iterations_past_gate(self):
        # with t' = 1, batched loss weights zero out later iterations, so
        # gradients match a pure single-iteration sum bitwise
        params = init_model_params(MINI, RC, 10)
        img = rand_image(22)
        gt = make_gt()
        boxes = [Box(4.1, 3.9, 5.2, 4.6), Box(3.5, 4.5, 4.0, 3.0)]
        labels = np.array([gt.cls, 0])
        tape = Tape()
        cache = build_feature_cache(image_to_tensor(img), params, MINI, tape)
        iters = run_recursion_batch(cache, boxes, params, MINI, RC, "train",
                                    8, 8, tape, labels, [gt.box, None],
                                    [gt.mask, None])
        t_prime = np.array([1, 1])
        loss = batch_loss(iters, labels, t_prime, MINI, tape)
        backward(loss, tape)
        grads_a = {n: params[n].grad.copy() for n in params.names()}

        params2 = init_model_params(MINI, RC, 10)
        tape2 = Tape()
        cache2 = build_feature_cache(image_to_tensor(img), params2, MINI, tape2)
        iters2 = run_recursion_batch(cache2, boxes, params2, MINI, RC, "train",
                                     8, 8, tape2, labels, [gt.box, None],
                                     [gt.mask, None])
        loss2 = batch_loss(iters2[:1], labels, np.array([1, 1]), MINI, tape2)
        backward(loss2, tape2)
        for n in params2.names():
            np.testing.assert_allclose(params2[n].grad, grads_a[n], atol=1e-12,
                                       err_msg=n)


class TestSelectGateBatch:
    def test_matches_per_proposal_rule(self):
        params = init_model_params(MINI, RC, 12)
        img = rand_image(30)
        boxes = [Box(4, 4, 5, 5), Box(3, 5, 4, 3), Box(5, 3, 3, 4)]
        cache = build_feature_cache(image_to_tensor(img), params, MINI, None)
        iters = run_recursion_batch(cache, boxes, params, MINI, RC, "test", 8, 8)
        t_prime = select_gate_batch(iters)
        for i in range(len(boxes)):
            conf = [it.probs[i, it.g_hat[i]] for it in iters]
            assert t_prime[i] == int(np.argmax(conf)) + 1


class TestPredictFinal:
    def test_gate_replay_equivalence(self):
        params = init_model_params(MINI, RC, 13)
        img = rand_image(31)
        boxes = [Box(4, 4, 5, 5), Box(3.5, 4.5, 4, 3)]
        cache = build_feature_cache(image_to_tensor(img), params, MINI, None)
        iters = run_recursion_batch(cache, boxes, params, MINI, RC, "test", 8, 8)
        t_prime = select_gate_batch(iters)
        preds, _ = predict_final(img, boxes, params, MINI, RC, nms_thresh=0.3)
        for p in preds:
            matched = False
            for i in range(len(boxes)):
                it = iters[t_prime[i] - 1]
                if it.g_hat[i] == p.cls and it.boxes_out[i] == p.box and \
                   float(it.probs[i, it.g_hat[i]]) == p.confidence and \
                   np.array_equal(it.seg.fg_prob[i], p.fg_prob):
                    matched = True
            assert matched, "emitted prediction does not replay a stored record"

    def test_all_background_empty_output(self):
        params = init_model_params(MINI, RC, 14)
        params["ref.cls.b"].data[...] = np.array([10.0, 0.0, 0.0, 0.0])
        preds, _ = predict_final(rand_image(32), [Box(4, 4, 4, 4)], params,
                                 MINI, RC)
        assert preds == []

    def test_no_proposals(self):
        params = init_model_params(MINI, RC, 15)
        preds, stats = predict_final(rand_image(33), [], params, MINI, RC)
        assert preds == [] and stats["proposals"] == 0

    def test_duplicates_suppressed_by_nms(self):
        params = init_model_params(MINI, RC, 16)
        params["ref.cls.b"].data[...] = np.array([0.0, 10.0, 0.0, 0.0])
        params["ref.box.w"].data[...] = 0.0
        params["ref.box.b"].data[...] = 0.0
        box = Box(4, 4, 5, 5)
        preds, _ = predict_final(rand_image(34), [box, box, box], params,
                                 MINI, RC)
        assert len(preds) <= 1

    def test_masks_disjoint_after_pasting(self):
        params = init_model_params(MINI, RC, 17)
        params["ref.cls.b"].data[...] = np.array([0.0, 3.0, 0.0, 0.0])
        rng = np.random.default_rng(0)
        boxes = [Box(rng.uniform(2, 6), rng.uniform(2, 6), 4, 4) for _ in range(4)]
        preds, _ = predict_final(rand_image(35), boxes, params, MINI, RC,
                                 nms_thresh=0.9)
        total = np.zeros((8, 8), dtype=int)
        for p in preds:
            assert p.mask.any()
            total += p.mask
        assert total.max() <= 1


class TestPasteMask:
    def test_full_confidence_fills_box_interior(self):
        fg = np.ones((4, 4))
        mask = paste_mask(fg, Box.from_corners(2, 2, 6, 6), 8, 8)
        assert mask[2:6, 2:6].all()
        assert mask.sum() == 16

    def test_zero_confidence_empty(self):
        assert not paste_mask(np.zeros((4, 4)), Box(4, 4, 4, 4), 8, 8).any()

    def test_box_outside_image_empty(self):
        assert not paste_mask(np.ones((4, 4)), Box(20, 20, 4, 4), 8, 8).any()

    def test_left_half_mask_pastes_left_half(self):
        fg = np.zeros((4, 4))
        fg[:, :2] = 1.0
        mask = paste_mask(fg, Box.from_corners(0, 0, 8, 8), 8, 8)
        assert mask[:, :3].all()
        assert not mask[:, 5:].any()

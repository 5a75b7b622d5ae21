import math
import types

import numpy as np
import pytest
import torch

from daodet.datamodel import BoundingBox, Prediction
from daodet.detector import (
    ForwardResult,
    MatchResult,
    ParameterSet,
    RoiOutputs,
    RpnOutputs,
    ShapeMismatchError,
    infer,
    init_params,
    supervised_losses,
    training_forward,
)
from daodet.distill import (
    DistillConfig,
    DistillTargets,
    DistillationError,
    build_soft_targets,
    ema_update,
    hard_distill_losses,
    hard_pseudo_labels,
    sharpen_classes,
    sharpen_objectness,
    soft_distill_losses,
    teacher_pseudo_labels,
)

from utils import float_equal, make_record, random_boxes, tiny_detector_config


def _student(obj, rpn_deltas, cls, roi_deltas):
    """ Fake student outputs with every anchor sampled. """
    rpn = RpnOutputs(obj, rpn_deltas)
    roi = RoiOutputs(cls, roi_deltas, torch.zeros((cls.shape[0], 1), dtype=cls.dtype))
    n = obj.shape[0]
    plan = types.SimpleNamespace(
        rpn_match=MatchResult(np.arange(n), np.zeros(n, dtype=np.int64), np.full(n, -1))
    )
    return ForwardResult(None, rpn, roi), plan


def _random_outputs(rng, n_anchors=12, n_props=7, n_classes=3):
    def t(*shape):
        return torch.tensor(rng.normal(size=shape), dtype=torch.float64)

    return t(n_anchors), t(n_anchors, 4), t(n_props, n_classes), t(n_props, 4)


def test_ema_update_limits():
    config = tiny_detector_config()
    teacher, student = init_params(config, 0), init_params(config, 1)
    assert ema_update(teacher, student, 1.0).equal(teacher)
    assert ema_update(teacher, student, 0.0).equal(student)
    assert teacher.equal(init_params(config, 0))
    assert student.equal(init_params(config, 1))
    t = ParameterSet({"w": torch.tensor([1.0])})
    s = ParameterSet({"w": torch.tensor([0.0])})
    assert float_equal(float(ema_update(t, s, 0.9)["w"]), 0.9)
    with pytest.raises(ShapeMismatchError):
        ema_update(teacher, init_params(tiny_detector_config(roi_hidden=6), 0), 0.5)
    with pytest.raises(ValueError):
        ema_update(teacher, student, 1.5)


def test_ema_converges_geometrically():
    config = tiny_detector_config()
    teacher0, student = init_params(config, 0), init_params(config, 1)
    alpha = 0.9
    teacher = teacher0
    for n in range(1, 21):
        teacher = ema_update(teacher, student, alpha)
        expected = alpha ** n * teacher0.max_abs_diff(student)
        assert math.isclose(teacher.max_abs_diff(student), expected, rel_tol=1e-9)


def test_hard_pseudo_labels_threshold():
    preds = [
        Prediction(BoundingBox(0, 0, 4, 4), 0, 0.9),
        Prediction(BoundingBox(10, 10, 14, 14), 1, 0.85),
        Prediction(BoundingBox(20, 20, 24, 24), 0, 0.79),
    ]
    labels = hard_pseudo_labels(preds, 0.8, 0.5)
    assert len(labels) == 2
    assert labels[0].box == BoundingBox(0, 0, 4, 4)
    assert len(hard_pseudo_labels(preds, 0.0, 0.5)) == 3
    assert hard_pseudo_labels([], 0.5, 0.5) == []
    # suppression happens before thresholding, per class
    overlapping = preds + [Prediction(BoundingBox(0, 0, 4, 4.5), 0, 0.95)]
    assert len(hard_pseudo_labels(overlapping, 0.8, 0.5)) == 2


def test_pseudo_label_count_is_monotone():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(0, 12))
        preds = [
            Prediction(box, int(rng.integers(0, 2)), float(rng.uniform()))
            for box in random_boxes(rng, n)
        ]
        counts = [len(hard_pseudo_labels(preds, t, 0.5)) for t in np.linspace(0, 1, 11)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_teacher_pseudo_labels(pair):
    config = tiny_detector_config()
    params = init_params(config, 0)
    record = pair.target_train[0]
    distill = DistillConfig(confidence_threshold=0.0)
    expected = hard_pseudo_labels(infer(params, record, config), 0.0, distill.nms_iou)
    assert teacher_pseudo_labels(params, record, config, distill) == expected


def test_sharpening():
    assert float(sharpen_objectness(torch.tensor(0.0))) == 0.5
    assert torch.allclose(sharpen_classes(torch.zeros(4)), torch.full((4,), 0.25))
    e = math.e
    dist = sharpen_classes(torch.tensor([2.0, 0.0], dtype=torch.float64), 2.0)
    assert torch.allclose(dist, torch.tensor([e / (e + 1), 1 / (e + 1)], dtype=torch.float64))
    assert torch.allclose(sharpen_classes(torch.randn(5, 3)).sum(dim=1), torch.ones(5))


def test_single_anchor_objectness_loss():
    student, plan = _student(
        torch.zeros(1, dtype=torch.float64),
        torch.zeros((1, 4), dtype=torch.float64),
        torch.zeros((1, 3), dtype=torch.float64),
        torch.zeros((1, 4), dtype=torch.float64),
    )
    targets = DistillTargets(
        torch.tensor([0.5], dtype=torch.float64),
        torch.ones((1, 4), dtype=torch.float64),
        torch.full((1, 3), 1.0 / 3, dtype=torch.float64),
        torch.zeros((1, 4), dtype=torch.float64),
    )
    losses = soft_distill_losses(student, plan, targets, DistillConfig(mode="soft"))
    assert float_equal(float(losses["loss_distill_obj"]), math.log(2))
    # teacher objectness below the gate: no RPN regression term
    assert float(losses["loss_distill_rpn"]) == 0.0
    assert float_equal(float(losses["loss_distill_cls"]), math.log(3))


@pytest.mark.parametrize("temperatures", [(1.0, 1.0), (2.0, 0.5)])
def test_soft_gradients_closed_form(temperatures):
    t_obj, t_cls = temperatures
    config = DistillConfig(mode="soft", temperature_obj=t_obj, temperature_cls=t_cls)
    rng = np.random.default_rng(1)
    obj, rpn_deltas, cls, roi_deltas = _random_outputs(rng)
    obj.requires_grad_(True)
    cls.requires_grad_(True)
    t_obj_logits, _, t_cls_logits, _ = _random_outputs(rng)
    targets = DistillTargets(
        sharpen_objectness(t_obj_logits, t_obj),
        rpn_deltas.clone(),
        sharpen_classes(t_cls_logits, t_cls),
        roi_deltas.clone(),
    )
    student, plan = _student(obj, rpn_deltas, cls, roi_deltas)
    losses = soft_distill_losses(student, plan, targets, config)
    (losses["loss_distill_obj"] + losses["loss_distill_cls"]).backward()
    expected_obj = (torch.sigmoid(obj / t_obj) - targets.rpn_objectness) / (t_obj * obj.shape[0])
    expected_cls = (torch.softmax(cls / t_cls, dim=1) - targets.roi_class_dist) / (t_cls * cls.shape[0])
    assert torch.allclose(obj.grad, expected_obj.detach(), atol=1e-8)
    assert torch.allclose(cls.grad, expected_cls.detach(), atol=1e-8)


def test_self_distillation_fixed_point():
    config = DistillConfig(mode="soft", objectness_gate=0.0, temperature_obj=1.5, temperature_cls=2.0)
    obj, rpn_deltas, cls, roi_deltas = _random_outputs(np.random.default_rng(2))
    inputs = [obj, rpn_deltas, cls, roi_deltas]
    for t in inputs:
        t.requires_grad_(True)
    targets = DistillTargets(
        sharpen_objectness(obj.detach(), 1.5),
        rpn_deltas.detach().clone(),
        sharpen_classes(cls.detach(), 2.0),
        roi_deltas.detach().clone(),
    )
    student, plan = _student(*inputs)
    losses = soft_distill_losses(student, plan, targets, config)
    assert float(losses["loss_distill_rpn"]) == 0.0
    assert float(losses["loss_distill_roih"]) == 0.0
    losses["loss_distill"].backward()
    for t in inputs:
        assert float(t.grad.abs().max()) < 1e-12


def test_soft_losses_bounded_by_teacher_entropy():
    rng = np.random.default_rng(3)
    config = DistillConfig(mode="soft")
    for _ in range(50):
        obj, rpn_deltas, cls, roi_deltas = _random_outputs(rng)
        t_obj, _, t_cls, _ = _random_outputs(rng)
        p = sharpen_objectness(t_obj)
        q = sharpen_classes(t_cls)
        targets = DistillTargets(p, rpn_deltas * 0.5, q, roi_deltas * 2)
        student, plan = _student(obj, rpn_deltas, cls, roi_deltas)
        losses = soft_distill_losses(student, plan, targets, config)
        binary_entropy = -(p * torch.log(p) + (1 - p) * torch.log(1 - p)).mean()
        entropy = -(q * torch.log(q)).sum(dim=1).mean()
        assert float(losses["loss_distill_obj"]) >= float(binary_entropy) - 1e-8
        assert float(losses["loss_distill_cls"]) >= float(entropy) - 1e-8
        assert float(losses["loss_distill_rpn"]) >= 0.0
        assert float(losses["loss_distill_roih"]) >= 0.0
        l0, l1, l2, l3 = config.lambdas
        total = (
            l0 * losses["loss_distill_rpn"]
            + l1 * losses["loss_distill_obj"]
            + l2 * losses["loss_distill_roih"]
            + l3 * losses["loss_distill_cls"]
        )
        assert float_equal(float(losses["loss_distill"]), float(total))


def test_soft_loss_shape_checks():
    rng = np.random.default_rng(4)
    obj, rpn_deltas, cls, roi_deltas = _random_outputs(rng)
    student, plan = _student(obj, rpn_deltas, cls, roi_deltas)
    short = DistillTargets(sharpen_objectness(obj[:3]), rpn_deltas[:3], sharpen_classes(cls), roi_deltas)
    with pytest.raises(DistillationError):
        soft_distill_losses(student, plan, short, DistillConfig())
    fewer = DistillTargets(sharpen_objectness(obj), rpn_deltas, sharpen_classes(cls[:2]), roi_deltas[:2])
    with pytest.raises(DistillationError):
        soft_distill_losses(student, plan, fewer, DistillConfig())


def test_build_soft_targets(pair):
    config = tiny_detector_config()
    distill = DistillConfig(mode="soft", temperature_cls=2.0)
    student, teacher = init_params(config, 0), init_params(config, 1)
    record = pair.target_train[0]
    outputs, plan = training_forward(student, record, [], config, 0)
    targets = build_soft_targets(teacher, record, plan, distill, config)
    assert targets.rpn_objectness.shape[0] == len(plan.rpn_match.sampled_indices)
    assert targets.roi_class_dist.shape == outputs.roi.class_logits.shape
    assert float(targets.rpn_objectness.min()) >= 0.0 and float(targets.rpn_objectness.max()) <= 1.0
    assert torch.allclose(targets.roi_class_dist.sum(dim=1), torch.ones(targets.roi_class_dist.shape[0]).double())
    assert not targets.roi_deltas.requires_grad
    with pytest.raises(DistillationError):
        build_soft_targets(teacher, make_record(size=40), plan, distill, config)


def test_hard_distill_matches_supervised(pair):
    """ Randomized teachers and thresholds: the hard path is the supervised
    loss with pseudo-labels in place of ground truth.
    """
    config = tiny_detector_config()
    records = list(pair.target_train) + list(pair.source_train)
    rng = np.random.default_rng(5)
    for case in range(100):
        record = records[case % len(records)]
        student = init_params(config, case)
        preds = [
            Prediction(box, int(rng.integers(0, 2)), float(rng.uniform()))
            for box in random_boxes(rng, int(rng.integers(0, 6)), min_side=4.0)
        ]
        labels = hard_pseudo_labels(preds, float(rng.uniform(0, 1)), 0.5)
        outputs, plan = training_forward(student, record, labels, config, case)
        hard = hard_distill_losses(outputs, plan, config)
        supervised = supervised_losses(outputs, plan, config)
        for name, value in supervised.items():
            assert float(hard["loss_distill_" + name[len("loss_"):]]) == float(value)
        assert float(hard["loss_distill"]) == float(sum(supervised.values()))
        if not labels:
            assert float(hard["loss_distill_rpn_reg"]) == 0.0
            assert float(hard["loss_distill_roi_reg"]) == 0.0

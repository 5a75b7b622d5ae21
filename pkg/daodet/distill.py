""":mod:`daodet.distill`
========================

Teacher-side machinery for self-training: the exponential moving average
update, sharpening, hard pseudo-labels, and the two distillation paths.

* hard: the teacher's thresholded, suppressed detections replace ground truth
  in the standard detector losses;
* soft: the student matches the teacher's sharpened RPN and ROI outputs
  directly, on the same sampled anchors and proposals.

Teacher outputs are always computed under :func:`torch.no_grad` and enter the
losses as constants.

"""
import dataclasses
import logging
from typing import Tuple

import torch
import torch.nn.functional as F

from daodet.config import ConfigError
from daodet.datamodel import Annotation
from daodet.detector import (
    backbone,
    batched_nms,
    image_tensor,
    infer,
    roi_head,
    rpn_head,
    smooth_l1,
    supervised_losses,
)

__all__ = [
    "DistillationError",
    "EmaConfig",
    "DistillConfig",
    "DistillTargets",
    "DISTILL_MODES",
    "ema_update",
    "hard_pseudo_labels",
    "teacher_pseudo_labels",
    "sharpen_objectness",
    "sharpen_classes",
    "build_soft_targets",
    "soft_distill_losses",
    "hard_distill_losses",
]

logger = logging.getLogger(__name__)

DISTILL_MODES = ("none", "hard", "soft")


class DistillationError(ValueError):
    """ Student and teacher paths do not line up. """


@dataclasses.dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.999
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("should be in [0, 1], got %r" % self.alpha, "alpha")


@dataclasses.dataclass(frozen=True)
class DistillConfig:
    """ Distillation settings.

    :attr lambdas: weights of the soft RPN regression, objectness, ROI
        regression and classification terms, in that order.
    """

    mode: str = "hard"
    confidence_threshold: float = 0.8
    nms_iou: float = 0.5
    objectness_gate: float = 0.8
    temperature_obj: float = 1.0
    temperature_cls: float = 1.0
    lambdas: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.mode not in DISTILL_MODES:
            raise ConfigError("should be one of %s, got %r" % (", ".join(DISTILL_MODES), self.mode), "mode")
        for name in ("confidence_threshold", "nms_iou", "objectness_gate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("should be in [0, 1]", name)
        for name in ("temperature_obj", "temperature_cls"):
            if getattr(self, name) <= 0:
                raise ConfigError("should be positive", name)
        if len(self.lambdas) != 4 or min(self.lambdas) < 0:
            raise ConfigError("should be 4 non-negative weights", "lambdas")


@dataclasses.dataclass(frozen=True, eq=False)
class DistillTargets:
    """ Teacher outputs on the student's sampled anchors and proposals. """

    rpn_objectness: torch.Tensor
    rpn_deltas: torch.Tensor
    roi_class_dist: torch.Tensor
    roi_deltas: torch.Tensor


def ema_update(teacher, student, alpha):
    """ ``alpha * teacher + (1 - alpha) * student``, as a new collection.

    >>> from daodet.detector import ParameterSet
    >>> t = ParameterSet({"w": torch.tensor([1.0])})
    >>> s = ParameterSet({"w": torch.tensor([0.0])})
    >>> float(ema_update(t, s, 0.9)["w"])
    0.9

    :raises ShapeMismatchError: naming the first mismatched array.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha should be in [0, 1], got %r" % alpha)
    return teacher.combine(student, alpha, 1.0 - alpha)


def hard_pseudo_labels(teacher_preds, threshold, nms_iou):
    """ Per-class NMS, then keep predictions scoring at least ``threshold``.

    :returns: list of :class:`Annotation` (scores dropped).
    """
    preds = list(teacher_preds)
    if not preds:
        return []
    keep = batched_nms(
        [p.box for p in preds], [p.score for p in preds], [p.class_id for p in preds], nms_iou
    )
    return [Annotation(preds[i].box, preds[i].class_id) for i in keep if preds[i].score >= threshold]


def teacher_pseudo_labels(params, image, detector_config, config):
    """ Run the teacher on ``image`` and turn its detections into hard labels. """
    preds = infer(params, image, detector_config)
    return hard_pseudo_labels(preds, config.confidence_threshold, config.nms_iou)


def sharpen_objectness(logits, temperature=1.0):
    return torch.sigmoid(logits / temperature)


def sharpen_classes(logits, temperature=1.0):
    """ Temperature softmax over the last axis.

    >>> sharpen_classes(torch.tensor([2.0, 0.0]), 2.0)
    tensor([0.7311, 0.2689])
    """
    return F.softmax(logits / temperature, dim=-1)


def build_soft_targets(teacher_params, weak_view, plan, config, detector_config):
    """ Run the teacher on the weak view at the student's sampled anchors and
    sampled proposals.

    :param plan: the student's :class:`~daodet.detector.SamplingPlan`.
    :raises DistillationError: if the teacher path does not produce the same
        anchors as the student's (e.g. the views differ in size).
    """
    with torch.no_grad():
        x = image_tensor(weak_view, detector_config)
        if tuple(x.shape[2:]) != tuple(plan.image_size):
            raise DistillationError(
                "teacher view is %s, the student view is %s"
                % (tuple(x.shape[2:]), tuple(plan.image_size))
            )
        features = backbone(teacher_params, x, detector_config)
        rpn = rpn_head(teacher_params, features, detector_config)
        if rpn.objectness_logits.shape[0] != plan.anchors.shape[0]:
            raise DistillationError(
                "teacher produced %d anchors, the student %d"
                % (rpn.objectness_logits.shape[0], plan.anchors.shape[0])
            )
        idx = torch.as_tensor(plan.rpn_match.sampled_indices, dtype=torch.long)
        roi = roi_head(
            teacher_params, features, plan.sampled_proposals.to(detector_config.torch_dtype), detector_config
        )
        return DistillTargets(
            sharpen_objectness(rpn.objectness_logits[idx], config.temperature_obj),
            rpn.box_deltas[idx],
            sharpen_classes(roi.class_logits, config.temperature_cls),
            roi.box_deltas,
        )


def _gated_smooth_l1(pred, target, gate, beta):
    count = int(gate.sum())
    if not count:
        return pred.sum() * 0.0
    return smooth_l1(pred[gate] - target[gate], beta).sum() / count


def soft_distill_losses(student, plan, targets, config, smooth_l1_beta=1.0):
    """ Soft distillation losses of the student against teacher targets.

    - ``loss_distill_obj``: binary cross-entropy of the student's
      objectness against the teacher's probabilities, mean over anchors;
    - ``loss_distill_rpn``: smooth-L1 between RPN deltas where the teacher's
      objectness reaches ``objectness_gate``;
    - ``loss_distill_cls``: cross-entropy of the student's class distribution
      against the teacher's, mean over proposals;
    - ``loss_distill_roih``: smooth-L1 between ROI deltas where the teacher's
      top class is not background;
    - ``loss_distill``: the ``lambdas``-weighted sum of the four.

    The temperatures divide the student's logits too, so identical outputs
    are a stationary point.
    """
    idx = torch.as_tensor(plan.rpn_match.sampled_indices, dtype=torch.long)
    s_obj = student.rpn.objectness_logits[idx]
    s_rpn = student.rpn.box_deltas[idx]
    s_cls = student.roi.class_logits
    if s_obj.shape[0] != targets.rpn_objectness.shape[0]:
        raise DistillationError(
            "student has %d sampled anchors, the targets %d"
            % (s_obj.shape[0], targets.rpn_objectness.shape[0])
        )
    if s_cls.shape != targets.roi_class_dist.shape:
        raise DistillationError(
            "student has %d proposals, the targets %d" % (s_cls.shape[0], targets.roi_class_dist.shape[0])
        )
    loss_obj = F.binary_cross_entropy_with_logits(s_obj / config.temperature_obj, targets.rpn_objectness)
    loss_rpn = _gated_smooth_l1(
        s_rpn, targets.rpn_deltas, targets.rpn_objectness >= config.objectness_gate, smooth_l1_beta
    )
    log_probs = F.log_softmax(s_cls / config.temperature_cls, dim=1)
    loss_cls = -(targets.roi_class_dist * log_probs).sum(dim=1).mean()
    background = s_cls.shape[1] - 1
    loss_roih = _gated_smooth_l1(
        student.roi.box_deltas,
        targets.roi_deltas,
        targets.roi_class_dist.argmax(dim=1) != background,
        smooth_l1_beta,
    )
    l0, l1, l2, l3 = config.lambdas
    return {
        "loss_distill_rpn": loss_rpn,
        "loss_distill_obj": loss_obj,
        "loss_distill_roih": loss_roih,
        "loss_distill_cls": loss_cls,
        "loss_distill": l0 * loss_rpn + l1 * loss_obj + l2 * loss_roih + l3 * loss_cls,
    }


def hard_distill_losses(student, plan, detector_config):
    """ :func:`~daodet.detector.supervised_losses` on a plan matched against
    pseudo-labels, with ``loss_`` renamed ``loss_distill_`` and their sum as
    ``loss_distill``.
    """
    losses = supervised_losses(student, plan, detector_config)
    bundle = {"loss_distill_" + name[len("loss_"):]: value for name, value in losses.items()}
    bundle["loss_distill"] = sum(losses.values())
    return bundle

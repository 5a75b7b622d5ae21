import numpy as np

from daodet.datamodel import Annotation, BoundingBox, Domain, ImageRecord, SyntheticConfig, make_synthetic_shift
from daodet.detector import DetectorConfig

EPSILON = 0.0001


def float_equal(a, b, epsilon=EPSILON):
    return (a != a and b != b) or abs(a - b) < epsilon


def tiny_detector_config(**changes):
    """ Detector small enough for gradient checks: 2 stages (stride 4),
    2 anchors per cell.
    """
    params = dict(
        backbone_channels=(4, 8),
        feature_stride=4,
        anchor_sizes=(8.0, 16.0),
        anchor_aspect_ratios=(1.0,),
        num_classes=2,
        rpn_samples=32,
        pre_nms_proposals=64,
        train_proposals=16,
        test_proposals=16,
        roi_samples=16,
        roi_pool_size=2,
        roi_hidden=8,
        detections_per_image=20,
    )
    params.update(changes)
    return DetectorConfig(**params)


def tiny_synthetic_config(**changes):
    params = dict(
        image_size=32,
        source_train=8,
        target_train=8,
        target_test=6,
        target_train_labeled=8,
        min_object_size=8,
        max_object_size=14,
    )
    params.update(changes)
    return SyntheticConfig(**params)


def tiny_pair(seed=0, **changes):
    return make_synthetic_shift(tiny_synthetic_config(**changes), seed)


def tiny_train_overrides(**changes):
    """ Nested overrides making any preset run in a few seconds. """
    overrides = {
        "batch_size": 4,
        "iterations": 3,
        "eval_every": 2,
        "max_eval_images": 4,
        "detector": {
            "backbone_channels": [4, 8],
            "feature_stride": 4,
            "anchor_sizes": [8.0, 16.0],
            "anchor_aspect_ratios": [1.0],
            "rpn_samples": 32,
            "pre_nms_proposals": 64,
            "train_proposals": 16,
            "test_proposals": 16,
            "roi_samples": 16,
            "roi_pool_size": 2,
            "roi_hidden": 8,
            "detections_per_image": 20,
        },
        "align": {"image_hidden": 4, "instance_hidden": 4},
        "burn_in": {"iterations": 2, "max_iterations": 4, "eval_every": 2, "patience": 1, "val_fraction": 0.25},
    }
    overrides.update(changes)
    return overrides


def make_record(image_id="img", size=32, boxes=(), classes=None, domain=Domain.SOURCE, value=0.5, labeled=True):
    pixels = np.full((size, size, 3), value)
    if classes is None:
        classes = [0] * len(boxes)
    annotations = [Annotation(BoundingBox(*b), c) for b, c in zip(boxes, classes)] if labeled else None
    return ImageRecord(image_id, pixels, domain, annotations)


def random_boxes(rng, n, size=32.0, min_side=1.0):
    """ ``n`` random boxes inside ``size x size`` as ``(x1, y1, x2, y2)`` tuples. """
    boxes = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, size - min_side, 2)
        w = rng.uniform(min_side, size - x1)
        h = rng.uniform(min_side, size - y1)
        boxes.append((float(x1), float(y1), float(x1 + w), float(y1 + h)))
    return boxes


def box_iou(a, b):
    """ IoU of two ``(x1, y1, x2, y2)`` tuples, written out by hand. """
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def brute_force_nms(boxes, scores, threshold):
    """ Quadratic reference: repeatedly take the best remaining box and drop
    everything overlapping it above ``threshold``.
    """
    remaining = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [i for i in remaining if box_iou(boxes[best], boxes[i]) <= threshold]
    return keep


def brute_force_ap50(predictions, ground_truth, num_classes):
    """ Reference AP50: enumerate the ranked predictions, build every
    precision/recall point and integrate the upper envelope.

    :param predictions: ``{image_id: [(box, class_id, score), ...]}``
    :param ground_truth: ``{image_id: [(box, class_id), ...]}``
    """
    aps = []
    for k in range(num_classes):
        gts = {i: [g[0] for g in ground_truth[i] if g[1] == k] for i in ground_truth}
        n_gt = sum(len(v) for v in gts.values())
        if not n_gt:
            continue
        ranked = sorted(
            [(p[2], i, j, p[0]) for i in predictions for j, p in enumerate(predictions[i]) if p[1] == k],
            key=lambda t: -t[0],
        )
        used = {i: [False] * len(gts[i]) for i in gts}
        flags = []
        for _, image_id, _, box in ranked:
            best, best_iou = None, 0.5
            for g, gt_box in enumerate(gts[image_id]):
                if used[image_id][g]:
                    continue
                overlap = box_iou(box, gt_box)
                if overlap >= best_iou and (best is None or overlap > best_iou):
                    best, best_iou = g, overlap
            if best is None:
                flags.append(0)
            else:
                used[image_id][best] = True
                flags.append(1)
        recalls, precisions = [0.0], [1.0]
        tp = 0
        for n, flag in enumerate(flags, 1):
            tp += flag
            recalls.append(tp / n_gt)
            precisions.append(tp / n)
        area = 0.0
        for n in range(1, len(recalls)):
            envelope = max(precisions[n:])
            area += (recalls[n] - recalls[n - 1]) * envelope
        aps.append(area)
    return sum(aps) / len(aps) if aps else 0.0

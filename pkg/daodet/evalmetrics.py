""":mod:`daodet.evalmetrics`
============================

Evaluation: AP50, convergence time, Fréchet feature dissimilarity and PCA
embeddings of pooled backbone features.

"""
import csv
import dataclasses
import json
import logging
import struct
from collections.abc import Mapping
from typing import Dict, Tuple

import numpy as np
import torch
from scipy import linalg
from sklearn.decomposition import PCA
from torchvision.ops import roi_align

from daodet.datamodel import Domain, iou
from daodet.detector import backbone, image_tensor, infer

__all__ = [
    "EvaluationError",
    "EvalResult",
    "FeatureSample",
    "PcaEmbedding",
    "POOLINGS",
    "ap50",
    "convergence_time",
    "frechet_dissimilarity",
    "pca_embed",
    "extract_features",
    "save_features",
    "load_features",
    "write_embedding_csv",
]

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5
COVARIANCE_EPSILON = 1e-6
POOLINGS = ("image_level", "instance_level")

FEATURES_MAGIC = b"DAODFEAT"
FEATURES_VERSION = 1
FEATURES_PACKER = struct.Struct("<8sHIIBB")


class EvaluationError(ValueError):
    """ Inconsistent evaluation inputs. """


@dataclasses.dataclass(frozen=True)
class EvalResult:
    """ AP50 over the classes present in the ground truth.

    :attr per_class_ap: class index -> AP, only for classes with at least one
        ground-truth box.
    :attr matched_counts: ``tp``, ``fp`` and ``gt`` totals over all classes.
    """

    ap50: float
    per_class_ap: Dict[int, float]
    matched_counts: Dict[str, int]

    def to_json(self):
        return json.dumps(
            {
                "ap50": self.ap50,
                "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
                "matched_counts": self.matched_counts,
            },
            sort_keys=True,
        )

    def write_csv(self, path, class_names=None):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "ap50"])
            for k, value in sorted(self.per_class_ap.items()):
                writer.writerow([class_names[k] if class_names else k, repr(value)])
            writer.writerow(["mean", repr(self.ap50)])


def _as_pairs(items, what):
    pairs = list(items.items()) if isinstance(items, Mapping) else list(items)
    seen = set()
    for image_id, _ in pairs:
        if image_id in seen:
            raise EvaluationError("duplicate image id %s in %s" % (image_id, what))
        seen.add(image_id)
    return pairs


def _average_precision(tp, n_gt):
    """ All-point interpolated AP of a ranked TP/FP sequence. """
    tp = np.asarray(tp, dtype=np.float64)
    if not len(tp):
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap50(predictions, ground_truth, num_classes):
    """ PascalVOC-style mean AP at IoU 0.5.

    Per class, predictions are visited by descending score (ties keep input
    order) and each is matched to the unmatched ground-truth box of its image
    with the highest IoU (ties: lower index) if that IoU is at least 0.5.
    AP is the area under the precision envelope (all-point interpolation).

    :param predictions: ``(image_id, [Prediction])`` pairs or a mapping.
    :param ground_truth: ``(image_id, [Annotation])`` pairs or a mapping.
    :raises EvaluationError: for duplicate ids, or predictions on an image
        without ground truth.
    """
    preds = _as_pairs(predictions, "predictions")
    gts = dict(_as_pairs(ground_truth, "ground truth"))
    for image_id, _ in preds:
        if image_id not in gts:
            raise EvaluationError("predictions for image %s which has no ground truth" % image_id)

    per_class, tp_total, fp_total, gt_total = {}, 0, 0, 0
    for k in range(num_classes):
        gt_boxes = {
            image_id: [a.box for a in anns if a.class_id == k] for image_id, anns in gts.items()
        }
        n_gt = sum(len(boxes) for boxes in gt_boxes.values())
        detections = [
            (p.score, image_id, p.box)
            for image_id, plist in preds
            for p in plist
            if p.class_id == k
        ]
        order = sorted(range(len(detections)), key=lambda i: -detections[i][0])
        matched = {image_id: [False] * len(boxes) for image_id, boxes in gt_boxes.items()}
        flags = []
        for i in order:
            _, image_id, box = detections[i]
            best, best_iou = -1, IOU_THRESHOLD
            for j, gt_box in enumerate(gt_boxes[image_id]):
                if matched[image_id][j]:
                    continue
                overlap = iou(box, gt_box)
                if overlap > best_iou or (best < 0 and overlap >= best_iou):
                    best, best_iou = j, overlap
            if best >= 0:
                matched[image_id][best] = True
            flags.append(1.0 if best >= 0 else 0.0)
        tp = int(sum(flags))
        tp_total += tp
        fp_total += len(flags) - tp
        gt_total += n_gt
        if n_gt:
            per_class[k] = _average_precision(flags, n_gt)
    if not per_class:
        logger.warning("no ground-truth boxes: AP50 is reported as 0")
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult(mean, per_class, {"tp": tp_total, "fp": fp_total, "gt": gt_total})


def convergence_time(metric_curve):
    """ First step whose value reaches 95% of the final (last) value.

    >>> convergence_time([(1, 10), (2, 40), (3, 60), (4, 63), (5, 64)])
    4
    """
    curve = list(metric_curve)
    if not curve:
        raise EvaluationError("cannot compute convergence time of an empty curve")
    threshold = 0.95 * curve[-1][1]
    for step, value in curve:
        if value >= threshold:
            return step
    return curve[-1][0]


@dataclasses.dataclass(frozen=True, eq=False)
class FeatureSample:
    """ ``N x D`` pooled feature vectors from one domain. """

    vectors: np.ndarray
    pooling: str = "image_level"
    domain: Domain = Domain.SOURCE

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim == 1:
            vectors = vectors[:, None]
        if vectors.ndim != 2:
            raise EvaluationError("feature vectors should be N x D, got shape %s" % (vectors.shape,))
        if self.pooling not in POOLINGS:
            raise EvaluationError("pooling should be one of %s, got %r" % (POOLINGS, self.pooling))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "domain", Domain(self.domain))

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dims(self):
        return self.vectors.shape[1]


def _vectors(sample):
    return sample.vectors if isinstance(sample, FeatureSample) else FeatureSample(sample).vectors


def _covariance(x):
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return cov + COVARIANCE_EPSILON * np.eye(cov.shape[0])


def _trace_sqrt_product(s1, s2):
    w, v = linalg.eigh(s1)
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    m = root @ s2 @ root
    eigenvalues = linalg.eigh((m + m.T) / 2.0, eigvals_only=True)
    return float(np.sum(np.sqrt(np.clip(eigenvalues, 0.0, None))))


def _frechet_squared(mu_a, cov_a, mu_b, cov_b):
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * _trace_sqrt_product(cov_a, cov_b))


def frechet_dissimilarity(a, b):
    """ Fréchet distance between Gaussians fitted to two feature samples.

    Covariances get ``1e-6 * I`` added; the matrix square root goes through
    an eigendecomposition with negative eigenvalues clipped. Both argument
    orders are averaged, so the result is exactly symmetric.

    :raises EvaluationError: on dimension mismatch or fewer than 2 vectors.
    """
    xa, xb = _vectors(a), _vectors(b)
    if xa.shape[1] != xb.shape[1]:
        raise EvaluationError("feature dimensions differ: %d vs %d" % (xa.shape[1], xb.shape[1]))
    if xa.shape[0] < 2 or xb.shape[0] < 2:
        raise EvaluationError("need at least 2 vectors per sample")
    mu_a, mu_b = xa.mean(axis=0), xb.mean(axis=0)
    cov_a, cov_b = _covariance(xa), _covariance(xb)
    d2 = 0.5 * (_frechet_squared(mu_a, cov_a, mu_b, cov_b) + _frechet_squared(mu_b, cov_b, mu_a, cov_a))
    return float(np.sqrt(max(d2, 0.0)))


@dataclasses.dataclass(frozen=True, eq=False)
class PcaEmbedding:
    """ :attr segments: ``(start, stop)`` rows of each input sample. """

    coordinates: np.ndarray
    explained_variance_ratio: float
    components: np.ndarray
    segments: Tuple[Tuple[int, int], ...]

    def coordinates_of(self, index):
        start, stop = self.segments[index]
        return self.coordinates[start:stop]


def pca_embed(samples, dims=2):
    """ Project the concatenated samples on their first ``dims`` principal
    components. The sign of each component is fixed by making its largest
    magnitude loading positive.

    :raises EvaluationError: if the data has rank below ``dims``.
    """
    blocks = [_vectors(s) for s in samples]
    data = np.concatenate(blocks, axis=0)
    if data.shape[0] <= dims:
        raise EvaluationError("need more than %d vectors, got %d" % (dims, data.shape[0]))
    centered = data - data.mean(axis=0)
    rank = np.linalg.matrix_rank(centered)
    if rank < dims:
        raise EvaluationError("data has rank %d, below the %d requested dimensions" % (rank, dims))
    pca = PCA(n_components=dims, svd_solver="full").fit(data)
    components = pca.components_.copy()
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(dims), pivots])
    components *= signs[:, None]
    coordinates = centered @ components.T
    bounds, start = [], 0
    for block in blocks:
        bounds.append((start, start + block.shape[0]))
        start += block.shape[0]
    ratio = float(np.clip(np.sum(pca.explained_variance_ratio_), 0.0, 1.0))
    return PcaEmbedding(coordinates, ratio, components, tuple(bounds))


def write_embedding_csv(embedding, labels, path):
    """ One row per point: the label of its sample then its coordinates. """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        dims = embedding.coordinates.shape[1]
        writer.writerow(["sample"] + ["pc%d" % (i + 1) for i in range(dims)])
        for label, (start, stop) in zip(labels, embedding.segments):
            for row in embedding.coordinates[start:stop]:
                writer.writerow([label] + [repr(float(v)) for v in row])


def extract_features(params, records, config, pooling="image_level", max_images=None, min_score=0.5):
    """ Pool the final backbone feature map, globally per image
    (``image_level``) or inside every object box (``instance_level``).

    Instance boxes are the annotations of labeled records, otherwise the
    model's own detections scoring at least ``min_score``.
    """
    if pooling not in POOLINGS:
        raise EvaluationError("pooling should be one of %s, got %r" % (POOLINGS, pooling))
    records = list(records)[:max_images] if max_images else list(records)
    vectors = []
    domain = records[0].domain if records else Domain.SOURCE
    with torch.no_grad():
        for record in records:
            features = backbone(params, image_tensor(record, config), config)
            if pooling == "image_level":
                vectors.append(features.mean(dim=(2, 3))[0].double().numpy())
                continue
            if record.annotations is not None:
                boxes = [a.box.as_tuple() for a in record.annotations]
            else:
                boxes = [p.box.as_tuple() for p in infer(params, record, config) if p.score >= min_score]
            if not boxes:
                continue
            rois = torch.tensor([(0.0,) + b for b in boxes], dtype=features.dtype)
            pooled = roi_align(
                features, rois, output_size=1, spatial_scale=1.0 / config.feature_stride, sampling_ratio=2, aligned=True
            )
            vectors.extend(pooled.flatten(1).double().numpy())
    dims = config.feature_channels
    array = np.asarray(vectors, dtype=np.float64).reshape(-1, dims)
    return FeatureSample(array, pooling, domain)


def save_features(sample, path):
    """ Binary layout: header (magic, version, N, D, pooling, domain) then
    ``N x D`` little-endian float64 values.
    """
    n, d = sample.vectors.shape
    header = FEATURES_PACKER.pack(
        FEATURES_MAGIC,
        FEATURES_VERSION,
        n,
        d,
        POOLINGS.index(sample.pooling),
        0 if sample.domain is Domain.SOURCE else 1,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(sample.vectors.astype("<f8").tobytes())


def load_features(path):
    with open(path, "rb") as f:
        header = f.read(FEATURES_PACKER.size)
        if len(header) != FEATURES_PACKER.size:
            raise EvaluationError("%s is truncated" % path)
        magic, version, n, d, pooling, domain = FEATURES_PACKER.unpack(header)
        if magic != FEATURES_MAGIC or version != FEATURES_VERSION:
            raise EvaluationError("%s is not a version %d feature file" % (path, FEATURES_VERSION))
        raw = f.read()
    if len(raw) != n * d * 8:
        raise EvaluationError("%s: expected %d values, got %d bytes" % (path, n * d, len(raw)))
    vectors = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(n, d)
    return FeatureSample(vectors, POOLINGS[pooling], Domain.SOURCE if domain == 0 else Domain.TARGET)

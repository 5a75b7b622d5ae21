""":mod:`daodet.detector`
=========================

A miniature two-stage detector written as pure functions of an ordered
parameter collection: strided convolutional backbone, region proposal network
over anchors, and ROI heads over ``roi_align`` pooled proposals.

Nothing here keeps state between calls. Training code builds a
:class:`SamplingPlan` (anchors, matched and sampled anchors, proposals,
matched and sampled proposals) from detached outputs, and losses are then a
differentiable function of the parameters alone, see :func:`run_plan`.

"""
import collections
import collections.abc
import dataclasses
import functools
import logging
import math
import struct
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import box_iou, roi_align

from daodet.config import ConfigError
from daodet.datamodel import BoundingBox, GeometryError, ImageRecord, Prediction

__all__ = [
    "NumericError",
    "ShapeMismatchError",
    "CheckpointError",
    "DetectorConfig",
    "ParameterSet",
    "DetectorParams",
    "AnchorGrid",
    "RpnOutputs",
    "RoiOutputs",
    "ForwardResult",
    "MatchResult",
    "SamplingPlan",
    "generate_anchors",
    "encode",
    "decode",
    "encode_deltas",
    "decode_deltas",
    "smooth_l1",
    "match_and_sample",
    "param_shapes",
    "init_params",
    "save_params",
    "load_params",
    "image_tensor",
    "backbone",
    "rpn_head",
    "roi_head",
    "select_proposals",
    "training_forward",
    "run_plan",
    "supervised_losses",
    "nms",
    "batched_nms",
    "infer",
]

logger = logging.getLogger(__name__)

# exp() of regression deltas is clamped, as in most two-stage detectors
DELTA_CLAMP = math.log(1000.0 / 16)

PARAMS_MAGIC = b"DAODPARM"
PARAMS_VERSION = 1
HEADER_PACKER = struct.Struct("<8sHI")
ENTRY_PACKER = struct.Struct("<HBB")
DIM_PACKER = struct.Struct("<I")
DTYPE_CODES = {torch.float64: 0, torch.float32: 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class NumericError(ArithmeticError):
    """ Non-finite activations. ``layer`` names where they appeared. """

    def __init__(self, layer):
        self.layer = layer
        super().__init__("non-finite activations in layer %s" % layer)


class ShapeMismatchError(ValueError):
    """ Two parameter collections (or an input and the parameters) disagree. """


class CheckpointError(ValueError):
    """ A parameter file is corrupt, truncated or from another version. """


@dataclasses.dataclass(frozen=True)
class DetectorConfig:
    in_channels: int = 3
    backbone_channels: Tuple[int, ...] = (16, 32, 64)
    feature_stride: int = 8
    anchor_sizes: Tuple[float, ...] = (16.0, 32.0)
    anchor_aspect_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    num_classes: int = 2
    rpn_samples: int = 256
    rpn_fg_fraction: float = 0.5
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    rpn_allow_low_quality: bool = True
    rpn_nms_iou: float = 0.7
    pre_nms_proposals: int = 600
    train_proposals: int = 300
    test_proposals: int = 100
    roi_samples: int = 512
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_bg_iou: float = 0.5
    roi_append_gt: bool = True
    roi_pool_size: int = 4
    roi_hidden: int = 128
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    detections_per_image: int = 100
    smooth_l1_beta: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("should be at least 1", "num_classes")
        if self.in_channels not in (1, 3):
            raise ConfigError("should be 1 or 3", "in_channels")
        if not self.backbone_channels or min(self.backbone_channels) < 1:
            raise ConfigError("needs at least one positive stage", "backbone_channels")
        if self.feature_stride != 2 ** len(self.backbone_channels):
            raise ConfigError(
                "should be 2 ** len(backbone_channels) = %d" % 2 ** len(self.backbone_channels),
                "feature_stride",
            )
        if not self.anchor_sizes or min(self.anchor_sizes) <= 0:
            raise ConfigError("needs at least one positive size", "anchor_sizes")
        if not self.anchor_aspect_ratios or min(self.anchor_aspect_ratios) <= 0:
            raise ConfigError("needs at least one positive ratio", "anchor_aspect_ratios")
        for name in ("rpn_fg_fraction", "roi_fg_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError("should be in (0, 1)", name)
        for name in (
            "rpn_samples",
            "roi_samples",
            "pre_nms_proposals",
            "train_proposals",
            "test_proposals",
            "roi_pool_size",
            "roi_hidden",
            "detections_per_image",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError("should be positive", name)
        for name in ("rpn_fg_iou", "rpn_bg_iou", "roi_fg_iou", "roi_bg_iou", "rpn_nms_iou", "nms_iou"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError("should be in [0, 1]", name)
        if self.rpn_bg_iou > self.rpn_fg_iou or self.roi_bg_iou > self.roi_fg_iou:
            raise ConfigError("background threshold above foreground threshold", "rpn_bg_iou")
        if not 0 <= self.score_threshold <= 1:
            raise ConfigError("should be in [0, 1]", "score_threshold")
        if self.smooth_l1_beta < 0:
            raise ConfigError("should be non-negative", "smooth_l1_beta")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("should be float64 or float32", "dtype")

    @property
    def anchors_per_cell(self):
        return len(self.anchor_sizes) * len(self.anchor_aspect_ratios)

    @property
    def feature_channels(self):
        return self.backbone_channels[-1]

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


class ParameterSet(collections.abc.Mapping):
    """ Named, ordered collection of parameter tensors.

    Used for the detector (:data:`DetectorParams`) and the domain
    discriminators. Arithmetic never modifies an instance in place; every
    operation returns a new collection.
    """

    def __init__(self, tensors):
        self._tensors = collections.OrderedDict(tensors)

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        return "%s(%s)" % (
            type(self).__name__,
            ", ".join("%s=%s" % (n, tuple(t.shape)) for n, t in self._tensors.items()),
        )

    def shapes(self):
        return [(name, tuple(t.shape)) for name, t in self._tensors.items()]

    def check_compatible(self, other):
        """ :raises ShapeMismatchError: naming the first array that differs. """
        mine, theirs = list(self._tensors.items()), list(other.items())
        for (name, a), (other_name, b) in zip(mine, theirs):
            if name != other_name:
                raise ShapeMismatchError("array %s: expected name %s" % (other_name, name))
            if a.shape != b.shape:
                raise ShapeMismatchError(
                    "array %s: shape %s vs %s" % (name, tuple(a.shape), tuple(b.shape))
                )
        if len(mine) != len(theirs):
            longer = mine if len(mine) > len(theirs) else theirs
            raise ShapeMismatchError(
                "array %s: present in only one collection" % longer[min(len(mine), len(theirs))][0]
            )

    def combine(self, other, a, b):
        """ Elementwise ``a * self + b * other`` as a new detached collection. """
        self.check_compatible(other)
        with torch.no_grad():
            return type(self)((n, a * t + b * other[n]) for n, t in self._tensors.items())

    def detach(self):
        return type(self)((n, t.detach().clone()) for n, t in self._tensors.items())

    def trainable(self):
        """ Detached copies marked ``requires_grad``, ready for an optimizer. """
        return type(self)(
            (n, t.detach().clone().requires_grad_(True)) for n, t in self._tensors.items()
        )

    def tensors(self):
        return list(self._tensors.values())

    def equal(self, other):
        if self.shapes() != other.shapes():
            return False
        return all(torch.equal(t, other[n]) for n, t in self._tensors.items())

    def max_abs_diff(self, other):
        self.check_compatible(other)
        return max(
            (float((t - other[n]).abs().max()) for n, t in self._tensors.items() if t.numel()),
            default=0.0,
        )


DetectorParams = ParameterSet


@dataclasses.dataclass(frozen=True, eq=False)
class AnchorGrid:
    """ Anchors laid over the feature map, row-major over cells and
    ``sizes x ratios`` within a cell.
    """

    boxes: torch.Tensor
    feature_h: int
    feature_w: int
    stride: int

    def __len__(self):
        return self.boxes.shape[0]


@dataclasses.dataclass(frozen=True, eq=False)
class RpnOutputs:
    objectness_logits: torch.Tensor
    box_deltas: torch.Tensor


@dataclasses.dataclass(frozen=True, eq=False)
class RoiOutputs:
    """ ``class_logits`` has ``K + 1`` columns, background last. ``features``
    are the hidden activations the heads read from (instance features).
    """

    class_logits: torch.Tensor
    box_deltas: torch.Tensor
    features: torch.Tensor


@dataclasses.dataclass(frozen=True, eq=False)
class ForwardResult:
    features: torch.Tensor
    rpn: RpnOutputs
    roi: RoiOutputs


@dataclasses.dataclass(frozen=True, eq=False)
class MatchResult:
    """ Sampled indices with their labels (1 foreground, 0 background) and the
    matched ground-truth index for each sample (-1 for background).
    """

    sampled_indices: np.ndarray
    labels: np.ndarray
    matched_gt: np.ndarray

    @property
    def foreground(self):
        return self.labels == 1

    @property
    def fg_count(self):
        return int(self.foreground.sum())


@dataclasses.dataclass(frozen=True, eq=False)
class SamplingPlan:
    """ Everything a loss needs besides the parameters. """

    image_size: Tuple[int, int]
    anchors: torch.Tensor
    gt_boxes: torch.Tensor
    gt_classes: torch.Tensor
    rpn_match: MatchResult
    proposals: torch.Tensor
    roi_match: MatchResult

    @property
    def sampled_proposals(self):
        return self.proposals[torch.as_tensor(self.roi_match.sampled_indices, dtype=torch.long)]


@functools.lru_cache(maxsize=64)
def _anchor_boxes(sizes, ratios, stride, feature_h, feature_w):
    cell = []
    for size in sizes:
        for ratio in ratios:
            w = size / math.sqrt(ratio)
            h = size * math.sqrt(ratio)
            cell.append((-w / 2, -h / 2, w / 2, h / 2))
    cell = torch.tensor(cell, dtype=torch.float64)
    ys = (torch.arange(feature_h, dtype=torch.float64) + 0.5) * stride
    xs = (torch.arange(feature_w, dtype=torch.float64) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack((cx, cy, cx, cy), dim=-1).reshape(-1, 1, 4)
    return (centers + cell[None]).reshape(-1, 4)


def feature_size(config, image_h, image_w):
    return math.ceil(image_h / config.feature_stride), math.ceil(image_w / config.feature_stride)


def generate_anchors(config, image_h, image_w):
    """ Anchors centered on feature-map cells at ``((j + .5) s, (i + .5) s)``.
    A ratio ``r`` gives ``w = size / sqrt(r)`` and ``h = size * sqrt(r)``.

    :raises ConfigError: for empty sizes or ratios.
    """
    if not config.anchor_sizes or not config.anchor_aspect_ratios:
        raise ConfigError("anchor sizes and aspect ratios may not be empty", "anchor_sizes")
    fh, fw = feature_size(config, image_h, image_w)
    boxes = _anchor_boxes(
        tuple(config.anchor_sizes), tuple(config.anchor_aspect_ratios), config.feature_stride, fh, fw
    )
    return AnchorGrid(boxes.to(config.torch_dtype), fh, fw, config.feature_stride)


def _centers(boxes):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode(anchors, gts):
    """ Regression targets ``(dcx / w_a, dcy / h_a, log(w_g / w_a),
    log(h_g / h_a))`` for ``N x 4`` anchor and ground-truth tensors.

    :raises GeometryError: for non-positive widths or heights.
    """
    cxa, cya, wa, ha = _centers(anchors)
    cxg, cyg, wg, hg = _centers(gts)
    if bool((wa <= 0).any() | (ha <= 0).any() | (wg <= 0).any() | (hg <= 0).any()):
        raise GeometryError("cannot encode boxes with non-positive width or height")
    return torch.stack(
        ((cxg - cxa) / wa, (cyg - cya) / ha, torch.log(wg / wa), torch.log(hg / ha)),
        dim=1,
    )


def decode(anchors, deltas, image_size=None):
    """ Inverse of :func:`encode`; clips to ``image_size = (h, w)`` if given. """
    cxa, cya, wa, ha = _centers(anchors)
    if bool((wa <= 0).any() | (ha <= 0).any()):
        raise GeometryError("cannot decode on boxes with non-positive width or height")
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(max=DELTA_CLAMP)
    dh = deltas[:, 3].clamp(max=DELTA_CLAMP)
    cx = dx * wa + cxa
    cy = dy * ha + cya
    w = wa * torch.exp(dw)
    h = ha * torch.exp(dh)
    boxes = torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=1)
    if image_size is not None:
        height, width = image_size
        boxes = torch.stack(
            (
                boxes[:, 0].clamp(0, width),
                boxes[:, 1].clamp(0, height),
                boxes[:, 2].clamp(0, width),
                boxes[:, 3].clamp(0, height),
            ),
            dim=1,
        )
    return boxes


def encode_deltas(anchor, gt):
    """ Box-level :func:`encode`.

    >>> encode_deltas(BoundingBox(0, 0, 2, 2), BoundingBox(0, 0, 2, 2))
    (0.0, 0.0, 0.0, 0.0)
    """
    a = torch.tensor([anchor.as_tuple()], dtype=torch.float64)
    g = torch.tensor([gt.as_tuple()], dtype=torch.float64)
    return tuple(float(v) for v in encode(a, g)[0])


def decode_deltas(anchor, deltas, bounds=None):
    """ Box-level :func:`decode`. ``bounds`` is an optional ``(h, w)``. """
    a = torch.tensor([anchor.as_tuple()], dtype=torch.float64)
    d = torch.tensor([tuple(deltas)], dtype=torch.float64)
    return BoundingBox(*(float(v) for v in decode(a, d, bounds)[0]))


def smooth_l1(x, beta):
    """ ``0.5 x^2 / beta`` if ``|x| < beta`` else ``|x| - 0.5 beta``, elementwise. """
    return F.smooth_l1_loss(x, torch.zeros_like(x), reduction="none", beta=beta)


def _box_tensor(boxes, dtype=torch.float64):
    if isinstance(boxes, torch.Tensor):
        return boxes.detach().to(dtype).reshape(-1, 4)
    rows = [b.as_tuple() if isinstance(b, BoundingBox) else tuple(b) for b in boxes]
    return torch.tensor(rows, dtype=dtype).reshape(-1, 4)


def _gt_tensors(gts, dtype):
    """ Ground truth as ``(boxes, classes)`` in a canonical order, so results
    never depend on the order annotations were given in.
    """
    if isinstance(gts, tuple) and len(gts) == 2 and isinstance(gts[0], torch.Tensor):
        return gts[0].to(dtype), gts[1].long()
    annotations = sorted(gts or (), key=lambda a: (a.box.as_tuple(), a.class_id))
    boxes = _box_tensor([a.box for a in annotations], dtype)
    classes = torch.tensor([a.class_id for a in annotations], dtype=torch.long)
    return boxes, classes


def match_and_sample(proposals, gts, stage, config, rng_seed):
    """ Label proposals against ground truth and sample a minibatch.

    A proposal whose best IoU reaches the stage's foreground threshold is
    foreground, below the background threshold it is background, otherwise
    ignored. For the RPN (with ``rpn_allow_low_quality``) the best anchors of
    every ground-truth box are foreground too. At most
    ``floor(samples * fg_fraction)`` foregrounds are drawn, the rest of the
    ``samples`` budget is filled with backgrounds.

    :param gts: annotations, or ``(boxes, classes)`` tensors.
    :param stage: ``"rpn"`` or ``"roi"``.
    """
    if stage == "rpn":
        fg_thr, bg_thr = config.rpn_fg_iou, config.rpn_bg_iou
        count, fraction = config.rpn_samples, config.rpn_fg_fraction
        low_quality = config.rpn_allow_low_quality
    elif stage == "roi":
        fg_thr, bg_thr = config.roi_fg_iou, config.roi_bg_iou
        count, fraction = config.roi_samples, config.roi_fg_fraction
        low_quality = False
    else:
        raise ValueError("stage should be 'rpn' or 'roi', got %r" % (stage,))
    proposals = _box_tensor(proposals)
    gt_boxes, _ = _gt_tensors(gts, torch.float64)
    n = proposals.shape[0]
    assert n > 0, "match_and_sample needs at least one proposal"

    if gt_boxes.shape[0] == 0:
        matched = np.full(n, -1, dtype=np.int64)
        fg = np.zeros(n, dtype=bool)
        bg = np.ones(n, dtype=bool)
    else:
        ious = box_iou(gt_boxes, proposals).numpy()
        matched = np.argmax(ious, axis=0)
        best = ious[matched, np.arange(n)]
        fg = best >= fg_thr
        bg = best < bg_thr
        if low_quality:
            per_gt = ious.max(axis=1, keepdims=True)
            fg |= ((ious == per_gt) & (per_gt > 0)).any(axis=0)
        bg &= ~fg

    rng = np.random.default_rng(rng_seed)
    fg_idx = rng.permutation(np.flatnonzero(fg))[: int(math.floor(count * fraction))]
    bg_idx = rng.permutation(np.flatnonzero(bg))[: count - len(fg_idx)]
    sampled = np.concatenate((fg_idx, bg_idx)).astype(np.int64)
    labels = np.concatenate((np.ones(len(fg_idx)), np.zeros(len(bg_idx)))).astype(np.int64)
    matched_gt = np.where(labels == 1, matched[sampled], -1).astype(np.int64)
    return MatchResult(sampled, labels, matched_gt)


def param_shapes(config):
    """ Ordered ``(name, shape)`` pairs of every detector parameter. """
    shapes = []
    c_in = config.in_channels
    for i, c_out in enumerate(config.backbone_channels):
        shapes.append(("backbone.conv%d.weight" % i, (c_out, c_in, 3, 3)))
        shapes.append(("backbone.conv%d.bias" % i, (c_out,)))
        c_in = c_out
    c, a = config.feature_channels, config.anchors_per_cell
    pooled = c * config.roi_pool_size ** 2
    shapes += [
        ("rpn.conv.weight", (c, c, 3, 3)),
        ("rpn.conv.bias", (c,)),
        ("rpn.objectness.weight", (a, c, 1, 1)),
        ("rpn.objectness.bias", (a,)),
        ("rpn.deltas.weight", (4 * a, c, 1, 1)),
        ("rpn.deltas.bias", (4 * a,)),
        ("roi.fc.weight", (config.roi_hidden, pooled)),
        ("roi.fc.bias", (config.roi_hidden,)),
        ("roi.cls.weight", (config.num_classes + 1, config.roi_hidden)),
        ("roi.cls.bias", (config.num_classes + 1,)),
        ("roi.deltas.weight", (4, config.roi_hidden)),
        ("roi.deltas.bias", (4,)),
    ]
    return shapes


# output layers start small so early proposals stay close to the anchors
_HEAD_GAIN = {"rpn.objectness": 0.1, "rpn.deltas": 0.01, "roi.cls": 0.1, "roi.deltas": 0.01}


def init_params(config, seed):
    """ Seeded uniform fan-in initialization; biases start at zero. """
    generator = torch.Generator().manual_seed(int(seed))
    tensors = []
    for name, shape in param_shapes(config):
        if name.endswith(".bias"):
            tensors.append((name, torch.zeros(shape, dtype=config.torch_dtype)))
            continue
        fan_in = int(np.prod(shape[1:]))
        layer = name.rsplit(".", 1)[0]
        bound = _HEAD_GAIN[layer] * math.sqrt(3.0 / fan_in) if layer in _HEAD_GAIN else math.sqrt(6.0 / fan_in)
        weight = (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        tensors.append((name, weight.to(config.torch_dtype)))
    return ParameterSet(tensors)


def save_params(params, path):
    """ Write parameters in the versioned binary format (bit-exact). """
    with open(path, "wb") as f:
        f.write(HEADER_PACKER.pack(PARAMS_MAGIC, PARAMS_VERSION, len(params)))
        for name, tensor in params.items():
            tensor = tensor.detach().contiguous()
            if tensor.dtype not in DTYPE_CODES:
                raise CheckpointError("array %s: unsupported dtype %s" % (name, tensor.dtype))
            encoded = name.encode("utf-8")
            f.write(ENTRY_PACKER.pack(len(encoded), DTYPE_CODES[tensor.dtype], tensor.dim()))
            f.write(encoded)
            for dim in tensor.shape:
                f.write(DIM_PACKER.pack(dim))
            array = tensor.numpy()
            f.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def _read(f, size, path):
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError("%s is truncated" % path)
    return data


def load_params(path, expected=None):
    """ Read a parameter file written by :func:`save_params`.

    :param expected: optional collection the result must match in names and
        shapes (e.g. freshly initialized parameters for a config).
    :raises CheckpointError: on a bad header or truncated file.
    :raises ShapeMismatchError: if ``expected`` is given and differs.
    """
    with open(path, "rb") as f:
        magic, version, count = HEADER_PACKER.unpack(_read(f, HEADER_PACKER.size, path))
        if magic != PARAMS_MAGIC:
            raise CheckpointError("%s is not a parameter file" % path)
        if version != PARAMS_VERSION:
            raise CheckpointError("%s has format version %d, expected %d" % (path, version, PARAMS_VERSION))
        tensors = []
        for _ in range(count):
            name_len, code, ndim = ENTRY_PACKER.unpack(_read(f, ENTRY_PACKER.size, path))
            name = _read(f, name_len, path).decode("utf-8")
            shape = tuple(DIM_PACKER.unpack(_read(f, DIM_PACKER.size, path))[0] for _ in range(ndim))
            if code not in CODE_DTYPES:
                raise CheckpointError("%s: array %s has unknown dtype code %d" % (path, name, code))
            dtype = CODE_DTYPES[code]
            np_dtype = np.dtype("<f8" if dtype is torch.float64 else "<f4")
            raw = _read(f, int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize, path)
            array = np.frombuffer(raw, dtype=np_dtype).astype(np_dtype.newbyteorder("="))
            tensors.append((name, torch.from_numpy(array.reshape(shape).copy())))
        if f.read(1):
            raise CheckpointError("%s has trailing data" % path)
    params = ParameterSet(tensors)
    if expected is not None:
        expected.check_compatible(params)
    return params


def _check_finite(tensor, layer):
    if not bool(torch.isfinite(tensor).all()):
        raise NumericError(layer)
    return tensor


def image_tensor(image, config):
    """ ``1 x C x H x W`` tensor for an :class:`ImageRecord` or pixel array. """
    pixels = image.pixels if isinstance(image, ImageRecord) else np.asarray(image)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.shape[2] != config.in_channels:
        raise ShapeMismatchError(
            "image has %d channels, the detector expects %d" % (pixels.shape[2], config.in_channels)
        )
    tensor = torch.from_numpy(np.array(pixels, dtype=np.float64)).permute(2, 0, 1)[None]
    return tensor.to(config.torch_dtype)


def backbone(params, x, config):
    for i in range(len(config.backbone_channels)):
        x = F.conv2d(x, params["backbone.conv%d.weight" % i], params["backbone.conv%d.bias" % i], stride=2, padding=1)
        x = _check_finite(F.relu(x), "backbone.conv%d" % i)
    return x


def rpn_head(params, features, config):
    """ Objectness logits (``N_A``) and deltas (``N_A x 4``) in anchor order. """
    t = F.relu(F.conv2d(features, params["rpn.conv.weight"], params["rpn.conv.bias"], padding=1))
    _check_finite(t, "rpn.conv")
    a = config.anchors_per_cell
    _, _, fh, fw = features.shape
    logits = F.conv2d(t, params["rpn.objectness.weight"], params["rpn.objectness.bias"])
    deltas = F.conv2d(t, params["rpn.deltas.weight"], params["rpn.deltas.bias"])
    logits = _check_finite(logits, "rpn.objectness")[0].permute(1, 2, 0).reshape(-1)
    deltas = _check_finite(deltas, "rpn.deltas")[0].reshape(a, 4, fh, fw).permute(2, 3, 0, 1).reshape(-1, 4)
    return RpnOutputs(logits, deltas)


def roi_head(params, features, proposals, config):
    """ Pool every proposal with ``roi_align`` and run the ROI heads. """
    rois = torch.cat((torch.zeros((proposals.shape[0], 1), dtype=proposals.dtype), proposals), dim=1)
    pooled = roi_align(
        features,
        rois.to(features.dtype),
        output_size=config.roi_pool_size,
        spatial_scale=1.0 / config.feature_stride,
        sampling_ratio=2,
        aligned=True,
    )
    hidden = F.relu(F.linear(pooled.flatten(1), params["roi.fc.weight"], params["roi.fc.bias"]))
    _check_finite(hidden, "roi.fc")
    logits = _check_finite(F.linear(hidden, params["roi.cls.weight"], params["roi.cls.bias"]), "roi.cls")
    deltas = _check_finite(F.linear(hidden, params["roi.deltas.weight"], params["roi.deltas.bias"]), "roi.deltas")
    return RoiOutputs(logits, deltas, hidden)


def select_proposals(anchors, rpn, image_size, config, training):
    """ Decode the top-scoring anchors, suppress overlaps and keep
    ``train_proposals`` (or ``test_proposals``) boxes.
    """
    with torch.no_grad():
        logits = rpn.objectness_logits.detach().to(torch.float64)
        deltas = rpn.box_deltas.detach().to(torch.float64)
        order = np.argsort(-logits.numpy(), kind="stable")[: config.pre_nms_proposals]
        order = torch.as_tensor(order, dtype=torch.long)
        boxes = decode(anchors.to(torch.float64)[order], deltas[order], image_size)
        scores = logits[order]
        valid = ((boxes[:, 2] - boxes[:, 0]) > 1e-3) & ((boxes[:, 3] - boxes[:, 1]) > 1e-3)
        boxes, scores = boxes[valid], scores[valid]
        keep = nms(boxes, scores.numpy(), config.rpn_nms_iou)
        limit = config.train_proposals if training else config.test_proposals
        return boxes[torch.as_tensor(keep[:limit], dtype=torch.long)].reshape(-1, 4)


def _child_seed(rng_seed, tag):
    if isinstance(rng_seed, (list, tuple)):
        return list(rng_seed) + [tag]
    return [rng_seed, tag]


def training_forward(params, image, gts, config, rng_seed):
    """ Forward pass that also builds the :class:`SamplingPlan`.

    :param gts: annotations (ground truth or pseudo-labels) used for matching.
    :returns: ``(ForwardResult, SamplingPlan)``.
    """
    x = image_tensor(image, config)
    height, width = x.shape[2:]
    features = backbone(params, x, config)
    rpn = rpn_head(params, features, config)
    anchors = generate_anchors(config, height, width).boxes
    gt_boxes, gt_classes = _gt_tensors(gts, torch.float64)
    rpn_match = match_and_sample(anchors, (gt_boxes, gt_classes), "rpn", config, _child_seed(rng_seed, 0))
    proposals = select_proposals(anchors, rpn, (height, width), config, training=True)
    if config.roi_append_gt and gt_boxes.shape[0]:
        proposals = torch.cat((proposals, gt_boxes), dim=0)
    if proposals.shape[0] == 0:
        proposals = torch.tensor([[0.0, 0.0, float(width), float(height)]], dtype=torch.float64)
    roi_match = match_and_sample(proposals, (gt_boxes, gt_classes), "roi", config, _child_seed(rng_seed, 1))
    plan = SamplingPlan((height, width), anchors, gt_boxes, gt_classes, rpn_match, proposals, roi_match)
    roi = roi_head(params, features, plan.sampled_proposals.to(config.torch_dtype), config)
    return ForwardResult(features, rpn, roi), plan


def run_plan(params, image, plan, config):
    """ Forward pass following an existing plan: same anchors and the same
    sampled proposals. Differentiable in ``params``.
    """
    x = image_tensor(image, config)
    if tuple(x.shape[2:]) != tuple(plan.image_size):
        raise ShapeMismatchError(
            "image is %s but the plan was built for %s" % (tuple(x.shape[2:]), tuple(plan.image_size))
        )
    features = backbone(params, x, config)
    rpn = rpn_head(params, features, config)
    roi = roi_head(params, features, plan.sampled_proposals.to(config.torch_dtype), config)
    return ForwardResult(features, rpn, roi)


def _mean_or_zero(total, count, anchor_tensor):
    if count:
        return total / count
    return anchor_tensor.sum() * 0.0


def supervised_losses(outputs, plan, config):
    """ Standard two-stage detector losses.

    - ``loss_rpn_obj``: mean binary cross-entropy over sampled anchors;
    - ``loss_rpn_reg``: smooth-L1 (summed over coordinates) averaged over
      foreground anchors;
    - ``loss_roi_cls``: mean ``K + 1``-way cross-entropy over sampled
      proposals, background is class ``K``;
    - ``loss_roi_reg``: smooth-L1 averaged over foreground proposals.

    Regression losses are 0 (still attached to the graph) without foreground.
    """
    beta = config.smooth_l1_beta
    rm, qm = plan.rpn_match, plan.roi_match
    dtype = outputs.rpn.objectness_logits.dtype

    idx = torch.as_tensor(rm.sampled_indices, dtype=torch.long)
    labels = torch.as_tensor(rm.labels, dtype=dtype)
    loss_rpn_obj = F.binary_cross_entropy_with_logits(outputs.rpn.objectness_logits[idx], labels)
    fg = idx[torch.as_tensor(rm.foreground)]
    if len(fg):
        gt = plan.gt_boxes[torch.as_tensor(rm.matched_gt[rm.foreground], dtype=torch.long)]
        targets = encode(plan.anchors.to(torch.float64)[fg], gt).to(dtype)
        total = smooth_l1(outputs.rpn.box_deltas[fg] - targets, beta).sum()
    else:
        total = None
    loss_rpn_reg = _mean_or_zero(total, len(fg), outputs.rpn.box_deltas)

    classes = torch.full((len(qm.labels),), config.num_classes, dtype=torch.long)
    roi_fg = torch.as_tensor(qm.foreground)
    if qm.fg_count:
        matched = torch.as_tensor(qm.matched_gt[qm.foreground], dtype=torch.long)
        classes[roi_fg] = plan.gt_classes[matched]
    loss_roi_cls = F.cross_entropy(outputs.roi.class_logits, classes)
    if qm.fg_count:
        proposals = plan.sampled_proposals[roi_fg]
        targets = encode(proposals, plan.gt_boxes[matched]).to(dtype)
        total = smooth_l1(outputs.roi.box_deltas[roi_fg] - targets, beta).sum()
    else:
        total = None
    loss_roi_reg = _mean_or_zero(total, qm.fg_count, outputs.roi.box_deltas)
    return {
        "loss_rpn_obj": loss_rpn_obj,
        "loss_rpn_reg": loss_rpn_reg,
        "loss_roi_cls": loss_roi_cls,
        "loss_roi_reg": loss_roi_reg,
    }


def nms(boxes, scores, iou_threshold):
    """ Greedy non-maximum suppression.

    Boxes are visited by descending score (ties: lower index first); a box is
    suppressed iff its IoU with an already kept box exceeds the threshold.

    :returns: kept indices, in visiting order.
    """
    boxes = _box_tensor(boxes)
    scores = np.asarray(scores.detach().numpy() if isinstance(scores, torch.Tensor) else scores, dtype=np.float64)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("got %d boxes and %d scores" % (boxes.shape[0], scores.shape[0]))
    if not len(scores):
        return []
    order = np.argsort(-scores, kind="stable")
    ious = box_iou(boxes, boxes).numpy()
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return keep


def batched_nms(boxes, scores, classes, iou_threshold):
    """ :func:`nms` within each class; result ordered by descending score. """
    boxes = _box_tensor(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    keep = []
    for k in np.unique(classes):
        members = np.flatnonzero(classes == k)
        kept = nms(boxes[torch.as_tensor(members, dtype=torch.long)], scores[members], iou_threshold)
        keep.extend(int(members[i]) for i in kept)
    keep.sort(key=lambda i: (-scores[i], i))
    return keep


def infer(params, image, config):
    """ Detect objects in one image.

    :returns: :class:`Prediction` list sorted by descending score, at most
        ``detections_per_image`` long. The background class is never emitted.
    :raises NumericError: on non-finite activations.
    """
    with torch.no_grad():
        x = image_tensor(image, config)
        height, width = x.shape[2:]
        features = backbone(params, x, config)
        rpn = rpn_head(params, features, config)
        anchors = generate_anchors(config, height, width).boxes
        proposals = select_proposals(anchors, rpn, (height, width), config, training=False)
        if proposals.shape[0] == 0:
            return []
        roi = roi_head(params, features, proposals.to(config.torch_dtype), config)
        probs = F.softmax(roi.class_logits.to(torch.float64), dim=1)
        boxes = decode(proposals, roi.box_deltas.to(torch.float64), (height, width))
        valid = ((boxes[:, 2] - boxes[:, 0]) > 1e-6) & ((boxes[:, 3] - boxes[:, 1]) > 1e-6)
        cand_boxes, cand_scores, cand_classes = [], [], []
        for k in range(config.num_classes):
            mask = (probs[:, k] > config.score_threshold) & valid
            cand_boxes.append(boxes[mask])
            cand_scores.append(probs[mask, k])
            cand_classes.append(torch.full((int(mask.sum()),), k, dtype=torch.long))
        cand_boxes = torch.cat(cand_boxes)
        if cand_boxes.shape[0] == 0:
            return []
        cand_scores = torch.cat(cand_scores).numpy()
        cand_classes = torch.cat(cand_classes).numpy()
        keep = batched_nms(cand_boxes, cand_scores, cand_classes, config.nms_iou)
        keep = keep[: config.detections_per_image]
        return [
            Prediction(
                BoundingBox(*(float(v) for v in cand_boxes[i])),
                int(cand_classes[i]),
                min(1.0, float(cand_scores[i])),
            )
            for i in keep
        ]

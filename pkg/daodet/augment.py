""":mod:`daodet.augment`
========================

Seeded augmentation pipelines.

A pipeline is an ordered list of transform kinds. Applying it draws concrete
parameters for each kind from a :class:`numpy.random.Generator` seeded by the
caller and returns them as :class:`AppliedTransform` records, so that any
augmentation can be replayed bit-exactly with :func:`replay`.

Geometric kinds (:class:`HFlip`, :class:`MultiScale`, :class:`CropPad`) move
boxes together with pixels. Photometric kinds (:class:`ColorJitter`,
:class:`Cutout`, :class:`MICMask`) never touch boxes.

"""
import dataclasses
import enum
import logging
import math
from typing import Any, ClassVar, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from daodet.config import ConfigError, from_dict
from daodet.datamodel import MIN_IMAGE_SIDE, Annotation, BoundingBox

__all__ = [
    "PipelineError",
    "Designation",
    "HFlip",
    "MultiScale",
    "CropPad",
    "ColorJitter",
    "Cutout",
    "MICMask",
    "KINDS",
    "AppliedTransform",
    "TransformPipeline",
    "ViewPair",
    "WEAK_ITEMS",
    "STRONG_ITEMS",
    "build_pipeline",
    "apply_transform",
    "apply_pipeline",
    "replay",
    "pair_views",
    "paired_views",
    "remap_annotations",
]

logger = logging.getLogger(__name__)


class PipelineError(ValueError):
    """ Invalid pipeline or pipeline pairing. """


class Designation(enum.Enum):
    WEAK = "weak"
    STRONG = "strong"


def _check_fraction(value, name, allow_zero=False):
    low_ok = value >= 0 if allow_zero else value > 0
    if not (low_ok and value <= 1):
        interval = "[0, 1]" if allow_zero else "(0, 1]"
        raise ConfigError("should be in %s, got %r" % (interval, value), name)


def _map_boxes(annotations, fn, width, height):
    """ Map every box through ``fn``, clip it to the output image and drop the
    annotations that end up fully outside.
    """
    out = []
    for ann in annotations:
        x1, y1, x2, y2 = fn(ann.box)
        x1, x2 = max(x1, 0.0), min(x2, float(width))
        y1, y2 = max(y1, 0.0), min(y2, float(height))
        if x1 >= x2 or y1 >= y2:
            continue
        out.append(Annotation(BoundingBox(x1, y1, x2, y2), ann.class_id))
    return tuple(out)


class _Kind:
    name: ClassVar[str] = ""
    geometric: ClassVar[bool] = False

    def sample(self, height, width, channels, rng, fill_value):
        raise NotImplementedError

    def transform_pixels(self, pixels, params):
        raise NotImplementedError

    def output_size(self, height, width, params):
        return height, width

    def map_annotations(self, annotations, height, width, params):
        return annotations


@dataclasses.dataclass(frozen=True)
class HFlip(_Kind):
    """ Horizontal flip with the given probability. """

    probability: float = 0.5

    name: ClassVar[str] = "hflip"
    geometric: ClassVar[bool] = True

    def __post_init__(self):
        _check_fraction(self.probability, "probability", allow_zero=True)

    def sample(self, height, width, channels, rng, fill_value):
        return {"flip": bool(rng.random() < self.probability)}

    def transform_pixels(self, pixels, params):
        if not params["flip"]:
            return pixels
        return np.ascontiguousarray(pixels[:, ::-1, :])

    def map_annotations(self, annotations, height, width, params):
        if not params["flip"]:
            return annotations
        return _map_boxes(
            annotations, lambda b: (width - b.x2, b.y1, width - b.x1, b.y2), width, height
        )


@dataclasses.dataclass(frozen=True)
class MultiScale(_Kind):
    """ Resize by a factor drawn uniformly from ``[scale_min, scale_max]``
    (bilinear). Output sides never go below the minimum image side.
    """

    scale_min: float = 0.5
    scale_max: float = 1.5

    name: ClassVar[str] = "multiscale"
    geometric: ClassVar[bool] = True

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("need 0 < scale_min <= scale_max", "scale_min")

    def sample(self, height, width, channels, rng, fill_value):
        scale = float(rng.uniform(self.scale_min, self.scale_max))
        return {
            "scale": scale,
            "height": max(MIN_IMAGE_SIDE, int(math.floor(height * scale + 0.5))),
            "width": max(MIN_IMAGE_SIDE, int(math.floor(width * scale + 0.5))),
        }

    def transform_pixels(self, pixels, params):
        size = (params["height"], params["width"])
        if size == pixels.shape[:2]:
            return pixels
        tensor = torch.from_numpy(np.array(pixels)).permute(2, 0, 1)[None]
        resized = F.interpolate(
            tensor, size=size, mode="bilinear", align_corners=False, antialias=True
        )
        return resized[0].permute(1, 2, 0).numpy()

    def output_size(self, height, width, params):
        return params["height"], params["width"]

    def map_annotations(self, annotations, height, width, params):
        sx = params["width"] / width
        sy = params["height"] / height
        return _map_boxes(
            annotations,
            lambda b: (b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy),
            params["width"],
            params["height"],
        )


@dataclasses.dataclass(frozen=True)
class CropPad(_Kind):
    """ Translate the image by up to ``fraction`` of its size in each
    direction, keeping its size: the part shifted out is cropped and the
    uncovered border is padded with the fill value.
    """

    fraction: float = 0.25

    name: ClassVar[str] = "croppad"
    geometric: ClassVar[bool] = True

    def __post_init__(self):
        _check_fraction(self.fraction, "fraction")

    def sample(self, height, width, channels, rng, fill_value):
        max_dx = int(self.fraction * width)
        max_dy = int(self.fraction * height)
        return {
            "dx": int(rng.integers(-max_dx, max_dx + 1)),
            "dy": int(rng.integers(-max_dy, max_dy + 1)),
            "fill": float(fill_value),
        }

    def transform_pixels(self, pixels, params):
        height, width = pixels.shape[:2]
        dx, dy = params["dx"], params["dy"]
        out = np.full_like(pixels, params["fill"])
        # output (y, x) shows input (y + dy, x + dx)
        src_x0, src_x1 = max(dx, 0), min(width + dx, width)
        src_y0, src_y1 = max(dy, 0), min(height + dy, height)
        if src_x0 < src_x1 and src_y0 < src_y1:
            out[src_y0 - dy : src_y1 - dy, src_x0 - dx : src_x1 - dx] = pixels[
                src_y0:src_y1, src_x0:src_x1
            ]
        return out

    def map_annotations(self, annotations, height, width, params):
        dx, dy = params["dx"], params["dy"]
        return _map_boxes(
            annotations, lambda b: (b.x1 - dx, b.y1 - dy, b.x2 - dx, b.y2 - dy), width, height
        )


@dataclasses.dataclass(frozen=True)
class ColorJitter(_Kind):
    """ Brightness, contrast and saturation factors drawn from
    ``[1 - p, 1 + p]``. No hue perturbation.
    """

    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4

    name: ClassVar[str] = "color_jitter"

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            _check_fraction(getattr(self, name), name, allow_zero=True)

    def sample(self, height, width, channels, rng, fill_value):
        return {
            name: float(rng.uniform(1 - getattr(self, name), 1 + getattr(self, name)))
            for name in ("brightness", "contrast", "saturation")
        }

    def transform_pixels(self, pixels, params):
        out = pixels * params["brightness"]
        mean = out.mean()
        out = (out - mean) * params["contrast"] + mean
        if out.shape[2] == 3:
            gray = out.mean(axis=2, keepdims=True)
            out = (out - gray) * params["saturation"] + gray
        return out


@dataclasses.dataclass(frozen=True)
class Cutout(_Kind):
    """ Erase between 1 and ``count`` rectangles, each covering at most
    ``max_fraction`` of the image, with the fill value (the dataset mean).
    """

    max_fraction: float = 0.25
    count: int = 3

    name: ClassVar[str] = "cutout"

    def __post_init__(self):
        _check_fraction(self.max_fraction, "max_fraction")
        if self.count < 1:
            raise ConfigError("should be at least 1", "count")

    def sample(self, height, width, channels, rng, fill_value):
        max_area = self.max_fraction * height * width
        rects = []
        for _ in range(int(rng.integers(1, self.count + 1))):
            area = rng.uniform(0.0, max_area)
            aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
            h = min(height, max(1, int(round(math.sqrt(area * aspect)))))
            w = min(width, max(1, int(round(math.sqrt(area / aspect)))))
            while h * w > max_area and max(h, w) > 1:
                if h >= w:
                    h -= 1
                else:
                    w -= 1
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            rects.append((x0, y0, w, h))
        return {"rects": rects, "fill": float(fill_value)}

    def transform_pixels(self, pixels, params):
        out = pixels.copy()
        for x0, y0, w, h in params["rects"]:
            out[y0 : y0 + h, x0 : x0 + w] = params["fill"]
        return out


@dataclasses.dataclass(frozen=True)
class MICMask(_Kind):
    """ Masked image consistency: split the image into a grid of
    ``patch_size`` patches and zero ``round(mask_ratio * patches)`` of them.

    :attr patch_size: side of a patch; None uses a twelfth of the image's
        shorter side.
    """

    patch_size: Optional[int] = None
    mask_ratio: float = 0.5

    name: ClassVar[str] = "mic"

    def __post_init__(self):
        if self.patch_size is not None and self.patch_size < 1:
            raise ConfigError("should be at least 1", "patch_size")
        _check_fraction(self.mask_ratio, "mask_ratio")

    def resolve_patch_size(self, height, width):
        if self.patch_size is not None:
            return self.patch_size
        return max(1, int(math.floor(min(height, width) / 12 + 0.5)))

    def sample(self, height, width, channels, rng, fill_value):
        patch = self.resolve_patch_size(height, width)
        if height < patch or width < patch:
            raise PipelineError(
                "a %dx%d image is smaller than a %d pixel mask patch" % (width, height, patch)
            )
        rows, cols = math.ceil(height / patch), math.ceil(width / patch)
        total = rows * cols
        masked = int(math.floor(self.mask_ratio * total + 0.5))
        chosen = np.sort(rng.choice(total, size=masked, replace=False))
        return {"patch": patch, "cols": cols, "patches": [int(i) for i in chosen]}

    def transform_pixels(self, pixels, params):
        out = pixels.copy()
        patch, cols = params["patch"], params["cols"]
        for index in params["patches"]:
            row, col = divmod(index, cols)
            out[row * patch : (row + 1) * patch, col * patch : (col + 1) * patch] = 0.0
        return out


KINDS = {kind.name: kind for kind in (HFlip, MultiScale, CropPad, ColorJitter, Cutout, MICMask)}

WEAK_ITEMS = ("multiscale", "hflip")
STRONG_ITEMS = ("multiscale", "hflip", "color_jitter", "cutout")


@dataclasses.dataclass(frozen=True)
class AppliedTransform:
    """ A kind together with the concrete parameters drawn for one image. """

    kind: Any
    params: Dict[str, Any]


@dataclasses.dataclass(frozen=True)
class TransformPipeline:
    kinds: Tuple[Any, ...]
    designation: Designation = Designation.STRONG

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "designation", Designation(self.designation))
        for kind in self.kinds:
            if not isinstance(kind, _Kind):
                raise PipelineError("%r is not a transform kind" % (kind,))
            if self.designation is Designation.WEAK and not isinstance(kind, (HFlip, MultiScale)):
                raise PipelineError(
                    "weak pipelines may only flip and rescale, got %s" % kind.name
                )

    def __len__(self):
        return len(self.kinds)


def build_pipeline(items, designation=Designation.STRONG):
    """ Build a :class:`TransformPipeline` from config items.

    Each item is either a kind name (``"hflip"``), a mapping with a ``kind``
    key and the kind's parameters (``{"kind": "cutout", "count": 2}``), or a
    kind instance.

    :raises ConfigError: for an unknown kind name or parameter.
    """
    kinds = []
    for index, item in enumerate(items or ()):
        path = "[%d]" % index
        if isinstance(item, _Kind):
            kinds.append(item)
            continue
        if isinstance(item, str):
            name, params = item, {}
        elif isinstance(item, dict) and "kind" in item:
            params = dict(item)
            name = params.pop("kind")
        else:
            raise ConfigError("expected a kind name or a mapping with a 'kind' key", path)
        if name not in KINDS:
            raise ConfigError(
                "unknown transform kind %r (one of %s)" % (name, ", ".join(sorted(KINDS))), path
            )
        kinds.append(from_dict(KINDS[name], params, path))
    return TransformPipeline(kinds, designation)


def apply_transform(record, kind, params):
    """ Apply one kind with already drawn parameters. Output pixels are
    clipped to ``[0, 1]``.
    """
    pixels = np.clip(kind.transform_pixels(record.pixels, params), 0.0, 1.0)
    annotations = record.annotations
    if annotations is not None and kind.geometric:
        annotations = kind.map_annotations(annotations, record.height, record.width, params)
    return record.replace(pixels=pixels, annotations=annotations)


def _run(record, kinds, rng, fill_value):
    applied = []
    for kind in kinds:
        params = kind.sample(record.height, record.width, record.channels, rng, fill_value)
        record = apply_transform(record, kind, params)
        applied.append(AppliedTransform(kind, params))
    return record, applied


def apply_pipeline(record, pipeline, rng_seed, fill_value=0.5):
    """ Apply a pipeline with draws from a generator seeded by ``rng_seed``.

    :param fill_value: value used by padding and cutout (the dataset mean).
    :returns: ``(record, applied)`` where ``applied`` replays the output.
    """
    rng = np.random.default_rng(rng_seed)
    return _run(record, pipeline.kinds, rng, fill_value)


def replay(record, applied):
    """ Re-apply recorded transforms; reproduces the original output exactly. """
    for step in applied:
        record = apply_transform(record, step.kind, step.params)
    return record


def remap_annotations(annotations, height, width, applied):
    """ Map annotations living in a ``height x width`` frame through the
    geometric steps of ``applied`` (photometric steps are skipped).
    """
    annotations = tuple(annotations)
    for step in applied:
        if step.kind.geometric:
            annotations = step.kind.map_annotations(annotations, height, width, step.params)
            height, width = step.kind.output_size(height, width, step.params)
    return annotations


def _child_seed(rng_seed, tag):
    if isinstance(rng_seed, (list, tuple)):
        return list(rng_seed) + [tag]
    return [rng_seed, tag]


@dataclasses.dataclass(frozen=True)
class ViewPair:
    """ Weak and strong views of one record.

    :attr strong_extras: transforms applied to the weak view to obtain the
        strong view; if any is geometric, weak-frame boxes must go through
        :func:`remap_annotations` to land on the strong view.
    """

    weak: Any
    strong: Any
    weak_applied: Tuple[AppliedTransform, ...]
    strong_extras: Tuple[AppliedTransform, ...]

    @property
    def aligned(self):
        return not any(step.kind.geometric for step in self.strong_extras)


def pair_views(record, weak, strong, rng_seed, fill_value=0.5):
    """ Build weak and strong views sharing every geometric draw of the weak
    pipeline.

    ``weak.kinds`` must be a prefix of ``strong.kinds``. The strong view is the
    weak view with the remaining strong kinds applied on top, drawn from a
    separate stream, so adding extras never changes the shared draws.

    :raises PipelineError: when the weak kinds are not a prefix of the
        strong kinds.
    """
    prefix = len(weak.kinds)
    if tuple(strong.kinds[:prefix]) != tuple(weak.kinds):
        raise PipelineError(
            "weak pipeline %s is not a prefix of strong pipeline %s"
            % ([k.name for k in weak.kinds], [k.name for k in strong.kinds])
        )
    weak_view, weak_applied = _run(record, weak.kinds, np.random.default_rng(rng_seed), fill_value)
    extra_rng = np.random.default_rng(_child_seed(rng_seed, 1))
    strong_view, extras = _run(weak_view, strong.kinds[prefix:], extra_rng, fill_value)
    return ViewPair(weak_view, strong_view, tuple(weak_applied), tuple(extras))


def paired_views(record, weak, strong, rng_seed, fill_value=0.5):
    """ Return ``(weak_view, strong_view)``; see :func:`pair_views`. """
    pair = pair_views(record, weak, strong, rng_seed, fill_value)
    return pair.weak, pair.strong

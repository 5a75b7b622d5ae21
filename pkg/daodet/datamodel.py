""":mod:`daodet.datamodel`
==========================

Images, annotations and datasets used everywhere in ``daodet``: box geometry,
COCO-format ingestion and serialization, and the synthetic two-domain
benchmark.

Boxes are always corner-form ``(x1, y1, x2, y2)`` in continuous pixel units.
COCO ``[x, y, w, h]`` boxes are converted when a file is read and converted
back when it is written.

"""
import dataclasses
import enum
import json
import logging
import math
import os
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from daodet.config import ConfigError

__all__ = [
    "GeometryError",
    "DatasetError",
    "BoundingBox",
    "Annotation",
    "Domain",
    "ImageRecord",
    "DetectionDataset",
    "DomainPair",
    "Prediction",
    "SyntheticConfig",
    "SHAPE_NAMES",
    "as_box",
    "iou",
    "read_image",
    "write_image",
    "load_coco",
    "save_coco",
    "apply_domain_shift",
    "make_synthetic_shift",
]

logger = logging.getLogger(__name__)

MIN_IMAGE_SIDE = 16
# boxes read from disk may overshoot the image by rounding
BOUNDS_TOLERANCE = 1e-6

SHAPE_NAMES = ("disc", "square", "triangle", "ring")


class GeometryError(ValueError):
    """ A box is degenerate (zero or negative area) or not finite. """


class DatasetError(ValueError):
    """ A dataset, record or annotation file is inconsistent. """


@dataclasses.dataclass(frozen=True)
class BoundingBox:
    """ Axis-aligned box in corner form, continuous pixel coordinates. """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = []
        for name in ("x1", "y1", "x2", "y2"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise GeometryError("box coordinate %s is not finite: %r" % (name, value))
            object.__setattr__(self, name, value)
            coords.append(value)
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError("degenerate box %r" % (tuple(coords),))

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def to_xywh(self):
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)

    @classmethod
    def from_xywh(cls, x, y, w, h):
        return cls(x, y, x + w, y + h)

    def clipped(self, width, height):
        """ Clip to ``[0, width] x [0, height]``.

        :returns: the clipped box, or None when nothing is left inside.
        """
        x1, y1 = max(self.x1, 0.0), max(self.y1, 0.0)
        x2, y2 = min(self.x2, float(width)), min(self.y2, float(height))
        if x1 >= x2 or y1 >= y2:
            return None
        return BoundingBox(x1, y1, x2, y2)


def as_box(value):
    """ Return ``value`` as a :class:`BoundingBox` (accepts any 4-sequence).

    :raises GeometryError: for degenerate or non-finite coordinates.
    """
    if isinstance(value, BoundingBox):
        return value
    coords = tuple(value)
    if len(coords) != 4:
        raise GeometryError("a box needs 4 coordinates, got %d" % len(coords))
    return BoundingBox(*coords)


def iou(a, b):
    """ Intersection over union of two boxes.

    >>> iou((0, 0, 2, 2), (1, 1, 3, 3))
    0.14285714285714285

    :raises GeometryError: if either box is degenerate.
    """
    a = as_box(a)
    b = as_box(b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclasses.dataclass(frozen=True)
class Annotation:
    """ One labeled object: a box and a foreground class index in ``[0, K-1]``. """

    box: BoundingBox
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "box", as_box(self.box))
        if isinstance(self.class_id, bool) or int(self.class_id) != self.class_id:
            raise DatasetError("class_id should be an integer, got %r" % (self.class_id,))
        if self.class_id < 0:
            raise DatasetError("class_id should be >= 0, got %r" % (self.class_id,))
        object.__setattr__(self, "class_id", int(self.class_id))


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclasses.dataclass(frozen=True, eq=False)
class ImageRecord:
    """ One image: ``H x W x C`` pixels in ``[0, 1]``, its domain and optional
    annotations (None means unlabeled, an empty tuple means "no object").

    Pixel arrays are stored read-only, so records can be shared freely.
    """

    id: str
    pixels: np.ndarray
    domain: Domain
    annotations: Optional[Tuple[Annotation, ...]] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3:
            raise DatasetError("image %s: pixels should be H x W x C" % self.id)
        height, width, channels = pixels.shape
        if height < MIN_IMAGE_SIDE or width < MIN_IMAGE_SIDE:
            raise DatasetError(
                "image %s: %dx%d is smaller than %d pixels"
                % (self.id, width, height, MIN_IMAGE_SIDE)
            )
        if channels not in (1, 3):
            raise DatasetError("image %s: %d channels (1 or 3 expected)" % (self.id, channels))
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise DatasetError("image %s: pixel values outside [0, 1]" % self.id)
        if pixels.flags.writeable:
            pixels = pixels.copy()
            pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.annotations is not None:
            annotations = tuple(self.annotations)
            for ann in annotations:
                box = ann.box
                if (
                    box.x1 < -BOUNDS_TOLERANCE
                    or box.y1 < -BOUNDS_TOLERANCE
                    or box.x2 > width + BOUNDS_TOLERANCE
                    or box.y2 > height + BOUNDS_TOLERANCE
                ):
                    raise DatasetError(
                        "image %s: box %r outside the %dx%d image"
                        % (self.id, box.as_tuple(), width, height)
                    )
            object.__setattr__(self, "annotations", annotations)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def labeled(self):
        return self.annotations is not None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True, eq=False)
class DetectionDataset:
    """ An ordered collection of images from a single domain.

    :attr labeled: when True every record carries annotations (possibly an
        empty tuple); when False no record does.
    """

    records: Tuple[ImageRecord, ...]
    labeled: bool
    class_names: Tuple[str, ...]
    domain: Optional[Domain] = None

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        domain = self.domain
        if domain is None and records:
            domain = records[0].domain
        object.__setattr__(self, "domain", None if domain is None else Domain(domain))
        seen = set()
        for record in records:
            if record.id in seen:
                raise DatasetError("duplicate image id %s" % record.id)
            seen.add(record.id)
            if record.domain is not self.domain:
                raise DatasetError(
                    "image %s is from the %s domain in a %s dataset"
                    % (record.id, record.domain.value, self.domain.value)
                )
            if self.labeled and record.annotations is None:
                raise DatasetError("image %s has no annotations in a labeled dataset" % record.id)
            if not self.labeled and record.annotations is not None:
                raise DatasetError("image %s has annotations in an unlabeled dataset" % record.id)
            for ann in record.annotations or ():
                if ann.class_id >= len(self.class_names):
                    raise DatasetError(
                        "image %s: class_id %d out of range for %d classes"
                        % (record.id, ann.class_id, len(self.class_names))
                    )

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index):
        return self.records[index]

    @property
    def num_classes(self):
        return len(self.class_names)

    def ids(self):
        return [record.id for record in self.records]

    def annotation_count(self):
        return sum(len(record.annotations or ()) for record in self.records)

    def mean_pixel(self):
        """ Mean pixel value over the whole dataset (the cutout fill value). """
        if not self.records:
            return 0.5
        total = sum(float(record.pixels.sum()) for record in self.records)
        count = sum(record.pixels.size for record in self.records)
        return total / count

    def without_annotations(self):
        records = [record.replace(annotations=None) for record in self.records]
        return DetectionDataset(records, False, self.class_names, self.domain)

    def split(self, fraction, seed):
        """ Carve a seeded held-out subset out of the dataset.

        :param fraction: share of records held out, in ``(0, 1)``.
        :returns: ``(kept, held_out)`` datasets, record order preserved.
        :raises DatasetError: when either part would be empty.
        """
        if not 0.0 < fraction < 1.0:
            raise DatasetError("split fraction should be in (0, 1), got %r" % fraction)
        count = len(self.records)
        held = int(math.floor(fraction * count + 0.5))
        if held < 1 or held >= count:
            raise DatasetError(
                "cannot hold out %.0f%% of %d records" % (100 * fraction, count)
            )
        order = np.random.default_rng(seed).permutation(count)
        held_idx = set(int(i) for i in order[:held])
        kept = [r for i, r in enumerate(self.records) if i not in held_idx]
        out = [r for i, r in enumerate(self.records) if i in held_idx]
        return (
            DetectionDataset(kept, self.labeled, self.class_names, self.domain),
            DetectionDataset(out, self.labeled, self.class_names, self.domain),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class DomainPair:
    """ The splits of a domain adaptation benchmark. ``target_train_labeled``
    is only used to train oracle models.
    """

    source_train: DetectionDataset
    target_train: DetectionDataset
    target_test: DetectionDataset
    target_train_labeled: Optional[DetectionDataset] = None

    def __post_init__(self):
        if not self.source_train.labeled:
            raise DatasetError("source_train should be labeled")
        if self.target_train.labeled:
            raise DatasetError("target_train should be unlabeled")
        if not self.target_test.labeled:
            raise DatasetError("target_test should be labeled")
        if self.target_train_labeled is not None and not self.target_train_labeled.labeled:
            raise DatasetError("target_train_labeled should be labeled")
        names = self.source_train.class_names
        for split in self.splits().values():
            if split.class_names != names:
                raise DatasetError(
                    "class names differ across splits: %r vs %r" % (names, split.class_names)
                )

    @property
    def class_names(self):
        return self.source_train.class_names

    @property
    def num_classes(self):
        return len(self.source_train.class_names)

    def splits(self):
        splits = {
            "source_train": self.source_train,
            "target_train": self.target_train,
            "target_test": self.target_test,
        }
        if self.target_train_labeled is not None:
            splits["target_train_labeled"] = self.target_train_labeled
        return splits


@dataclasses.dataclass(frozen=True)
class Prediction:
    """ A scored, class-labeled detection. """

    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        object.__setattr__(self, "box", as_box(self.box))
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise DatasetError("prediction score should be in [0, 1], got %r" % score)
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "class_id", int(self.class_id))


def read_image(path):
    """ Read a PNG (or any Pillow-readable) image as float pixels in [0, 1].
    Grayscale images keep one channel, anything else is converted to RGB.
    """
    with Image.open(path) as image:
        if image.mode in ("L", "I;16", "I", "F", "1"):
            array = np.asarray(image.convert("L"), dtype=np.float64)[:, :, None]
        else:
            array = np.asarray(image.convert("RGB"), dtype=np.float64)
    return array / 255.0


def write_image(pixels, path):
    """ Write float pixels in [0, 1] as an 8-bit PNG. """
    array = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if array.ndim == 3 and array.shape[2] == 1:
        Image.fromarray(array[:, :, 0]).save(path, format="PNG")
    else:
        Image.fromarray(array).save(path, format="PNG")


def load_coco(annotation_file, image_root, domain, labeled):
    """ Load a COCO-style detection file.

    :param annotation_file: path to the JSON file (``images``, ``annotations``
        and ``categories`` arrays).
    :param image_root: directory the ``file_name`` entries are relative to.
    :param domain: :class:`Domain` (or its string value) of every image.
    :param labeled: when False annotations are dropped.
    :returns: a :class:`DetectionDataset`, one record per image entry.
    :raises DatasetError: on malformed JSON, a missing image file or an
        annotation referencing an unknown image id.
    """
    try:
        with open(annotation_file, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError("cannot parse %s: %s" % (annotation_file, e)) from e
    if not isinstance(data, dict) or "images" not in data or "categories" not in data:
        raise DatasetError("%s is not a COCO detection file" % annotation_file)

    categories = sorted(data["categories"], key=lambda c: c["id"])
    class_index = {c["id"]: i for i, c in enumerate(categories)}
    class_names = tuple(str(c["name"]) for c in categories)

    per_image = {}
    for entry in data["images"]:
        image_id = str(entry["id"])
        if image_id in per_image:
            raise DatasetError("duplicate image id %s in %s" % (image_id, annotation_file))
        per_image[image_id] = []
    for ann in data.get("annotations", []):
        image_id = str(ann["image_id"])
        if image_id not in per_image:
            raise DatasetError(
                "annotation %s references unknown image id %s" % (ann.get("id"), image_id)
            )
        if ann["category_id"] not in class_index:
            raise DatasetError(
                "annotation %s references unknown category %s"
                % (ann.get("id"), ann["category_id"])
            )
        per_image[image_id].append(ann)

    records = []
    for entry in data["images"]:
        image_id = str(entry["id"])
        path = os.path.join(image_root, entry["file_name"])
        if not os.path.isfile(path):
            raise DatasetError("missing image file for image id %s: %s" % (image_id, path))
        pixels = read_image(path)
        height, width = pixels.shape[:2]
        annotations = None
        if labeled:
            annotations = []
            for ann in per_image[image_id]:
                box = BoundingBox.from_xywh(*ann["bbox"]).clipped(width, height)
                if box is None:
                    logger.warning(
                        "dropping annotation %s of image %s: box outside the image",
                        ann.get("id"),
                        image_id,
                    )
                    continue
                annotations.append(Annotation(box, class_index[ann["category_id"]]))
        records.append(ImageRecord(image_id, pixels, domain, annotations))
    return DetectionDataset(records, labeled, class_names, Domain(domain))


def save_coco(dataset, annotation_file, image_root):
    """ Write a dataset as a COCO JSON file plus one ``<id>.png`` per image.

    Unlabeled datasets are written with an empty ``annotations`` array.
    """
    os.makedirs(image_root, exist_ok=True)
    parent = os.path.dirname(os.path.abspath(annotation_file))
    os.makedirs(parent, exist_ok=True)
    images, annotations = [], []
    for record in dataset.records:
        file_name = "%s.png" % record.id
        write_image(record.pixels, os.path.join(image_root, file_name))
        images.append(
            {"id": record.id, "file_name": file_name, "width": record.width, "height": record.height}
        )
        for ann in record.annotations or ():
            x, y, w, h = ann.box.to_xywh()
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": record.id,
                    "category_id": ann.class_id + 1,
                    "bbox": [x, y, w, h],
                    "area": w * h,
                    "iscrowd": 0,
                }
            )
    categories = [{"id": i + 1, "name": name} for i, name in enumerate(dataset.class_names)]
    with open(annotation_file, "w", encoding="utf-8") as f:
        json.dump({"images": images, "annotations": annotations, "categories": categories}, f)


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    """ Parameters of the synthetic two-domain benchmark.

    Source and target scenes are drawn from the same object-placement
    distribution; target pixels are then degraded by a fog-like photometric
    shift (contrast reduction towards ``airlight``, blur, additive noise).
    """

    image_size: int = 96
    channels: int = 3
    num_classes: int = 2
    source_train: int = 200
    target_train: int = 200
    target_test: int = 100
    target_train_labeled: int = 200
    max_objects: int = 3
    min_object_size: int = 16
    max_object_size: int = 32
    empty_fraction: float = 0.1
    contrast_reduction: float = 0.5
    noise_level: float = 0.05
    blur_radius: float = 1.0
    airlight: float = 0.8

    def __post_init__(self):
        for name in ("source_train", "target_train", "target_test", "target_train_labeled"):
            if getattr(self, name) <= 0:
                raise ConfigError("should be positive, got %r" % getattr(self, name), name)
        if self.image_size < MIN_IMAGE_SIDE:
            raise ConfigError("should be at least %d" % MIN_IMAGE_SIDE, "image_size")
        if self.channels not in (1, 3):
            raise ConfigError("should be 1 or 3", "channels")
        if not 1 <= self.num_classes <= len(SHAPE_NAMES):
            raise ConfigError("should be in [1, %d]" % len(SHAPE_NAMES), "num_classes")
        if self.max_objects <= 0:
            raise ConfigError("should be positive", "max_objects")
        if self.min_object_size < 4 or self.max_object_size < self.min_object_size:
            raise ConfigError("need 4 <= min_object_size <= max_object_size", "min_object_size")
        if self.max_object_size >= self.image_size:
            raise ConfigError("should be smaller than image_size", "max_object_size")
        if not 0.0 <= self.empty_fraction <= 1.0:
            raise ConfigError("should be in [0, 1]", "empty_fraction")
        if not 0.0 <= self.contrast_reduction < 1.0:
            raise ConfigError("should be in [0, 1)", "contrast_reduction")
        if self.noise_level < 0 or self.blur_radius < 0:
            raise ConfigError("shift parameters should be non-negative", "noise_level")
        if not 0.0 <= self.airlight <= 1.0:
            raise ConfigError("should be in [0, 1]", "airlight")

    @property
    def class_names(self):
        return SHAPE_NAMES[: self.num_classes]


def _quantize(pixels):
    # multiples of 1/255, so a PNG round trip is lossless
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def _shape_mask(kind, x0, y0, size, xs, ys):
    cx, cy, r = x0 + size / 2.0, y0 + size / 2.0, size / 2.0
    if kind == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == "square":
        return (xs >= x0) & (xs < x0 + size) & (ys >= y0) & (ys < y0 + size)
    if kind == "triangle":
        inside_y = (ys >= y0) & (ys < y0 + size)
        half = (ys - y0) / 2.0
        return inside_y & (xs >= cx - half) & (xs < cx + half)
    if kind == "ring":
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    raise ValueError("unknown shape %r" % kind)


def _render_scene(config, rng):
    size = config.image_size
    channels = config.channels
    ys, xs = np.mgrid[0:size, 0:size] + 0.5

    base = rng.uniform(0.2, 0.45)
    tint = rng.uniform(-0.05, 0.05, channels)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=6.0)
    texture = texture / (np.abs(texture).max() + 1e-12) * 0.1
    grain = rng.normal(0.0, 0.02, (size, size, channels))
    pixels = base + tint[None, None, :] + texture[:, :, None] + grain

    annotations = []
    if rng.random() >= config.empty_fraction:
        count = int(rng.integers(1, config.max_objects + 1))
        for _ in range(count):
            for _attempt in range(20):
                side = int(rng.integers(config.min_object_size, config.max_object_size + 1))
                x0 = int(rng.integers(0, size - side + 1))
                y0 = int(rng.integers(0, size - side + 1))
                box = BoundingBox(x0, y0, x0 + side, y0 + side)
                if all(iou(box, a.box) <= 0.1 for a in annotations):
                    break
            else:
                continue
            class_id = int(rng.integers(0, config.num_classes))
            color = rng.uniform(0.6, 1.0, channels)
            mask = _shape_mask(SHAPE_NAMES[class_id], x0, y0, side, xs, ys)
            pixels[mask] = color
            annotations.append(Annotation(box, class_id))
    return _quantize(pixels), annotations


def apply_domain_shift(pixels, config, rng):
    """ Degrade pixels with the fog-like shift described by ``config``:
    blend towards ``airlight`` by ``contrast_reduction``, gaussian blur of
    ``blur_radius``, additive gaussian noise of ``noise_level``.

    With all shift parameters at zero the pixels are returned unchanged.
    """
    shifted = np.asarray(pixels, dtype=np.float64)
    c = config.contrast_reduction
    if c:
        shifted = (1.0 - c) * shifted + c * config.airlight
    if config.blur_radius:
        shifted = ndimage.gaussian_filter(
            shifted, sigma=(config.blur_radius, config.blur_radius, 0.0)
        )
    if config.noise_level:
        shifted = shifted + rng.normal(0.0, config.noise_level, shifted.shape)
    return _quantize(shifted)


# (split name, domain, labeled, shifted)
_SPLITS = (
    ("source_train", Domain.SOURCE, True, False),
    ("target_train", Domain.TARGET, False, True),
    ("target_test", Domain.TARGET, True, True),
    ("target_train_labeled", Domain.TARGET, True, True),
)


def make_synthetic_shift(config, seed):
    """ Generate the synthetic benchmark: four splits with the record counts
    given in ``config``. Deterministic for a given ``(config, seed)``.

    :param config: a :class:`SyntheticConfig` (or a mapping of its fields).
    :param seed: non-negative integer.
    :returns: a :class:`DomainPair` with every split populated.
    """
    if not isinstance(config, SyntheticConfig):
        from daodet.config import from_dict

        config = from_dict(SyntheticConfig, config)
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ConfigError("seed should be a non-negative integer, got %r" % (seed,), "seed")
    streams = np.random.SeedSequence(int(seed)).spawn(len(_SPLITS))
    splits = {}
    for (name, domain, labeled, shifted), stream in zip(_SPLITS, streams):
        rng = np.random.default_rng(stream)
        records = []
        for index in range(getattr(config, name)):
            pixels, annotations = _render_scene(config, rng)
            if shifted:
                pixels = apply_domain_shift(pixels, config, rng)
            records.append(
                ImageRecord(
                    "%s_%05d" % (name, index),
                    pixels,
                    domain,
                    annotations if labeled else None,
                )
            )
        splits[name] = DetectionDataset(records, labeled, config.class_names, domain)
    logger.debug("generated synthetic benchmark with seed %d", seed)
    return DomainPair(**splits)

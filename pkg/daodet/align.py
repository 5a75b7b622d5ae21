""":mod:`daodet.align`
======================

Feature alignment: domain-adversarial heads trained through a gradient
reversal layer, at image level (on the backbone feature map) and at instance
level (on the ROI heads' hidden features), and image-to-image alignment by
substituting pre-translated images.

Translated images live under ``<root>/src_to_tgtlike/<id>.png`` (source
images made to look like the target domain) and
``<root>/tgt_to_srclike/<id>.png``. For the synthetic benchmark,
:func:`stylize_pair` produces them without any generative model.

"""
import dataclasses
import functools
import logging
import math
import os
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from daodet.config import ConfigError
from daodet.datamodel import apply_domain_shift, read_image, write_image
from daodet.detector import ParameterSet

__all__ = [
    "AlignmentError",
    "TranslationError",
    "AlignConfig",
    "DomainBatchLabels",
    "TranslatedPair",
    "DIRECTIONS",
    "GradReverse",
    "grad_reverse",
    "init_image_discriminator",
    "init_instance_discriminator",
    "image_discriminator",
    "instance_discriminator",
    "dann_loss",
    "adv_weight_at",
    "substitute_translated",
    "stylize_pair",
]

logger = logging.getLogger(__name__)

DIRECTIONS = ("src_to_tgtlike", "tgt_to_srclike")


class AlignmentError(ValueError):
    """ Discriminator inputs or labels do not fit. """


class TranslationError(LookupError):
    """ A translated image is missing or does not match its original. """


@dataclasses.dataclass(frozen=True)
class AlignConfig:
    """ Alignment settings. The adversarial heads and image-to-image
    translation are alternative families and cannot be combined.

    :attr warmup_fraction: share of the iterations over which the adversarial
        weight ramps linearly from 0 to ``adv_weight`` (0 disables the ramp).
    :attr disc_lr_ratio: discriminator learning rate relative to the
        detector's.
    """

    image_level: bool = False
    instance_level: bool = False
    img2img: bool = False
    adv_weight: float = 0.1
    warmup_fraction: float = 0.0
    image_hidden: int = 64
    instance_hidden: int = 64
    disc_lr_ratio: float = 1.0
    translated_root: Optional[str] = None

    def __post_init__(self):
        if self.img2img and (self.image_level or self.instance_level):
            raise ConfigError("adversarial alignment and img2img cannot be combined", "img2img")
        if self.adv_weight < 0:
            raise ConfigError("should be non-negative", "adv_weight")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("should be in [0, 1]", "warmup_fraction")
        if self.image_hidden < 1 or self.instance_hidden < 1:
            raise ConfigError("should be positive", "image_hidden")
        if self.disc_lr_ratio <= 0:
            raise ConfigError("should be positive", "disc_lr_ratio")

    @property
    def adversarial(self):
        return self.image_level or self.instance_level

    @property
    def enabled(self):
        return self.adversarial or self.img2img


@dataclasses.dataclass(frozen=True)
class DomainBatchLabels:
    """ Per-image domain labels: 0 for source, 1 for target. """

    labels: Tuple[int, ...]

    def __post_init__(self):
        labels = tuple(int(v) for v in self.labels)
        if any(v not in (0, 1) for v in labels):
            raise AlignmentError("domain labels should be 0 or 1, got %r" % (labels,))
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_counts(cls, n_source, n_target):
        return cls((0,) * n_source + (1,) * n_target)

    def __len__(self):
        return len(self.labels)

    def as_tensor(self, dtype=torch.float64):
        return torch.tensor(self.labels, dtype=dtype)


class GradReverse(torch.autograd.Function):
    """ Identity forward; multiplies the incoming gradient by ``-lambda``. """

    @staticmethod
    def forward(ctx, x, lambda_adv):
        ctx.lambda_adv = lambda_adv
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lambda_adv * grad_output, None


def grad_reverse(features, lambda_adv):
    return GradReverse.apply(features, float(lambda_adv))


def _uniform(generator, shape, fan_in, dtype):
    bound = math.sqrt(1.0 / fan_in)
    return ((torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound).to(dtype)


def init_image_discriminator(in_channels, hidden, seed, dtype=torch.float64):
    """ 3x3 conv (padded) + ReLU, global average pool, linear to one logit. """
    generator = torch.Generator().manual_seed(int(seed))
    return ParameterSet(
        [
            ("img.conv.weight", _uniform(generator, (hidden, in_channels, 3, 3), in_channels * 9, dtype)),
            ("img.conv.bias", torch.zeros(hidden, dtype=dtype)),
            ("img.fc.weight", _uniform(generator, (1, hidden), hidden, dtype)),
            ("img.fc.bias", torch.zeros(1, dtype=dtype)),
        ]
    )


def init_instance_discriminator(width, hidden, seed, dtype=torch.float64):
    """ Hidden fully connected layer + ReLU, linear to one logit. """
    generator = torch.Generator().manual_seed(int(seed))
    return ParameterSet(
        [
            ("inst.fc1.weight", _uniform(generator, (hidden, width), width, dtype)),
            ("inst.fc1.bias", torch.zeros(hidden, dtype=dtype)),
            ("inst.fc2.weight", _uniform(generator, (1, hidden), hidden, dtype)),
            ("inst.fc2.bias", torch.zeros(1, dtype=dtype)),
        ]
    )


def image_discriminator(features, params):
    """ One domain logit per image of a ``B x C x H x W`` feature map. """
    expected = params["img.conv.weight"].shape[1]
    if features.dim() != 4 or features.shape[1] != expected:
        raise AlignmentError(
            "feature map has shape %s, the discriminator expects %d channels"
            % (tuple(features.shape), expected)
        )
    hidden = F.relu(F.conv2d(features, params["img.conv.weight"], params["img.conv.bias"], padding=1))
    pooled = hidden.mean(dim=(2, 3))
    return F.linear(pooled, params["img.fc.weight"], params["img.fc.bias"])[:, 0]


def instance_discriminator(roi_features, params):
    """ One domain logit per row of an ``N x D`` instance feature matrix. """
    expected = params["inst.fc1.weight"].shape[1]
    if roi_features.dim() != 2 or roi_features.shape[1] != expected:
        raise AlignmentError(
            "instance features have shape %s, the discriminator expects width %d"
            % (tuple(roi_features.shape), expected)
        )
    hidden = F.relu(F.linear(roi_features, params["inst.fc1.weight"], params["inst.fc1.bias"]))
    return F.linear(hidden, params["inst.fc2.weight"], params["inst.fc2.bias"])[:, 0]


def dann_loss(domain_logits, labels):
    """ Mean binary cross-entropy of domain logits against domain labels.

    :param labels: :class:`DomainBatchLabels` or a sequence of 0/1.
    """
    if not isinstance(labels, DomainBatchLabels):
        labels = DomainBatchLabels(tuple(labels))
    if domain_logits.shape[0] != len(labels):
        raise AlignmentError("%d logits for %d labels" % (domain_logits.shape[0], len(labels)))
    return F.binary_cross_entropy_with_logits(domain_logits, labels.as_tensor(domain_logits.dtype))


def adv_weight_at(config, iteration, total_iterations):
    """ Adversarial weight at ``iteration``, with the optional linear warm-up. """
    if not config.warmup_fraction or total_iterations <= 0:
        return config.adv_weight
    ramp = config.warmup_fraction * total_iterations
    return config.adv_weight * min(1.0, iteration / ramp)


@dataclasses.dataclass(frozen=True)
class TranslatedPair:
    src_like_root: str
    tgt_like_root: str

    @classmethod
    def from_root(cls, root):
        return cls(os.path.join(root, "tgt_to_srclike"), os.path.join(root, "src_to_tgtlike"))

    def path(self, direction, image_id):
        if direction == "src_to_tgtlike":
            return os.path.join(self.tgt_like_root, "%s.png" % image_id)
        if direction == "tgt_to_srclike":
            return os.path.join(self.src_like_root, "%s.png" % image_id)
        raise ValueError("direction should be one of %s, got %r" % (DIRECTIONS, direction))


@functools.lru_cache(maxsize=4096)
def _read_translated(path):
    pixels = read_image(path)
    pixels.setflags(write=False)
    return pixels


def substitute_translated(batch, pair, direction):
    """ Replace the pixels of every record by its translated counterpart.

    Ids and annotations are left untouched.

    :raises TranslationError: naming the first id without a translated image
        of the same size.
    """
    out = []
    for record in batch:
        path = pair.path(direction, record.id)
        if not os.path.isfile(path):
            raise TranslationError("no %s image for id %s (%s)" % (direction, record.id, path))
        pixels = _read_translated(path)
        if pixels.shape != record.pixels.shape:
            raise TranslationError(
                "translated image for id %s is %s, the original %s"
                % (record.id, pixels.shape, record.pixels.shape)
            )
        out.append(record.replace(pixels=pixels))
    return out


def _inverse_shift(pixels, config):
    c = config.contrast_reduction
    restored = (np.asarray(pixels) - c * config.airlight) / (1.0 - c)
    return np.round(np.clip(restored, 0.0, 1.0) * 255.0) / 255.0


def stylize_pair(pair, root, config, seed):
    """ Emulate image translation on a synthetic benchmark.

    Source images get the configured photometric shift
    (``src_to_tgtlike``); target images get an approximate inverse, the
    contrast restoration without deblurring or denoising (``tgt_to_srclike``).

    :param pair: the :class:`~daodet.datamodel.DomainPair`.
    :param config: the :class:`~daodet.datamodel.SyntheticConfig` it was
        generated with.
    :returns: a :class:`TranslatedPair` rooted at ``root``.
    """
    translated = TranslatedPair.from_root(root)
    os.makedirs(translated.tgt_like_root, exist_ok=True)
    os.makedirs(translated.src_like_root, exist_ok=True)
    rng = np.random.default_rng([int(seed), 7])
    for record in pair.source_train:
        write_image(apply_domain_shift(record.pixels, config, rng), translated.path("src_to_tgtlike", record.id))
    for name, split in pair.splits().items():
        if name == "source_train":
            continue
        for record in split:
            write_image(_inverse_shift(record.pixels, config), translated.path("tgt_to_srclike", record.id))
    logger.info("wrote translated images under %s", root)
    return translated

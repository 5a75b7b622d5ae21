""":mod:`daodet.trainer`
========================

The self-training loop: burn-in, minibatch composition, the three-objective
training step (supervised, alignment, distillation), teacher maintenance and
the method presets.

Every random draw is derived from ``(seed, iteration, ...)``: streams are
stateless, augmentations and samplers are seeded per image. A run restarted
from a checkpoint therefore continues exactly like the uninterrupted run.

"""
import copy
import csv
import dataclasses
import json
import logging
import math
import os
import time
from collections import defaultdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from daodet import align, augment
from daodet.align import AlignConfig
from daodet.config import ConfigError, apply_overrides, from_dict, to_dict
from daodet.distill import (
    DistillConfig,
    EmaConfig,
    build_soft_targets,
    ema_update,
    hard_distill_losses,
    soft_distill_losses,
    teacher_pseudo_labels,
)
from daodet.detector import (
    DetectorConfig,
    ParameterSet,
    infer,
    init_params,
    load_params,
    save_params,
    supervised_losses,
    training_forward,
)
from daodet.evalmetrics import ap50

__all__ = [
    "TrainerError",
    "NonFiniteLossError",
    "PresetError",
    "TEACHER_UPDATES",
    "BURN_IN_MODES",
    "BurnInConfig",
    "PipelinesConfig",
    "TrainConfig",
    "MethodPreset",
    "PRESETS",
    "ABLATIONS",
    "BurninResult",
    "burn_in_config",
    "TrainingRun",
    "TrainState",
    "Minibatch",
    "RecordStream",
    "Trainer",
    "resolve_preset",
    "lookup_preset",
    "merge_overrides",
    "batch_counts",
    "source_only_variant",
    "ablation_overrides",
    "compose_batch",
    "evaluate",
    "burn_in",
    "train_step",
    "run_training",
    "write_curve_csv",
    "save_state",
    "load_state",
]

logger = logging.getLogger(__name__)

TEACHER_UPDATES = ("none", "student_is_teacher", "ema")
BURN_IN_MODES = ("none", "fixed", "robust")
BURN_IN_PIPELINES = ("weak", "strong", "source")

WEAK = list(augment.WEAK_ITEMS)
STRONG = list(augment.STRONG_ITEMS)


class TrainerError(ValueError):
    """ Training inputs that cannot work together. """


class NonFiniteLossError(ArithmeticError):
    """ The total loss is NaN or infinite.

    :attr iteration: the failing iteration.
    :attr terms: name -> value of every loss term at that iteration.
    """

    def __init__(self, iteration, terms):
        self.iteration = iteration
        self.terms = terms
        details = ", ".join("%s=%r" % (k, v) for k, v in sorted(terms.items()))
        super().__init__("non-finite loss at iteration %d (%s)" % (iteration, details))


class PresetError(ValueError):
    """ Unknown preset, or a preset that does not fit the data. """


@dataclasses.dataclass(frozen=True)
class BurnInConfig:
    """ Supervised source pre-training before self-training.

    * ``fixed`` trains for exactly ``iterations``;
    * ``robust`` evaluates every ``eval_every`` iterations on a held-out
      ``val_fraction`` of the source data and stops after ``patience``
      evaluations without improvement (or at ``max_iterations``).

    :attr pipeline: ``weak``, ``strong`` or ``source`` (the run's T_src).
    :attr use_ema: keep an EMA copy and return it as the initialization.
    """

    mode: str = "none"
    iterations: int = 200
    max_iterations: int = 1000
    eval_every: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    pipeline: str = "strong"
    use_ema: bool = True

    def __post_init__(self):
        if self.mode not in BURN_IN_MODES:
            raise ConfigError("should be one of %s" % ", ".join(BURN_IN_MODES), "mode")
        if self.pipeline not in BURN_IN_PIPELINES:
            raise ConfigError("should be one of %s" % ", ".join(BURN_IN_PIPELINES), "pipeline")
        for name in ("iterations", "max_iterations", "eval_every", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError("should be positive", name)
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("should be in [0, 1)", "val_fraction")


@dataclasses.dataclass(frozen=True)
class PipelinesConfig:
    """ Augmentation pipelines as config items (see
    :func:`daodet.augment.build_pipeline`).

    :attr source_half: when set, the second half of the source images of each
        batch uses this pipeline instead of ``source``.
    """

    source: Tuple[Any, ...] = augment.STRONG_ITEMS
    source_half: Optional[Tuple[Any, ...]] = None
    target: Tuple[Any, ...] = augment.STRONG_ITEMS
    weak: Tuple[Any, ...] = augment.WEAK_ITEMS


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """ Everything a training run depends on besides the data.

    :attr target_supervised: train on the labeled target split with the
        supervised loss (oracle models).
    :attr init_params_file: optional parameter file used instead of the
        seeded initialization.
    """

    batch_size: int = 16
    target_fraction: float = 0.5
    learning_rate: float = 0.01
    momentum: float = 0.9
    warmup_iterations: int = 0
    iterations: int = 1000
    eval_every: int = 100
    max_eval_images: Optional[int] = None
    seed: int = 0
    teacher_update: str = "ema"
    target_supervised: bool = False
    init_params_file: Optional[str] = None
    detector: DetectorConfig = DetectorConfig()
    ema: EmaConfig = EmaConfig()
    distill: DistillConfig = DistillConfig()
    align: AlignConfig = AlignConfig()
    pipelines: PipelinesConfig = PipelinesConfig()
    burn_in: BurnInConfig = BurnInConfig()

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("should be at least 2", "batch_size")
        if not 0.0 <= self.target_fraction <= 1.0:
            raise ConfigError("should be in [0, 1]", "target_fraction")
        if self.learning_rate <= 0:
            raise ConfigError("should be positive", "learning_rate")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("should be in [0, 1)", "momentum")
        if self.iterations < 0 or self.warmup_iterations < 0:
            raise ConfigError("should be non-negative", "iterations")
        if self.eval_every <= 0:
            raise ConfigError("should be positive", "eval_every")
        if self.seed < 0:
            raise ConfigError("should be non-negative", "seed")
        if self.teacher_update not in TEACHER_UPDATES:
            raise ConfigError("should be one of %s" % ", ".join(TEACHER_UPDATES), "teacher_update")
        if self.teacher_update == "ema" and not self.ema.enabled:
            raise ConfigError("teacher_update 'ema' needs ema.enabled", "teacher_update")
        if self.target_supervised and (self.distill.mode != "none" or self.align.enabled):
            raise ConfigError("supervised target training excludes distillation and alignment", "target_supervised")

    @property
    def kept_model(self):
        """ ``"teacher"`` when the teacher is an EMA, else ``"student"``. """
        return "teacher" if self.teacher_update == "ema" else "student"


@dataclasses.dataclass(frozen=True)
class MethodPreset:
    """ A named bundle of :class:`TrainConfig` overrides (nested mapping).

    :attr reference: source-only and oracle rows, drawn as reference lines in
        comparison reports.
    """

    name: str
    description: str
    overrides: Dict[str, Any]
    reference: bool = False


_NO_ALIGN = {"image_level": False, "instance_level": False, "img2img": False}

PRESETS = {
    preset.name: preset
    for preset in (
        MethodPreset(
            "source_only",
            "Source data only, strong augmentations and EMA",
            {
                "target_fraction": 0.0,
                "teacher_update": "ema",
                "distill": {"mode": "none"},
                "align": dict(_NO_ALIGN),
                "pipelines": {"source": STRONG},
                "burn_in": {"mode": "none"},
            },
            reference=True,
        ),
        MethodPreset(
            "oracle",
            "Labeled target data, strong augmentations and EMA",
            {
                "target_fraction": 1.0,
                "target_supervised": True,
                "teacher_update": "ema",
                "distill": {"mode": "none"},
                "align": dict(_NO_ALIGN),
                "pipelines": {"source": STRONG, "target": STRONG},
                "burn_in": {"mode": "none"},
            },
            reference=True,
        ),
        MethodPreset(
            "mean_teacher_base",
            "Weak burn-in with early stopping, hard pseudo-labels at 0.8, equal batch ratio",
            {
                "target_fraction": 0.5,
                "teacher_update": "ema",
                "distill": {"mode": "hard", "confidence_threshold": 0.8},
                "align": dict(_NO_ALIGN),
                "pipelines": {"source": WEAK, "target": STRONG},
                "burn_in": {"mode": "robust", "pipeline": "weak", "use_ema": False},
            },
        ),
        MethodPreset(
            "sada_style",
            "Image and instance level adversarial alignment, no teacher",
            {
                "target_fraction": 0.5,
                "teacher_update": "none",
                "distill": {"mode": "none"},
                "align": {"image_level": True, "instance_level": True, "img2img": False},
                "pipelines": {"source": WEAK, "target": WEAK},
                "burn_in": {"mode": "none"},
            },
        ),
        MethodPreset(
            "umt_style",
            "Image-to-image translation with hard pseudo-labels",
            {
                "target_fraction": 0.5,
                "teacher_update": "ema",
                "distill": {"mode": "hard"},
                "align": {"image_level": False, "instance_level": False, "img2img": True},
                "pipelines": {"source": WEAK, "target": WEAK + ["croppad", "color_jitter"]},
                "burn_in": {"mode": "none"},
            },
        ),
        MethodPreset(
            "mic_style",
            "Masked target images, hard pseudo-labels, image and instance alignment",
            {
                "target_fraction": 0.5,
                "teacher_update": "ema",
                "distill": {"mode": "hard"},
                "align": {"image_level": True, "instance_level": True, "img2img": False},
                "pipelines": {"source": WEAK, "target": WEAK + ["color_jitter", "mic"]},
                "burn_in": {"mode": "none"},
            },
        ),
        MethodPreset(
            "at_style",
            "Fixed burn-in, half-batch source jitter and cutout, image alignment",
            {
                "target_fraction": 0.3,
                "teacher_update": "ema",
                "distill": {"mode": "hard"},
                "align": {"image_level": True, "instance_level": False, "img2img": False},
                "pipelines": {"source": WEAK, "source_half": WEAK + ["color_jitter", "cutout"], "target": STRONG},
                "burn_in": {"mode": "fixed", "pipeline": "source", "use_ema": False},
            },
        ),
        MethodPreset(
            "aldi_pp",
            "Robust burn-in, strong source and target augmentations, soft distillation",
            {
                "target_fraction": 0.5,
                "teacher_update": "ema",
                "distill": {"mode": "soft"},
                "align": dict(_NO_ALIGN),
                "pipelines": {"source": STRONG, "target": STRONG + ["mic"]},
                "burn_in": {"mode": "robust", "pipeline": "strong", "use_ema": True},
            },
        ),
    )
}

ABLATIONS = {
    "batch_ratio": None,
    "target_augs": {
        "weak": {"pipelines": {"target": WEAK}},
        "jitter": {"pipelines": {"target": WEAK + ["color_jitter"]}},
        "jitter_erase": {"pipelines": {"target": WEAK + ["color_jitter", "cutout"]}},
        "jitter_mic": {"pipelines": {"target": WEAK + ["color_jitter", "mic"]}},
    },
    "source_augs": {
        "weak": {"pipelines": {"source": WEAK, "source_half": None}},
        "strong": {"pipelines": {"source": STRONG, "source_half": None}},
        "weak_strong": {"pipelines": {"source": WEAK, "source_half": STRONG}},
    },
    "distill_mode": {
        "none": {"distill": {"mode": "none"}},
        "hard": {"distill": {"mode": "hard"}},
        "soft": {"distill": {"mode": "soft"}},
    },
    "burn_in": {
        "none": {"burn_in": {"mode": "none"}},
        "fixed": {"burn_in": {"mode": "fixed", "pipeline": "source", "use_ema": False}},
        "robust": {"burn_in": {"mode": "robust", "pipeline": "strong", "use_ema": True}},
    },
    "alignment": {
        "none": {"align": dict(_NO_ALIGN)},
        "image": {"align": {"image_level": True, "instance_level": False, "img2img": False}},
        "instance": {"align": {"image_level": False, "instance_level": True, "img2img": False}},
        "both": {"align": {"image_level": True, "instance_level": True, "img2img": False}},
    },
    "align_distill": {
        "align_only": {"distill": {"mode": "none"}, "align": {"image_level": True, "img2img": False}},
        "distill_only": {"distill": {"mode": "hard"}, "align": dict(_NO_ALIGN)},
        "both": {"distill": {"mode": "hard"}, "align": {"image_level": True, "img2img": False}},
    },
    "teacher_update": {
        "none": {"teacher_update": "none"},
        "student_is_teacher": {"teacher_update": "student_is_teacher"},
        "ema": {"teacher_update": "ema"},
    },
}


def merge_overrides(tree, overrides):
    """ Merge nested ``overrides`` into the mapping ``tree``, in place. """
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(tree.get(key), dict):
            merge_overrides(tree[key], value)
        else:
            tree[key] = copy.deepcopy(value)
    return tree


def source_only_variant(preset):
    """ Source-only preset keeping every component of ``preset`` that does
    not need target data (augmentations, burn-in, teacher update).
    """
    preset = lookup_preset(preset)
    overrides = copy.deepcopy(preset.overrides)
    overrides.update(
        {
            "target_fraction": 0.0,
            "target_supervised": False,
            "distill": {"mode": "none"},
            "align": dict(_NO_ALIGN),
        }
    )
    return MethodPreset(
        "source_only:%s" % preset.name,
        "Source-only counterpart of %s" % preset.name,
        overrides,
        reference=True,
    )


def lookup_preset(preset):
    if isinstance(preset, MethodPreset):
        return preset
    if isinstance(preset, str) and preset.startswith("source_only:"):
        return source_only_variant(preset.split(":", 1)[1])
    if preset not in PRESETS:
        raise PresetError("unknown preset %r (one of %s)" % (preset, ", ".join(PRESETS)))
    return PRESETS[preset]


def resolve_preset(preset, overrides=None, base=None):
    """ Resolve a preset to a complete :class:`TrainConfig`.

    :param preset: a preset name (``source_only:<method>`` allowed), a
        :class:`MethodPreset`, or None for the base config alone.
    :param overrides: dotted-key overrides applied last.
    :param base: a :class:`TrainConfig` or mapping the preset applies to.
    """
    if base is None:
        tree = to_dict(TrainConfig())
    else:
        tree = merge_overrides(to_dict(TrainConfig()), to_dict(base))
    if preset is not None:
        merge_overrides(tree, lookup_preset(preset).overrides)
    config = from_dict(TrainConfig, tree)
    return apply_overrides(config, overrides)


def ablation_overrides(axis, value):
    """ Nested overrides realizing one value of an ablation axis. """
    if axis not in ABLATIONS:
        raise ConfigError("unknown ablation axis %r (one of %s)" % (axis, ", ".join(ABLATIONS)), "axis")
    if axis == "batch_ratio":
        ratio = float(value)
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError("batch ratio should be in [0, 1], got %r" % value, "values")
        return {"target_fraction": ratio}
    choices = ABLATIONS[axis]
    if value not in choices:
        raise ConfigError(
            "unknown %s value %r (one of %s)" % (axis, value, ", ".join(choices)), "values"
        )
    return copy.deepcopy(choices[value])


class RecordStream:
    """ Infinite sequence of a dataset's records, reshuffled every epoch with
    a permutation seeded by ``(seed, epoch)``. Stateless: any position can be
    read directly.
    """

    def __init__(self, dataset, seed):
        self.dataset = dataset
        self.seed = int(seed)
        self._permutations = {}

    def __len__(self):
        return len(self.dataset)

    def _permutation(self, epoch):
        if epoch not in self._permutations:
            self._permutations[epoch] = np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))
        return self._permutations[epoch]

    def take(self, start, count):
        n = len(self.dataset)
        if count and not n:
            raise TrainerError("cannot draw records from an empty dataset")
        out = []
        for position in range(start, start + count):
            epoch, offset = divmod(position, n)
            out.append(self.dataset[int(self._permutation(epoch)[offset])])
        return out


@dataclasses.dataclass(frozen=True, eq=False)
class Minibatch:
    step: int
    source: Tuple[Any, ...]
    target: Tuple[Any, ...]

    @property
    def counts(self):
        return len(self.source), len(self.target)


def batch_counts(batch_size, target_fraction):
    """ ``(n_source, n_target)``, the target count rounded half up. """
    n_target = int(math.floor(target_fraction * batch_size + 0.5))
    return batch_size - n_target, n_target


def compose_batch(src_stream, tgt_stream, batch_size, target_fraction, step):
    """ The ``step``-th minibatch: ``round((1 - f) B)`` source records and
    ``round(f B)`` target records (round half up on the target count).

    :raises TrainerError: if target records are needed but the target stream
        is empty.
    """
    n_source, n_target = batch_counts(batch_size, target_fraction)
    if n_target and (tgt_stream is None or not len(tgt_stream)):
        raise TrainerError("target_fraction %r needs target data" % target_fraction)
    if n_source and (src_stream is None or not len(src_stream)):
        raise TrainerError("source records requested from an empty source dataset")
    source = src_stream.take(step * n_source, n_source) if n_source else []
    target = tgt_stream.take(step * n_target, n_target) if n_target else []
    return Minibatch(step, tuple(source), tuple(target))


def evaluate(params, dataset, config, max_images=None):
    """ AP50 of ``params`` on a labeled dataset. """
    records = list(dataset)[:max_images] if max_images else list(dataset)
    predictions = [(r.id, infer(params, r, config)) for r in records]
    truth = [(r.id, r.annotations) for r in records]
    return ap50(predictions, truth, config.num_classes)


@dataclasses.dataclass(frozen=True, eq=False)
class BurninResult:
    """ :attr ema_params: the EMA copy (equal to ``params`` without EMA). """

    params: ParameterSet
    ema_params: ParameterSet
    val_curve: Tuple[Tuple[int, float], ...]
    stop_iteration: int
    mode: str = "none"

    @property
    def initialization(self):
        """ Parameters both student and teacher start from. """
        return self.ema_params if self.mode == "robust" else self.params


@dataclasses.dataclass(eq=False)
class TrainState:
    """ Mutable training state. ``student`` and discriminator tensors are the
    optimizer's leaves; ``teacher`` holds detached snapshots.
    """

    iteration: int
    student: ParameterSet
    teacher: ParameterSet
    discriminators: Dict[str, ParameterSet]
    optimizer: torch.optim.Optimizer


@dataclasses.dataclass(eq=False)
class TrainingRun:
    """ Outcome of :func:`run_training`. ``final_teacher`` is the kept model:
    the teacher for EMA runs, otherwise the student.
    """

    final_teacher: ParameterSet
    student: ParameterSet
    teacher: ParameterSet
    metric_curve: List[Tuple[int, float]]
    loss_log: List[Tuple[int, str, float]]
    config: TrainConfig
    burn_in: Optional[BurninResult] = None
    batch_log: List[Tuple[int, int, int]] = dataclasses.field(default_factory=list)
    timings: List[Tuple[int, float]] = dataclasses.field(default_factory=list)


def _pipeline(items, designation=augment.Designation.STRONG):
    return augment.build_pipeline(list(items), designation)


def _mean(values):
    return sum(values) / len(values)


class Trainer:
    """ Holds what stays fixed during a run: config, data streams, pipelines
    and fill values. :meth:`train_step` turns a state and a minibatch into
    the next state.
    """

    def __init__(self, config, pair):
        self.config = config
        self.pair = pair
        det = config.detector
        if pair.num_classes != det.num_classes:
            raise TrainerError(
                "dataset has %d classes, detector.num_classes is %d" % (pair.num_classes, det.num_classes)
            )
        if config.target_supervised:
            if pair.target_train_labeled is None:
                raise PresetError("supervised target training needs the target_train_labeled split")
            self.target_dataset = pair.target_train_labeled
        else:
            self.target_dataset = pair.target_train
        self.source_stream = RecordStream(pair.source_train, config.seed)
        self.target_stream = RecordStream(self.target_dataset, config.seed + 1)
        self.source_fill = pair.source_train.mean_pixel()
        self.target_fill = self.target_dataset.mean_pixel()

        pipes = config.pipelines
        self.source_pipeline = _pipeline(pipes.source)
        self.source_half_pipeline = _pipeline(pipes.source_half) if pipes.source_half is not None else None
        self.target_pipeline = _pipeline(pipes.target)
        self.weak_pipeline = _pipeline(pipes.weak, augment.Designation.WEAK)
        if config.distill.mode != "none":
            prefix = len(self.weak_pipeline)
            if tuple(self.target_pipeline.kinds[:prefix]) != self.weak_pipeline.kinds:
                raise ConfigError("the weak pipeline should be a prefix of the target pipeline", "pipelines.target")
            extras = self.target_pipeline.kinds[prefix:]
            if config.distill.mode == "soft" and any(k.geometric for k in extras):
                raise ConfigError(
                    "soft distillation needs aligned views: no geometric transform after the weak prefix",
                    "pipelines.target",
                )

        self.translated = None
        if config.align.img2img:
            if not config.align.translated_root:
                raise align.AlignmentError("img2img alignment needs align.translated_root")
            self.translated = align.TranslatedPair.from_root(config.align.translated_root)

    # state

    def initial_state(self, params):
        config = self.config
        student = params.trainable()
        discriminators = {}
        det = config.detector
        if config.align.image_level:
            discriminators["image"] = align.init_image_discriminator(
                det.feature_channels, config.align.image_hidden, config.seed + 101, det.torch_dtype
            ).trainable()
        if config.align.instance_level:
            discriminators["instance"] = align.init_instance_discriminator(
                det.roi_hidden, config.align.instance_hidden, config.seed + 102, det.torch_dtype
            ).trainable()
        groups = [{"params": student.tensors(), "lr": config.learning_rate}]
        disc_tensors = [t for d in discriminators.values() for t in d.tensors()]
        if disc_tensors:
            groups.append({"params": disc_tensors, "lr": config.learning_rate * config.align.disc_lr_ratio})
        optimizer = torch.optim.SGD(groups, lr=config.learning_rate, momentum=config.momentum)
        return TrainState(0, student, params.detach(), discriminators, optimizer)

    def learning_rate_at(self, iteration):
        warmup = self.config.warmup_iterations
        factor = min(1.0, (iteration + 1) / warmup) if warmup else 1.0
        return self.config.learning_rate * factor

    # data

    def next_batch(self, step):
        return compose_batch(
            self.source_stream,
            self.target_stream,
            self.config.batch_size,
            self.config.target_fraction,
            step,
        )

    def _seed(self, step, role, slot):
        return [self.config.seed, step, role, slot]

    def source_views(self, batch):
        records = list(batch.source)
        if self.translated is not None:
            records = align.substitute_translated(records, self.translated, "src_to_tgtlike")
        half = len(records) - len(records) // 2
        views = []
        for slot, record in enumerate(records):
            pipeline = self.source_pipeline
            if self.source_half_pipeline is not None and slot >= half:
                pipeline = self.source_half_pipeline
            view, _ = augment.apply_pipeline(record, pipeline, self._seed(batch.step, 0, slot), self.source_fill)
            views.append(view)
        return views

    def target_views(self, batch):
        """ ``(ViewPair, teacher_view)`` per target record. The teacher sees
        the weak view, or its source-like translation under img2img.
        """
        out = []
        for slot, record in enumerate(batch.target):
            pair = augment.pair_views(
                record, self.weak_pipeline, self.target_pipeline, self._seed(batch.step, 1, slot), self.target_fill
            )
            teacher_view = pair.weak
            if self.translated is not None:
                (translated,) = align.substitute_translated([record], self.translated, "tgt_to_srclike")
                teacher_view = augment.replay(translated, pair.weak_applied)
            out.append((pair, teacher_view))
        return out

    # step

    def train_step(self, state, batch, total_iterations=None):
        """ One optimization step on ``batch``; returns ``(state, losses)``
        with ``losses`` mapping every enabled term to its float value.
        """
        config = self.config
        det = config.detector
        mode = config.distill.mode
        step = batch.step
        if total_iterations is None:
            total_iterations = config.iterations

        terms = defaultdict(list)
        image_features = []
        instance_features = []

        for slot, view in enumerate(self.source_views(batch)):
            out, plan = training_forward(state.student, view, view.annotations, det, self._seed(step, 2, slot))
            for name, value in supervised_losses(out, plan, det).items():
                terms[name].append(value)
            image_features.append((out.features, 0))
            instance_features.append((out.roi.features, 0))

        if batch.target:
            for slot, (pair, teacher_view) in enumerate(self.target_views(batch)):
                seed = self._seed(step, 3, slot)
                if config.target_supervised:
                    view = pair.strong
                    out, plan = training_forward(state.student, view, view.annotations, det, seed)
                    for name, value in supervised_losses(out, plan, det).items():
                        terms[name].append(value)
                    continue
                labels = ()
                if mode != "none":
                    labels = teacher_pseudo_labels(state.teacher, teacher_view, det, config.distill)
                    if not pair.aligned:
                        labels = augment.remap_annotations(
                            labels, pair.weak.height, pair.weak.width, pair.strong_extras
                        )
                if mode == "none" and not config.align.adversarial:
                    continue
                out, plan = training_forward(state.student, pair.strong, labels, det, seed)
                if mode == "hard":
                    bundle = hard_distill_losses(out, plan, det)
                elif mode == "soft":
                    targets = build_soft_targets(state.teacher, teacher_view, plan, config.distill, det)
                    bundle = soft_distill_losses(out, plan, targets, config.distill, det.smooth_l1_beta)
                else:
                    bundle = {}
                for name, value in bundle.items():
                    terms[name].append(value)
                image_features.append((out.features, 1))
                instance_features.append((out.roi.features, 1))

        losses = {name: _mean(values) for name, values in terms.items()}
        if config.align.adversarial and any(label == 1 for _, label in image_features):
            weight = align.adv_weight_at(config.align, step, total_iterations)
            if config.align.image_level:
                disc = state.discriminators["image"]
                logits = torch.cat(
                    [align.image_discriminator(align.grad_reverse(f, weight), disc) for f, _ in image_features]
                )
                labels = align.DomainBatchLabels(tuple(label for _, label in image_features))
                losses["loss_align_img"] = align.dann_loss(logits, labels)
            if config.align.instance_level:
                disc = state.discriminators["instance"]
                logits = torch.cat(
                    [align.instance_discriminator(align.grad_reverse(f, weight), disc) for f, _ in instance_features]
                )
                labels = align.DomainBatchLabels(
                    tuple(label for f, label in instance_features for _ in range(f.shape[0]))
                )
                losses["loss_align_inst"] = align.dann_loss(logits, labels)

        objective = [v for k, v in losses.items() if not k.startswith("loss_distill_")]
        values = {name: float(value.detach()) for name, value in losses.items()}
        if not objective:
            return dataclasses.replace(state, iteration=step + 1), values
        total = sum(objective)
        if not math.isfinite(float(total.detach())):
            raise NonFiniteLossError(step, values)

        lr = self.learning_rate_at(step)
        for index, group in enumerate(state.optimizer.param_groups):
            group["lr"] = lr if index == 0 else lr * config.align.disc_lr_ratio
        state.optimizer.zero_grad()
        total.backward()
        state.optimizer.step()

        teacher = state.teacher
        if config.teacher_update == "ema":
            teacher = ema_update(teacher, state.student, config.ema.alpha)
        elif config.teacher_update == "student_is_teacher":
            teacher = state.student.detach()
        return dataclasses.replace(state, iteration=step + 1, teacher=teacher), values

    def kept(self, state):
        return state.teacher if self.config.kept_model == "teacher" else state.student.detach()


def train_step(trainer, state, batch):
    """ Module-level alias of :meth:`Trainer.train_step`. """
    return trainer.train_step(state, batch)


def _initial_params(config):
    params = init_params(config.detector, config.seed)
    if config.init_params_file:
        params = load_params(config.init_params_file, expected=params)
        logger.info("initialized from %s", config.init_params_file)
    return params


def burn_in_config(config, mode=None):
    """ Source-only training config of the burn-in stage.

    The source half-batch pipeline is kept only with ``pipeline="source"``.
    """
    settings = config.burn_in
    mode = mode or settings.mode
    if settings.pipeline == "source":
        source, source_half = list(config.pipelines.source), config.pipelines.source_half
    else:
        source = list(config.pipelines.weak) if settings.pipeline == "weak" else STRONG
        source_half = None
    return from_dict(
        TrainConfig,
        merge_overrides(
            to_dict(config),
            {
                "target_fraction": 0.0,
                "target_supervised": False,
                "teacher_update": "ema" if settings.use_ema else "none",
                "ema": {"enabled": True},
                "distill": {"mode": "none"},
                "align": dict(_NO_ALIGN),
                "pipelines": {"source": source, "source_half": None if source_half is None else list(source_half)},
                "iterations": settings.iterations if mode == "fixed" else settings.max_iterations,
            },
        ),
    )


def burn_in(pair, config, mode=None, progress=False):
    """ Supervised source pre-training.

    :param mode: overrides ``config.burn_in.mode``.
    :raises TrainerError: for robust mode without a validation split.
    """
    settings = config.burn_in
    mode = mode or settings.mode
    params = _initial_params(config)
    if mode == "none":
        return BurninResult(params, params, (), 0, mode)
    if mode not in BURN_IN_MODES:
        raise ConfigError("should be one of %s" % ", ".join(BURN_IN_MODES), "burn_in.mode")

    source, validation = pair.source_train, None
    if mode == "robust":
        if not settings.val_fraction:
            raise TrainerError("robust burn-in needs a validation split (burn_in.val_fraction > 0)")
        source, validation = pair.source_train.split(settings.val_fraction, config.seed)

    sub = burn_in_config(config, mode)
    sub_pair = dataclasses.replace(pair, source_train=source)
    trainer = Trainer(sub, sub_pair)
    state = trainer.initial_state(params)

    curve, best, best_params, misses = [], -1.0, None, 0
    total = sub.iterations
    bar = tqdm(range(total), desc="burn-in", disable=not progress, leave=False)
    for it in bar:
        state, _ = trainer.train_step(state, trainer.next_batch(it), total)
        if mode == "robust" and (it + 1) % settings.eval_every == 0:
            snapshot = trainer.kept(state)
            value = evaluate(snapshot, validation, config.detector, config.max_eval_images).ap50
            curve.append((it + 1, value))
            logger.info("burn-in iteration %d: validation AP50 %.4f", it + 1, value)
            if value > best:
                best, best_params, misses = value, snapshot, 0
            else:
                misses += 1
                if misses >= settings.patience:
                    logger.info("burn-in stopped early at iteration %d", it + 1)
                    return BurninResult(state.student.detach(), best_params, tuple(curve), it + 1, mode)
    if mode == "robust":
        logger.warning("robust burn-in reached max_iterations=%d without stopping", total)
        if best_params is None:
            best_params = trainer.kept(state)
        return BurninResult(state.student.detach(), best_params, tuple(curve), total, mode)
    ema_params = state.teacher if settings.use_ema else state.student.detach()
    return BurninResult(state.student.detach(), ema_params, (), total, mode)


def write_curve_csv(rows, path):
    """ ``iteration,name,value`` rows. """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "name", "value"])
        for iteration, name, value in rows:
            writer.writerow([iteration, name, repr(float(value))])


def _momentum_buffers(state):
    buffers = []
    groups = state.optimizer.param_groups
    for g, group in enumerate(groups):
        for i, tensor in enumerate(group["params"]):
            buffer = state.optimizer.state.get(tensor, {}).get("momentum_buffer")
            if buffer is not None:
                buffers.append(("%d.%d" % (g, i), buffer.detach().clone()))
    return ParameterSet(buffers)


def save_state(state, directory, extra=None):
    """ Checkpoint a :class:`TrainState` (parameters, teacher,
    discriminators, momentum buffers) plus JSON-serializable ``extra``.
    """
    os.makedirs(directory, exist_ok=True)
    save_params(state.student.detach(), os.path.join(directory, "student.params"))
    save_params(state.teacher, os.path.join(directory, "teacher.params"))
    for name, disc in state.discriminators.items():
        save_params(disc.detach(), os.path.join(directory, "disc_%s.params" % name))
    save_params(_momentum_buffers(state), os.path.join(directory, "momentum.params"))
    with open(os.path.join(directory, "state.json"), "w") as f:
        json.dump({"iteration": state.iteration, "extra": extra or {}}, f)


def load_state(trainer, directory):
    """ Rebuild a :class:`TrainState` saved by :func:`save_state`.

    :returns: ``(state, extra)``.
    """
    with open(os.path.join(directory, "state.json")) as f:
        meta = json.load(f)
    student = load_params(os.path.join(directory, "student.params"))
    state = trainer.initial_state(student)
    teacher = load_params(os.path.join(directory, "teacher.params"), expected=student)
    for name, disc in state.discriminators.items():
        loaded = load_params(os.path.join(directory, "disc_%s.params" % name), expected=disc)
        with torch.no_grad():
            for key, tensor in disc.items():
                tensor.copy_(loaded[key])
    buffers = load_params(os.path.join(directory, "momentum.params"))
    for key, buffer in buffers.items():
        g, i = (int(v) for v in key.split("."))
        tensor = state.optimizer.param_groups[g]["params"][i]
        state.optimizer.state[tensor]["momentum_buffer"] = buffer.clone()
    state = dataclasses.replace(state, iteration=meta["iteration"], teacher=teacher)
    return state, meta["extra"]


def _checkpoint(run_dir):
    return os.path.join(run_dir, "checkpoint")


def _write_logs(run_dir, run):
    write_curve_csv(run.loss_log, os.path.join(run_dir, "loss.csv"))
    write_curve_csv([(it, "ap50", v) for it, v in run.metric_curve], os.path.join(run_dir, "metrics.csv"))
    write_curve_csv([(it, "seconds", s) for it, s in run.timings], os.path.join(run_dir, "timing.csv"))
    with open(os.path.join(run_dir, "batches.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "source", "target"])
        writer.writerows(run.batch_log)


def run_training(preset, pair, overrides=None, run_dir=None, resume=False, progress=False, config=None):
    """ Burn-in then self-training, evaluating the kept model on
    ``target_test`` at iteration 0, every ``eval_every`` iterations and at the
    end.

    :param preset: preset name or :class:`MethodPreset` (ignored if
        ``config`` is given).
    :param run_dir: when given, checkpoints and CSV logs are written there.
    :param resume: continue from ``<run_dir>/checkpoint`` if present.
    """
    if config is None:
        config = resolve_preset(preset, overrides)
    trainer = Trainer(config, pair)
    det = config.detector

    run = TrainingRun(None, None, None, [], [], config)
    state = None
    if resume and run_dir and os.path.isfile(os.path.join(_checkpoint(run_dir), "state.json")):
        state, extra = load_state(trainer, _checkpoint(run_dir))
        run.metric_curve = [tuple(p) for p in extra["metric_curve"]]
        run.loss_log = [tuple(r) for r in extra["loss_log"]]
        run.batch_log = [tuple(r) for r in extra["batch_log"]]
        run.timings = [tuple(r) for r in extra["timings"]]
        logger.info("resumed from iteration %d", state.iteration)
    else:
        run.burn_in = burn_in(pair, config, progress=progress)
        state = trainer.initial_state(run.burn_in.initialization)

    started = time.perf_counter()
    offset = run.timings[-1][1] if run.timings else 0.0

    def record_eval(iteration):
        result = evaluate(trainer.kept(state), pair.target_test, det, config.max_eval_images)
        run.metric_curve.append((iteration, result.ap50))
        run.timings.append((iteration, offset + time.perf_counter() - started))
        logger.info("iteration %d: target AP50 %.4f", iteration, result.ap50)

    if not run.metric_curve:
        record_eval(0)
    bar = tqdm(range(state.iteration, config.iterations), desc="train", disable=not progress)
    for it in bar:
        batch = trainer.next_batch(it)
        run.batch_log.append((it, *batch.counts))
        state, losses = trainer.train_step(state, batch)
        run.loss_log.extend((it, name, value) for name, value in sorted(losses.items()))
        last = it + 1 == config.iterations
        if (it + 1) % config.eval_every == 0 or last:
            record_eval(it + 1)
            if run_dir:
                extra = {
                    "metric_curve": run.metric_curve,
                    "loss_log": run.loss_log,
                    "batch_log": run.batch_log,
                    "timings": run.timings,
                }
                save_state(state, _checkpoint(run_dir), extra)

    run.student = state.student.detach()
    run.teacher = state.teacher
    run.final_teacher = trainer.kept(state)
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        save_params(run.final_teacher, os.path.join(run_dir, "final.params"))
        _write_logs(run_dir, run)
    return run

""":mod:`daodet`
================

Domain-adaptive object detection: align and distill a miniature two-stage
detector from a labeled source domain to an unlabeled target domain.

"""
import warnings

__version__ = "0.3"

__all__ = [
    "BoundingBox",
    "Annotation",
    "ImageRecord",
    "DetectionDataset",
    "DomainPair",
    "DetectorConfig",
    "TrainConfig",
    "PRESETS",
    "resolve_preset",
    "run_training",
    "ap50",
    "RunCache",
    "MemoryRunCache",
    "LeveldbRunCache",
]

from daodet.datamodel import Annotation, BoundingBox, DetectionDataset, DomainPair, ImageRecord
from daodet.detector import DetectorConfig
from daodet.evalmetrics import ap50
from daodet.trainer import PRESETS, TrainConfig, resolve_preset, run_training

from daodet import runcache as _runcache
from daodet.runcache import MemoryRunCache

LeveldbRunCache = None
if _runcache.plyvel is None:
    warnings.warn("Unable to import plyvel. Finished runs will be cached in a flat file.")
else:
    LeveldbRunCache = _runcache.LeveldbRunCache
RunCache = LeveldbRunCache or MemoryRunCache

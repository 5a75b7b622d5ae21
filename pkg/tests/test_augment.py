import numpy as np
import pytest

from daodet.augment import (
    STRONG_ITEMS,
    WEAK_ITEMS,
    ColorJitter,
    CropPad,
    Cutout,
    Designation,
    HFlip,
    MICMask,
    MultiScale,
    PipelineError,
    apply_pipeline,
    apply_transform,
    build_pipeline,
    pair_views,
    paired_views,
    remap_annotations,
    replay,
)
from daodet.config import ConfigError
from daodet.datamodel import Annotation, BoundingBox

from utils import make_record, tiny_pair


def textured_record(boxes=((2, 4, 10, 12), (16, 16, 30, 28)), seed=0):
    record = make_record(boxes=boxes, classes=[0, 1][: len(boxes)])
    pixels = np.round(np.random.default_rng(seed).uniform(0, 1, record.pixels.shape) * 255) / 255
    return record.replace(pixels=pixels)


def test_build_pipeline_items():
    pipeline = build_pipeline(["hflip", {"kind": "cutout", "count": 2}, MICMask(patch_size=4)])
    assert [k.name for k in pipeline.kinds] == ["hflip", "cutout", "mic"]
    assert pipeline.kinds[1] == Cutout(count=2)
    assert len(build_pipeline(STRONG_ITEMS)) == 4
    assert build_pipeline(None).kinds == ()


def test_build_pipeline_errors():
    with pytest.raises(ConfigError):
        build_pipeline(["rotate"])
    with pytest.raises(ConfigError):
        build_pipeline([{"kind": "cutout", "size": 3}])
    with pytest.raises(ConfigError):
        build_pipeline([3])
    with pytest.raises(ConfigError):
        build_pipeline([{"kind": "hflip", "probability": 2.0}])
    with pytest.raises(PipelineError):
        build_pipeline(["hflip", "color_jitter"], Designation.WEAK)
    assert build_pipeline(WEAK_ITEMS, Designation.WEAK).designation is Designation.WEAK


def test_apply_pipeline_is_seeded_and_replayable():
    record = textured_record()
    pipeline = build_pipeline(list(STRONG_ITEMS) + ["croppad", "mic"])
    out1, applied1 = apply_pipeline(record, pipeline, [3, 1], fill_value=0.4)
    out2, applied2 = apply_pipeline(record, pipeline, [3, 1], fill_value=0.4)
    assert np.array_equal(out1.pixels, out2.pixels)
    assert out1.annotations == out2.annotations
    assert applied1 == applied2
    again = replay(record, applied1)
    assert np.array_equal(again.pixels, out1.pixels)
    assert again.annotations == out1.annotations
    other, _ = apply_pipeline(record, pipeline, [3, 2], fill_value=0.4)
    assert not np.array_equal(other.pixels, out1.pixels)
    assert out1.pixels.min() >= 0.0 and out1.pixels.max() <= 1.0
    # input untouched
    assert np.array_equal(record.pixels, textured_record().pixels)


def test_hflip_moves_boxes():
    record = textured_record()
    out = apply_transform(record, HFlip(), {"flip": True})
    assert np.array_equal(out.pixels, record.pixels[:, ::-1])
    assert out.annotations[0] == Annotation(BoundingBox(22, 4, 30, 12), 0)
    same = apply_transform(record, HFlip(), {"flip": False})
    assert same.annotations == record.annotations


def test_multiscale_scales_boxes():
    record = textured_record()
    kind = MultiScale(2.0, 2.0)
    params = kind.sample(32, 32, 3, np.random.default_rng(0), 0.5)
    out = apply_transform(record, kind, params)
    assert (out.height, out.width) == (64, 64)
    assert out.annotations[0] == Annotation(BoundingBox(4, 8, 20, 24), 0)


def test_multiscale_keeps_minimum_side():
    kind = MultiScale(0.25, 0.25)
    params = kind.sample(32, 32, 3, np.random.default_rng(0), 0.5)
    assert (params["height"], params["width"]) == (16, 16)
    out = apply_transform(textured_record(), kind, params)
    assert out.pixels.shape == (16, 16, 3)


def test_croppad_shifts_and_clips():
    record = textured_record()
    params = {"dx": 4, "dy": 0, "fill": 0.25}
    out = apply_transform(record, CropPad(), params)
    assert out.pixels.shape == record.pixels.shape
    assert np.array_equal(out.pixels[:, :28], record.pixels[:, 4:])
    assert np.all(out.pixels[:, 28:] == 0.25)
    assert out.annotations[0] == Annotation(BoundingBox(0, 4, 6, 12), 0)
    gone = apply_transform(record, CropPad(), {"dx": -31, "dy": -31, "fill": 0.0})
    assert len(gone.annotations) == 0


def test_photometric_kinds_keep_boxes():
    record = textured_record()
    rng = np.random.default_rng(5)
    for kind in (ColorJitter(), Cutout(), MICMask()):
        params = kind.sample(32, 32, 3, rng, 0.3)
        out = apply_transform(record, kind, params)
        assert out.annotations == record.annotations
        assert out.pixels.shape == record.pixels.shape


def test_cutout_fills_rectangles():
    record = textured_record()
    kind = Cutout(max_fraction=0.25, count=3)
    params = kind.sample(32, 32, 3, np.random.default_rng(1), 0.3)
    assert 1 <= len(params["rects"]) <= 3
    out = apply_transform(record, kind, params)
    for x0, y0, w, h in params["rects"]:
        assert w * h <= 0.25 * 32 * 32
        assert np.all(out.pixels[y0 : y0 + h, x0 : x0 + w] == 0.3)


def test_mic_mask_patches():
    kind = MICMask()
    assert kind.resolve_patch_size(32, 32) == 3
    params = kind.sample(32, 32, 3, np.random.default_rng(0), 0.5)
    # an 11 x 11 grid, half of it masked
    assert params["cols"] == 11
    assert len(params["patches"]) == 61
    out = apply_transform(textured_record(), kind, params)
    for index in params["patches"]:
        row, col = divmod(index, 11)
        assert np.all(out.pixels[row * 3 : row * 3 + 3, col * 3 : col * 3 + 3] == 0.0)
    with pytest.raises(PipelineError):
        MICMask(patch_size=40).sample(32, 32, 3, np.random.default_rng(0), 0.5)


def test_pair_views_share_weak_draws():
    record = textured_record()
    weak = build_pipeline(WEAK_ITEMS, Designation.WEAK)
    strong = build_pipeline(list(WEAK_ITEMS) + ["color_jitter", "mic"])
    views = pair_views(record, weak, strong, [7, 0], fill_value=0.5)
    alone, applied = apply_pipeline(record, weak, [7, 0], fill_value=0.5)
    assert np.array_equal(views.weak.pixels, alone.pixels)
    assert views.weak_applied == tuple(applied)
    assert views.aligned
    assert views.strong.pixels.shape == views.weak.pixels.shape
    assert views.strong.annotations == views.weak.annotations
    assert [s.kind.name for s in views.strong_extras] == ["color_jitter", "mic"]
    weak_view, strong_view = paired_views(record, weak, strong, [7, 0], fill_value=0.5)
    assert np.array_equal(strong_view.pixels, views.strong.pixels)


def test_pair_views_remap_geometric_extras():
    record = textured_record()
    weak = build_pipeline(WEAK_ITEMS, Designation.WEAK)
    strong = build_pipeline(list(WEAK_ITEMS) + [{"kind": "croppad", "fraction": 0.25}])
    for seed in range(5):
        views = pair_views(record, weak, strong, seed)
        assert not views.aligned
        remapped = remap_annotations(
            views.weak.annotations, views.weak.height, views.weak.width, views.strong_extras
        )
        assert remapped == views.strong.annotations


def test_pair_views_prefix_check():
    weak = build_pipeline(["hflip"], Designation.WEAK)
    strong = build_pipeline(["multiscale", "hflip"])
    with pytest.raises(PipelineError):
        pair_views(textured_record(), weak, strong, 0)


def test_pipelines_on_synthetic_records():
    pair = tiny_pair()
    strong = build_pipeline(list(STRONG_ITEMS) + ["mic"])
    for i, record in enumerate(pair.source_train):
        out, _ = apply_pipeline(record, strong, i, pair.source_train.mean_pixel())
        for ann in out.annotations:
            assert 0 <= ann.box.x1 < ann.box.x2 <= out.width
            assert 0 <= ann.box.y1 < ann.box.y2 <= out.height

import csv
import json
import os

import numpy as np
import pytest

from daodet.datamodel import Annotation, BoundingBox, Domain, Prediction
from daodet.detector import init_params
from daodet.evalmetrics import (
    EvaluationError,
    FeatureSample,
    ap50,
    convergence_time,
    extract_features,
    frechet_dissimilarity,
    load_features,
    pca_embed,
    save_features,
    write_embedding_csv,
)

from utils import box_iou, brute_force_ap50, float_equal, random_boxes, tiny_detector_config


def _jitter(rng, box):
    x1, y1, x2, y2 = box
    dx, dy = rng.uniform(-2, 2, 2)
    sw, sh = rng.uniform(0.8, 1.2, 2)
    cx, cy = (x1 + x2) / 2 + dx, (y1 + y2) / 2 + dy
    w, h = (x2 - x1) * sw, (y2 - y1) * sh
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _random_instance(rng, num_classes=2):
    ground_truth, predictions = {}, {}
    for image in range(int(rng.integers(1, 6))):
        image_id = "img%d" % image
        gts = [(b, int(rng.integers(0, num_classes))) for b in random_boxes(rng, int(rng.integers(0, 6)), min_side=2.0)]
        preds = [(_jitter(rng, b), k) for b, k in gts if rng.random() < 0.7]
        preds += [(b, int(rng.integers(0, num_classes))) for b in random_boxes(rng, int(rng.integers(0, 4)), min_side=2.0)]
        preds = preds[:10]
        if rng.random() < 0.3:
            scores = rng.choice([0.2, 0.5, 0.8], size=len(preds))
        else:
            scores = rng.uniform(0.01, 1.0, size=len(preds))
        ground_truth[image_id] = gts
        predictions[image_id] = [(b, k, float(s)) for (b, k), s in zip(preds, scores)]
    return predictions, ground_truth


def _as_objects(predictions, ground_truth):
    preds = {i: [Prediction(BoundingBox(*b), k, s) for b, k, s in plist] for i, plist in predictions.items()}
    gts = {i: [Annotation(BoundingBox(*b), k) for b, k in glist] for i, glist in ground_truth.items()}
    return preds, gts


def _first_true_positive(predictions, ground_truth, k):
    """ Best-scored class ``k`` prediction overlapping a class ``k`` box of
    its image at IoU 0.5; nothing ranked above it can have matched.
    """
    ranked = sorted(
        [(p[2], i, j) for i in predictions for j, p in enumerate(predictions[i]) if p[1] == k],
        key=lambda t: -t[0],
    )
    for _, image_id, j in ranked:
        box = predictions[image_id][j][0]
        if any(g[1] == k and box_iou(box, g[0]) >= 0.5 for g in ground_truth[image_id]):
            return image_id, j
    return None


def test_ap50_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        predictions, ground_truth = _random_instance(rng)
        preds, gts = _as_objects(predictions, ground_truth)
        result = ap50(preds, gts, 2)
        expected = brute_force_ap50(predictions, ground_truth, 2)
        assert abs(result.ap50 - expected) < 1e-9
        assert 0.0 <= result.ap50 <= 1.0


def test_ap50_examples():
    gt = {"a": [Annotation(BoundingBox(0, 0, 10, 10), 0)]}
    # IoU 0.6
    hit = {"a": [Prediction(BoundingBox(0, 0, 10, 6), 0, 0.5)]}
    assert ap50(hit, gt, 1).ap50 == 1.0
    assert ap50({}, gt, 1).ap50 == 0.0
    assert ap50({"a": []}, gt, 1).matched_counts == {"tp": 0, "fp": 0, "gt": 1}

    two = {"a": [Annotation(BoundingBox(0, 0, 10, 10), 0), Annotation(BoundingBox(20, 20, 30, 30), 0)]}
    ranked = {
        "a": [
            Prediction(BoundingBox(40, 40, 50, 50), 0, 0.9),
            Prediction(BoundingBox(0, 0, 10, 10), 0, 0.8),
            Prediction(BoundingBox(20, 20, 30, 30), 0, 0.7),
        ]
    }
    # precision envelope is 2/3 over the whole recall range
    result = ap50(ranked, two, 1)
    assert float_equal(result.ap50, 2.0 / 3.0, 1e-12)
    assert result.matched_counts == {"tp": 2, "fp": 1, "gt": 2}


def test_ap50_mean_over_present_classes():
    gt = {"a": [Annotation(BoundingBox(0, 0, 10, 10), 0)]}
    preds = {"a": [Prediction(BoundingBox(0, 0, 10, 10), 0, 0.9), Prediction(BoundingBox(0, 0, 10, 10), 1, 0.9)]}
    result = ap50(preds, gt, 2)
    assert result.per_class_ap == {0: 1.0}
    assert result.ap50 == 1.0
    assert ap50({}, {"a": []}, 2).ap50 == 0.0


def test_ap50_errors():
    gt = [("a", []), ("a", [])]
    with pytest.raises(EvaluationError):
        ap50([], gt, 1)
    with pytest.raises(EvaluationError):
        ap50({"b": []}, {"a": []}, 1)


def test_ap50_properties():
    rng = np.random.default_rng(1)
    for _ in range(100):
        predictions, ground_truth = _random_instance(rng)
        preds, gts = _as_objects(predictions, ground_truth)
        base = ap50(preds, gts, 2).ap50
        scaled = {i: [Prediction(p.box, p.class_id, p.score * 0.5) for p in plist] for i, plist in preds.items()}
        assert abs(ap50(scaled, gts, 2).ap50 - base) < 1e-12
        for k in range(2):
            first = _first_true_positive(predictions, ground_truth, k)
            if first is None:
                continue
            image_id, j = first
            fewer = dict(predictions)
            fewer[image_id] = predictions[image_id][:j] + predictions[image_id][j + 1 :]
            assert ap50(_as_objects(fewer, ground_truth)[0], gts, 2).ap50 <= base + 1e-12


def test_eval_result_serialization(workdir):
    gt = {"a": [Annotation(BoundingBox(0, 0, 10, 10), 1)]}
    result = ap50({"a": [Prediction(BoundingBox(0, 0, 10, 10), 1, 0.9)]}, gt, 2)
    data = json.loads(result.to_json())
    assert data == {"ap50": 1.0, "per_class_ap": {"1": 1.0}, "matched_counts": {"fp": 0, "gt": 1, "tp": 1}}
    path = os.path.join(workdir, "eval.csv")
    result.write_csv(path, ("disc", "square"))
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows == [["class", "ap50"], ["square", "1.0"], ["mean", "1.0"]]


def test_convergence_time():
    assert convergence_time([(1, 10), (2, 40), (3, 60), (4, 63), (5, 64)]) == 4
    assert convergence_time([(0, 5.0), (10, 5.0), (20, 5.0)]) == 0
    assert convergence_time([(3, 0.4), (6, 0.0)]) == 3
    with pytest.raises(EvaluationError):
        convergence_time([])
    rng = np.random.default_rng(2)
    for _ in range(100):
        steps = np.cumsum(rng.integers(1, 10, 8))
        curve = list(zip(steps.tolist(), rng.uniform(-1, 1, 8).tolist()))
        assert convergence_time(curve) <= curve[-1][0]


def test_frechet_one_dimensional():
    c = 1 / np.sqrt(2)
    a = FeatureSample(np.array([-c, c]))
    b = FeatureSample(np.array([3 - c, 3 + c]))
    assert abs(frechet_dissimilarity(a, b) - 3.0) < 1e-6


def test_frechet_properties():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.normal(size=(40, 3))
        b = rng.normal(loc=1.0, scale=2.0, size=(30, 3))
        d = frechet_dissimilarity(a, b)
        assert d >= 0
        assert d == frechet_dissimilarity(b, a)
        assert frechet_dissimilarity(a, a) < 1e-6
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        assert abs(frechet_dissimilarity(a @ q, b @ q) - d) < 1e-6


def test_frechet_errors():
    with pytest.raises(EvaluationError):
        frechet_dissimilarity(np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(EvaluationError):
        frechet_dissimilarity(np.zeros((1, 2)), np.zeros((4, 2)))
    with pytest.raises(EvaluationError):
        FeatureSample(np.zeros((2, 2, 2)))
    with pytest.raises(EvaluationError):
        FeatureSample(np.zeros((2, 2)), pooling="pixel_level")


def test_pca_rank_one():
    t = np.linspace(-1, 1, 20)
    line = np.stack((2 * t + 1, -t), axis=1)
    embedding = pca_embed([line], dims=1)
    assert abs(embedding.explained_variance_ratio - 1.0) < 1e-9
    assert np.argmax(np.abs(embedding.components[0])) == 0
    assert embedding.components[0][0] > 0
    with pytest.raises(EvaluationError):
        pca_embed([line], dims=2)


def test_pca_isotropic_cloud():
    cloud = np.random.default_rng(4).normal(size=(10000, 4))
    embedding = pca_embed([cloud[:5000], cloud[5000:]], dims=2)
    assert abs(embedding.explained_variance_ratio - 0.5) < 0.1
    assert embedding.segments == ((0, 5000), (5000, 10000))
    assert embedding.coordinates_of(1).shape == (5000, 2)


def test_pca_is_isometric_on_a_plane():
    rng = np.random.default_rng(5)
    basis, _ = np.linalg.qr(rng.normal(size=(5, 2)))
    points = rng.normal(size=(30, 2)) @ basis.T + 7.0
    embedding = pca_embed([points], dims=2)
    original = np.linalg.norm(points[:, None] - points[None], axis=2)
    projected = np.linalg.norm(embedding.coordinates[:, None] - embedding.coordinates[None], axis=2)
    assert np.allclose(original, projected, atol=1e-8)
    again = pca_embed([points], dims=2)
    assert np.array_equal(again.coordinates, embedding.coordinates)


def test_embedding_csv(workdir):
    rng = np.random.default_rng(6)
    embedding = pca_embed([rng.normal(size=(3, 4)), rng.normal(size=(2, 4))], dims=2)
    path = os.path.join(workdir, "pca.csv")
    write_embedding_csv(embedding, ["source", "target"], path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["sample", "pc1", "pc2"]
    assert [r[0] for r in rows[1:]] == ["source"] * 3 + ["target"] * 2


def test_extract_features(pair):
    config = tiny_detector_config()
    params = init_params(config, 0)
    image = extract_features(params, pair.source_train, config)
    assert image.vectors.shape == (len(pair.source_train), config.feature_channels)
    assert image.domain is Domain.SOURCE
    limited = extract_features(params, pair.target_train, config, max_images=3)
    assert len(limited) == 3 and limited.domain is Domain.TARGET
    instance = extract_features(params, pair.source_train, config, pooling="instance_level")
    assert len(instance) == pair.source_train.annotation_count()
    assert instance.pooling == "instance_level"
    with pytest.raises(EvaluationError):
        extract_features(params, pair.source_train, config, pooling="pixel_level")


def test_features_file(workdir):
    sample = FeatureSample(np.random.default_rng(7).normal(size=(6, 3)), "instance_level", Domain.TARGET)
    path = os.path.join(workdir, "features.bin")
    save_features(sample, path)
    loaded = load_features(path)
    assert np.array_equal(loaded.vectors, sample.vectors)
    assert (loaded.pooling, loaded.domain) == ("instance_level", Domain.TARGET)
    with open(path, "rb") as f:
        data = f.read()
    with open(path, "wb") as f:
        f.write(data[:-4])
    with pytest.raises(EvaluationError):
        load_features(path)
    with open(path, "wb") as f:
        f.write(b"garbage")
    with pytest.raises(EvaluationError):
        load_features(path)

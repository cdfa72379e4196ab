import json

import numpy as np
import pytest

from vkd.analysis import (
    block_report_from_features,
    distance_block_report,
    fit_camera_probe,
    prior_classifier_accuracy,
    write_block_report,
)
from vkd.evaluation import FeatureTable
from vkd.model import build_model, state_hash


def table(features, cameras):
    n = len(cameras)
    return FeatureTable(np.arange(n), np.zeros(n, int), np.asarray(cameras), np.asarray(features, dtype=float))


def test_prior_examples():
    assert prior_classifier_accuracy([1] * 5) == pytest.approx(0.2)
    assert prior_classifier_accuracy({0: 3, 1: 3}) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        prior_classifier_accuracy([])


def test_prior_matches_simulation():
    counts = np.array([5, 2, 9, 4])
    p = counts / counts.sum()
    rng = np.random.default_rng(0)
    truth = rng.choice(4, size=1_000_000, p=p)
    guess = rng.choice(4, size=1_000_000, p=p)
    assert abs(float((truth == guess).mean()) - prior_classifier_accuracy(counts)) < 0.01


def test_probe_one_hot_cameras():
    cams = np.repeat(np.arange(4), 5)
    # 20 rows make one minibatch per epoch, so use a larger step than the default
    rep = fit_camera_probe(table(np.eye(4)[cams] * 3.0, cams), epochs=100, lr=0.05)
    assert rep.accuracy == 1.0 and rep.num_cameras == 4 and rep.epochs_trained == 100
    assert rep.prior_accuracy == pytest.approx(0.25)


def test_probe_constant_features_hits_majority_rate():
    # 20 rows: 11 from camera 2, 6 from camera 0, 3 from camera 1
    cams = np.array([2] * 11 + [0] * 6 + [1] * 3)
    # brute force over every constant prediction: the best is the majority camera
    best = max(float((cams == c).mean()) for c in np.unique(cams))
    rep = fit_camera_probe(table(np.ones((20, 4)), cams), epochs=300)
    assert best == pytest.approx(0.55)
    assert rep.accuracy == pytest.approx(best)


def test_probe_deterministic_and_leaves_model_alone(small_data, small_stores):
    from vkd.evaluation import extract_features

    model = build_model("tinyconv", 16, 8, seed=0).eval()
    before = state_hash(model)
    feats = extract_features(model, small_data.gallery, "gallery", "V2V", store=small_stores["gallery"])
    a = fit_camera_probe(feats, epochs=20, seed=1)
    b = fit_camera_probe(feats, epochs=20, seed=1)
    assert a == b and state_hash(model) == before
    json.loads(a.to_text())


def test_probe_single_camera():
    with pytest.raises(ValueError):
        fit_camera_probe(table(np.ones((4, 2)), [0, 0, 0, 0]))


def test_perfect_blocks_ratio_zero():
    feats = np.repeat(np.eye(3), 2, axis=0)
    rep = block_report_from_features(feats, [0, 0, 1, 1, 2, 2])
    assert rep.ratio == 0.0 and rep.inter_mean > 0
    assert np.array_equal(rep.matrix, rep.matrix.T) and not rep.matrix.diagonal().any()


def test_random_features_ratio_near_one():
    rng = np.random.default_rng(0)
    rep = block_report_from_features(rng.normal(size=(200, 16)), np.repeat(np.arange(20), 10))
    assert 0.95 < rep.ratio < 1.05


def test_block_needs_two_of_each():
    with pytest.raises(ValueError):
        block_report_from_features(np.eye(3), [0, 1, 2])


@pytest.mark.parametrize("mode", ["tracklet", "views"])
def test_distance_block_report(mode, small_data, small_stores, tmp_path):
    model = build_model("tinyconv", 16, 8, seed=0).eval()
    rep = distance_block_report(model, small_data.train, mode, ids=4, bags_per_id=2, bag_size=4,
                                store=small_stores["train"])
    assert rep.matrix.shape == (8, 8)
    assert np.allclose(rep.matrix, rep.matrix.T) and not rep.matrix.diagonal().any()
    assert rep.identities.tolist() == sorted(rep.identities.tolist())
    paths = write_block_report(rep, tmp_path / "m")
    assert [p.suffix for p in paths] == [".txt", ".png", ".json"]
    assert np.loadtxt(paths[0]).shape == (8, 8)


def test_distance_block_report_errors(small_data, small_stores):
    model = build_model("tinyconv", 16, 8, seed=0).eval()
    with pytest.raises(ValueError):
        distance_block_report(model, small_data.train, "tracklet", ids=100, store=small_stores["train"])
    # after the query/gallery holdout each identity keeps 2 training tracklets
    with pytest.raises(ValueError):
        distance_block_report(model, small_data.train, "tracklet", ids=2, bags_per_id=3, store=small_stores["train"])

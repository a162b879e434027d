import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from vertlabel.data import CLASS_NAMES, FormatError, LabelSet, Volume
from vertlabel.evaluation import (REGIONS, ClassPrediction, ScanPrediction, Vote, padded_window,
                                  aggregate_kmeans, aggregate_scan, average_precision,
                                  format_ablation_table, format_metrics_table,
                                  identification_metrics, mean_average_precision,
                                  read_predictions, region_of, sliding_infer, window_origins,
                                  write_metrics_csv, write_predictions)
from vertlabel.nn import Model, ModelConfig

from oracles import average_precision_bruteforce


# -- tiling ------------------------------------------------------------------------------------

def test_window_origins_example():
    assert window_origins(64, 32, 16) == [0, 16, 32]


def test_window_origins_last_clamped():
    starts = window_origins(70, 32, 16)
    assert starts == [0, 16, 32, 38]
    assert starts[-1] + 32 == 70


def test_window_origins_exact_and_small():
    assert window_origins(32, 32, 16) == [0]
    assert window_origins(20, 32, 16) == [-6]


@settings(max_examples=100, deadline=None)
@given(st.integers(8, 200), st.integers(1, 64), st.integers(1, 40))
def test_window_origins_cover_axis(extent, crop, stride):
    starts = window_origins(extent, crop, stride)
    if extent <= crop:
        assert len(starts) == 1
        return
    assert starts[0] == 0 and starts[-1] == extent - crop
    assert all(0 < b - a <= stride for a, b in zip(starts, starts[1:]))


def test_padded_window_uses_floor_value():
    vol = Volume(np.ones((4, 8, 8)), norm_stats=(0.0, 100.0))
    w = padded_window(vol, (-2, 0, 0), (8, 8, 8))
    assert np.all(w[:2] == -10.0) and np.all(w[6:] == -10.0)
    assert np.all(w[2:6] == 1.0)


@pytest.fixture(scope="module")
def tiny_model():
    return Model(ModelConfig(crop_shape=(8, 8, 8), num_classes=3, base_channels=4,
                             lstm_hidden=4, cls_channels=8), seed=0)


def test_single_window_when_volume_equals_crop(tiny_model):
    vol = Volume(np.random.default_rng(0).normal(size=(8, 8, 8)))
    votes = sliding_infer(vol, tiny_model, threshold=-1.0)
    assert len(votes) == 3
    assert {v.crop_origin for v in votes} == {(0, 0, 0)}


def test_vote_count_matches_tiling(tiny_model):
    vol = Volume(np.random.default_rng(0).normal(size=(16, 12, 8)), spacing=(2.0, 1.5, 3.0),
                 origin=(5.0, -4.0, 1.0))
    votes = sliding_infer(vol, tiny_model, threshold=-1.0)
    assert len(votes) == 3 * 2 * 3
    for v in votes:
        np.testing.assert_allclose(v.world_mm, vol.index_to_world(v.local_xyz + np.array(v.crop_origin[::-1])))


def test_threshold_law(tiny_model):
    vol = Volume(np.random.default_rng(1).normal(size=(16, 8, 8)))
    all_votes = sliding_infer(vol, tiny_model, threshold=-1.0)
    cut = float(np.median([v.prob for v in all_votes]))
    kept = sliding_infer(vol, tiny_model, threshold=cut)
    assert all(v.prob > cut for v in kept)
    assert len(kept) == sum(v.prob > cut for v in all_votes)
    assert sliding_infer(vol, tiny_model, threshold=1.0) == []


# -- aggregation ---------------------------------------------------------------------------------

def _votes(points, probs=None, cls=0):
    probs = [1.0] * len(points) if probs is None else probs
    return [Vote(cls, p, np.array(x, dtype=float), np.zeros(3), (0, 0, 0)) for x, p in zip(points, probs)]


def test_identical_votes():
    c, _ = aggregate_kmeans(_votes([(3.0, 4.0, 5.0)] * 4, [0.6, 0.7, 0.8, 0.9]))
    np.testing.assert_allclose(c, [3, 4, 5], atol=1e-12)


def test_outlier_dropped():
    c, _ = aggregate_kmeans(_votes([(0, 0, 0)] * 3 + [(100, 100, 100)]))
    np.testing.assert_array_equal(c, [0, 0, 0])


def test_weighted_mean():
    c, _ = aggregate_kmeans(_votes([(0, 0, 0), (10, 0, 0)], [0.9, 0.1]))
    np.testing.assert_allclose(c, [1, 0, 0], atol=1e-12)


def test_all_rejected_falls_back_to_top_vote():
    # median is the midpoint, 50 mm from both
    c, conf = aggregate_kmeans(_votes([(0, 0, 0), (100, 0, 0)], [0.6, 0.9]))
    np.testing.assert_array_equal(c, [100, 0, 0])
    assert conf == 0.9


def test_aggregate_needs_votes():
    with pytest.raises(ValueError):
        aggregate_kmeans([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-80, 80), st.floats(-80, 80), st.floats(-80, 80),
                          st.floats(0.5, 1.0)), min_size=1, max_size=8), st.randoms())
def test_aggregation_permutation_invariant(raw, rnd):
    votes = _votes([r[:3] for r in raw], [r[3] for r in raw])
    shuffled = list(votes)
    rnd.shuffle(shuffled)
    a, _ = aggregate_kmeans(votes)
    b, _ = aggregate_kmeans(shuffled)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_aggregate_scan_presence():
    votes = _votes([(1, 1, 1)], cls=2) + _votes([(5, 5, 5), (7, 5, 5)], cls=0)
    pred = aggregate_scan(votes, num_classes=4)
    assert [c for c, p in pred.classes.items() if p.present] == [0, 2]
    np.testing.assert_allclose(pred.classes[0].centroid_mm, [6, 5, 5])
    assert pred.classes[1].centroid_mm is None


# -- identification metrics -----------------------------------------------------------------------

def _truth(d):
    return LabelSet(list(d), np.array(list(d.values()), dtype=float))


def test_regions_partition_classes():
    sizes = {k: len(r) for k, r in REGIONS.items()}
    assert sizes == {"Cer": 7, "Tho": 12, "Lum": 5, "Sac": 2}
    assert sorted(c for r in REGIONS.values() for c in r) == list(range(26))
    assert region_of(7) == "Tho"


def test_perfect_predictions():
    t = {0: (0, 0, 0), 8: (0, 0, 30), 20: (0, 0, 60), 25: (0, 0, 90)}
    rep = identification_metrics([t], [_truth(t)])
    assert rep.id_rate == 100.0 and rep.mean_error == 0.0 and rep.std_error == 0.0
    for k in ("Cer", "Tho", "Lum", "Sac"):
        assert rep.scopes[k].id_rate == 100.0


def test_twenty_five_mm_not_identified():
    rep = identification_metrics([{3: (25.0, 0, 0)}], [_truth({3: (0, 0, 0)})])
    assert rep.id_rate == 0.0
    assert rep.mean_error == pytest.approx(25.0)


def test_twenty_mm_boundary():
    near = identification_metrics([{3: (19.999, 0, 0)}], [_truth({3: (0, 0, 0)})])
    edge = identification_metrics([{3: (20.0, 0, 0)}], [_truth({3: (0, 0, 0)})])
    assert near.id_rate == 100.0
    assert edge.id_rate == 0.0  # strictly less than 20 mm


def test_swapped_classes():
    truth = _truth({10: (0, 0, 0), 11: (0, 0, 30)})
    pred = {10: (0, 0, 25), 11: (0, 0, 5)}
    rep = identification_metrics([pred], [truth])
    assert rep.id_rate == 0.0
    assert rep.mean_error == pytest.approx(25.0) and rep.std_error == pytest.approx(0.0)


def test_hand_evaluated_mixed_scan():
    truth = _truth({0: (0, 0, 0), 1: (0, 0, 20), 2: (0, 0, 40)})
    pred = {0: (3, 4, 0), 1: (0, 0, 32), 5: (0, 0, 41)}
    rep = identification_metrics([pred], [truth])
    # C1 hit (5 mm); C2 nearest is C2 at 12 mm -> hit; C3 nearest is class 5 -> miss
    assert rep.id_rate == pytest.approx(200 / 3)
    assert rep.errors_mm == pytest.approx([5.0, 12.0])
    assert rep.std_error == pytest.approx(3.5)


def test_no_predictions():
    rep = identification_metrics([{}], [_truth({0: (0, 0, 0)})])
    assert rep.id_rate == 0.0
    assert rep.errors_mm == [] and math.isnan(rep.mean_error)


def test_metrics_symmetric_under_scan_order():
    truths = [_truth({0: (0, 0, 0), 1: (0, 0, 20)}), _truth({4: (1, 1, 1)})]
    preds = [{0: (0, 0, 3), 1: (0, 0, 40)}, {4: (1, 1, 9)}]
    a = identification_metrics(preds, truths)
    b = identification_metrics(preds[::-1], truths[::-1])
    assert a.id_rate == b.id_rate
    assert a.mean_error == pytest.approx(b.mean_error) and a.std_error == pytest.approx(b.std_error)


def test_scan_prediction_objects_accepted():
    sp = ScanPrediction({0: ClassPrediction(True, np.zeros(3), 0.9), 1: ClassPrediction(False)})
    rep = identification_metrics([sp], [_truth({0: (0, 0, 1)})])
    assert rep.id_rate == 100.0 and rep.mean_error == pytest.approx(1.0)


def test_length_mismatch():
    with pytest.raises(ValueError):
        identification_metrics([{}], [])


# -- average precision -----------------------------------------------------------------------------

def test_ap_perfect_ranking():
    assert average_precision([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]) == 1.0


def test_ap_hand_computed():
    assert average_precision([1, 0, 1], [0.9, 0.5, 0.1]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)
    assert average_precision([1, 0, 1], [0.9, 0.5, 0.1]) == pytest.approx(0.8333333333, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_ap_matches_bruteforce_without_ties(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=30)
    labels[0] = 1
    scores = rng.permutation(30) / 30.0
    assert average_precision(labels, scores) == pytest.approx(
        average_precision_bruteforce(labels.tolist(), scores.tolist()), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_ap_with_ties_matches_sklearn(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=40)
    labels[0] = 1
    scores = rng.integers(0, 5, size=40) / 4.0
    assert average_precision(labels, scores) == pytest.approx(
        average_precision_score(labels, scores), abs=1e-12)


def test_ap_inverted_closed_form():
    n_pos, n_neg = 7, 13
    labels = [0] * n_neg + [1] * n_pos
    scores = np.linspace(1, 0, n_pos + n_neg)
    expected = sum(k / (n_neg + k) for k in range(1, n_pos + 1)) / n_pos
    assert average_precision(labels, scores) == pytest.approx(expected, abs=1e-12)


def test_ap_random_scores_near_prevalence():
    rng = np.random.default_rng(0)
    labels = rng.uniform(size=20000) < 0.3
    scores = rng.uniform(size=20000)
    # standard error of AP for uninformative scores is well below 0.01 here
    assert abs(average_precision(labels, scores) - labels.mean()) < 0.02


def test_ap_inverted_below_random_floor():
    rng = np.random.default_rng(1)
    labels = rng.uniform(size=2000) < 0.3
    inverted = np.where(labels, 0.0, 1.0) + rng.uniform(0, 1e-3, size=2000)
    rand = np.mean([average_precision(labels, rng.uniform(size=2000)) for _ in range(20)])
    assert average_precision(labels, inverted) < rand


def test_ap_needs_positive():
    with pytest.raises(ValueError):
        average_precision([0, 0], [0.1, 0.2])


def test_map_skips_classes_without_positives():
    probs = np.array([[0.9, 0.1, 0.3], [0.2, 0.6, 0.4], [0.7, 0.8, 0.5]])
    truths = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0]])
    score, per_class, skipped = mean_average_precision(probs, truths)
    assert skipped == [2]
    assert per_class == {0: 1.0, 1: 0.5}
    assert score == 0.75


def test_map_perfect_is_one():
    truths = np.random.default_rng(0).integers(0, 2, size=(50, 4))
    truths[0] = 1
    assert mean_average_precision(truths * 0.8 + 0.1, truths)[0] == 1.0


# -- file formats -----------------------------------------------------------------------------------

def test_prediction_file_round_trip(tmp_path):
    pred = ScanPrediction({c: ClassPrediction(False) for c in range(26)})
    pred.classes[3] = ClassPrediction(True, np.array([1.5, -2.25, 1e-7]), np.float64(0.875))
    pred.classes[25] = ClassPrediction(True, np.array([10.0, 20.0, 30.000000001]), 0.5)
    write_predictions(tmp_path / "p.txt", pred)
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert len(lines) == 26
    assert lines[3] == "C4 1 1.5 -2.25 1e-07 0.875"
    assert lines[0] == "C1 0 nan nan nan 0.0"
    back = read_predictions(tmp_path / "p.txt")
    assert back.present().keys() == {3, 25}
    for c in (3, 25):
        assert back.classes[c].centroid_mm.tobytes() == pred.classes[c].centroid_mm.tobytes()
        assert back.classes[c].confidence == pred.classes[c].confidence


def test_prediction_file_errors(tmp_path):
    (tmp_path / "p.txt").write_text("C1 2 0 0 0 0\n")
    with pytest.raises(FormatError, match=":1:"):
        read_predictions(tmp_path / "p.txt")
    (tmp_path / "q.txt").write_text("C1 1 0 zero 0 0\n")
    with pytest.raises(FormatError, match="number"):
        read_predictions(tmp_path / "q.txt")


def test_metrics_csv_and_table(tmp_path):
    t = {0: (0, 0, 0), 8: (0, 0, 30)}
    rep = identification_metrics([t], [_truth(t)])
    write_metrics_csv(tmp_path / "m.csv", rep)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "scope,id_rate,mean_mm,std_mm"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["ALL", "Cer", "Tho", "Lum", "Sac"]
    assert lines[1] == "ALL,100.0,0.0,0.0"
    assert lines[4] == "Lum,,,"
    table = format_metrics_table(rep)
    assert "100.0" in table.splitlines()[1]


def test_ablation_table_rows():
    table = format_ablation_table([("integral", 2.33, 2.03), ("direct_fc", 3.42, 1.72)])
    lines = table.splitlines()
    assert len(lines) == 3
    assert lines[1].split() == ["integral", "2.33", "2.03"]


def test_class_name_list_matches_prediction_order(tmp_path):
    write_predictions(tmp_path / "p.txt", ScanPrediction())
    names = [ln.split()[0] for ln in (tmp_path / "p.txt").read_text().splitlines()]
    assert names == CLASS_NAMES

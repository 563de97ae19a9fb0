import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import aupr_thresholds, auroc_pairs, random_metric_case
from pcad.errors import ContractError, UndefinedMetricError
from pcad.metrics import EvalReport, aupr, auroc, evaluate_arrays, miou, threshold_sweep, write_sweep_csv


def test_match_oracles(rng):
    for _ in range(200):
        s, y = random_metric_case(rng)
        assert abs(auroc(s, y) - auroc_pairs(s, y)) < 1e-12
        assert abs(aupr(s, y) - aupr_thresholds(s, y)) < 1e-12


def test_perfect_and_inverted_ranking():
    y = np.array([0, 0, 1, 1], bool)
    assert auroc([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], y) == 0.0
    assert aupr([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert auroc(np.full(4, 0.3), y) == 0.5
    assert aupr(np.full(4, 0.3), y) == 0.5


@given(st.integers(0, 10_000))
def test_invariant_under_monotone_transform(seed):
    s, y = random_metric_case(np.random.default_rng(seed))
    t = np.exp(3 * s) + 1
    assert auroc(t, y) == pytest.approx(auroc(s, y), abs=1e-12)
    assert aupr(t, y) == pytest.approx(aupr(s, y), abs=1e-12)
    assert auroc(-s, y) == pytest.approx(1 - auroc(s, y), abs=1e-12)


def test_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [True, True])
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [False, False])
    with pytest.raises(UndefinedMetricError):
        aupr([0.1, 0.2], [False, False])


def test_bad_inputs():
    with pytest.raises(ContractError):
        auroc([0.1, 0.2], [True])
    with pytest.raises(ContractError):
        auroc([0.1, np.nan], [True, False])


def test_miou_hand_example():
    gt = np.array([0, 0, 1, 1])
    value, per_class = miou(np.zeros(4, int), gt, [0, 1])
    assert value == 0.25
    assert per_class == {0: 0.5, 1: 0.0}


def test_miou_absent_class_and_unknown_points():
    gt = np.array([0, 0, 1, 1, 9])
    pred = np.array([0, 0, 1, 1, 0])
    assert miou(pred, gt, [0, 1, 2])[0] == 1.0
    assert miou(pred, gt, [0, 1, 2], skip_absent=False)[0] == pytest.approx(2 / 3)
    with pytest.raises(UndefinedMetricError):
        miou(pred, gt, [5])


def test_threshold_sweep_counts(rng):
    s, y = rng.random(60), rng.random(60) < 0.3
    sweep = threshold_sweep(s, y, 11)
    for i, t in enumerate(sweep["threshold"]):
        hit = s >= t
        assert sweep["tp"][i] == (hit & y).sum()
        assert sweep["fp"][i] == (hit & ~y).sum()
        assert sweep["tp"][i] + sweep["fn"][i] == y.sum()
        assert sweep["fp"][i] + sweep["tn"][i] == (~y).sum()


def test_report_round_trip(tmp_path, rng):
    s, y = rng.random(40), rng.random(40) < 0.5
    gt = rng.integers(0, 3, 40)
    rep = evaluate_arrays(s, y, gt, gt, [0, 1, 2])
    assert rep.miou == 1.0
    path = tmp_path / "r.json"
    rep.write(path)
    back = EvalReport.from_dict(json.loads(path.read_text()))
    assert back == rep
    write_sweep_csv(rep.counts, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "threshold,tp,fp,fn,tn" and len(lines) == 102

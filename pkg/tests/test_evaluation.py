import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicealign.config import apply_overrides
from slicealign.evaluation import ResultRow, ResultTable, dice, make_folds, mean_dsc, run_protocol, subjects_mean_dsc
from slicealign.volume_data import make_phantom_dataset

SUBJECTS = [f"s{i:02d}" for i in range(20)]


def test_dice_examples():
    assert dice(np.ones(4), np.ones(4)) == 1.0
    assert dice(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1])) == 0.0
    assert dice(np.array([1, 1, 0, 0]), np.array([1, 0, 0, 0])) == pytest.approx(2 / 3)
    assert dice(np.zeros(4), np.zeros(4)) == 1.0
    assert dice(np.zeros(4), np.array([0, 1, 0, 0])) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros(3), np.zeros(4))


def test_mean_dsc_hand_built_volume():
    gt = np.zeros((2, 2, 2), np.uint8)
    gt[0, 0, :] = 1
    gt[1, 1, :] = 2
    pred = gt.copy()
    pred[1, 1, 1] = 0  # class 2: |A|=1, |B|=2, overlap 1
    per_class, mean = mean_dsc(pred, gt, 3)
    assert per_class == {1: 1.0, 2: pytest.approx(2 / 3)}
    assert mean == pytest.approx((1 + 2 / 3) / 2)


def test_mean_dsc_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        mean_dsc(np.full((2, 2), 5), np.zeros((2, 2), int), 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_subject_order_invariance(seed):
    rng = np.random.default_rng(seed)
    pairs = [(rng.integers(0, 3, (3, 4, 4)), rng.integers(0, 3, (3, 4, 4))) for _ in range(5)]
    shuffled = [pairs[i] for i in rng.permutation(5)]
    assert subjects_mean_dsc(pairs, 3) == pytest.approx(subjects_mean_dsc(shuffled, 3), abs=1e-12)


def test_make_folds_structure():
    plan = make_folds(SUBJECTS, 5, 2, seed=0)
    assert len(plan.folds) == 5
    val_counts = {}
    for f in plan.folds:
        assert len(f.val) == 4 and len(f.train) == 16 and len(f.labeled) == 2
        assert set(f.labeled) <= set(f.train)
        for s in f.val:
            val_counts[s] = val_counts.get(s, 0) + 1
    assert val_counts == {s: 1 for s in SUBJECTS}


def test_make_folds_determinism():
    assert make_folds(SUBJECTS, 5, 2, 3) == make_folds(SUBJECTS, 5, 2, 3)
    assert make_folds(SUBJECTS, 5, 2, 3) != make_folds(SUBJECTS, 5, 2, 4)


def test_make_folds_all_and_uneven():
    plan = make_folds(SUBJECTS[:7], 3, "all", 0)
    for f in plan.folds:
        assert f.labeled == f.train


def test_make_folds_budget_errors():
    with pytest.raises(ValueError, match="M=17"):
        make_folds(SUBJECTS, 5, 17, 0)
    with pytest.raises(ValueError):
        make_folds(SUBJECTS, 5, 0, 0)
    with pytest.raises(ValueError):
        make_folds(SUBJECTS, 1, 2, 0)


def test_result_table_serialization():
    table = ResultTable([ResultRow("random", 2, [0.5, 0.7]), ResultRow("sal", 2, [0.6, 0.8])])
    assert table.get("sal", 2).mean == pytest.approx(0.7)
    assert table.get("sal", 2).std == pytest.approx(0.1)
    recs = json.loads(table.to_json())
    assert recs[0]["method"] == "random" and recs[0]["folds"] == [0.5, 0.7]
    assert table.to_csv().splitlines()[0] == "method,M,mean,std,folds"
    assert "0.700(0.10)" in table.format()
    with pytest.raises(KeyError):
        table.get("x", 2)


def test_run_protocol_shares_labeled_subjects_and_reports_std(tiny_cfg, monkeypatch):
    from slicealign import evaluation

    data = make_phantom_dataset(6, 8, 32, 32, seed=2)
    seen = []
    real = evaluation.finetune

    def spy(dataset, labeled, cfg, init=None, seed=None):
        seen.append((init, tuple(labeled), seed))
        return real(dataset, labeled, cfg, init=init, seed=seed)

    monkeypatch.setattr(evaluation, "finetune", spy)
    cfg = apply_overrides(tiny_cfg, ["finetune.steps=2"])
    table = run_protocol(data, {"random": None, "again": None}, [2], 3, 0, cfg)
    first = [s[1:] for s in seen[:3]]
    second = [s[1:] for s in seen[3:]]
    assert first == second
    row = table.get("random", 2)
    assert len(row.fold_values) == 3
    assert row.std == pytest.approx(float(np.std(row.fold_values)))
    # identical inputs, identical seeds: the two rows match exactly
    assert table.get("again", 2).fold_values == row.fold_values


def test_run_protocol_rejects_budget_before_training(tiny_cfg, monkeypatch):
    from slicealign import evaluation

    monkeypatch.setattr(evaluation, "finetune", lambda *a, **k: pytest.fail("trained"))
    data = make_phantom_dataset(4, 8, 32, 32, seed=2)
    with pytest.raises(ValueError, match="exceeds"):
        run_protocol(data, {"random": None}, [1, 9], 2, 0, tiny_cfg)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_adapt.evaluation import (CSV_COLUMNS, LOSS_SETS, RecallReport, RecallThresholds, evaluate,
                                      format_csv, format_table, localize_query, mean_recall, method_name,
                                      recall_from_errors, run_ablation)
from fewshot_adapt.geometry import PoseError, pose_error
from fewshot_adapt.losses import TERMS
from fewshot_adapt.pipeline import QUERY_SEED_OFFSET
from fewshot_adapt.synthworld import render_view_arrays

PLANTED = [PoseError(0.1, 1.0), PoseError(0.4, 4.0), PoseError(2.0, 8.0), PoseError(10.0, 20.0)]


def test_planted_errors():
    assert recall_from_errors(PLANTED) == (0.25, 0.5, 0.75)


def test_all_exact_and_none_registered():
    assert recall_from_errors([PoseError(0.0, 0.0)] * 3) == (1.0, 1.0, 1.0)
    assert recall_from_errors([None] * 4) == (0.0, 0.0, 0.0)


def test_boundary_is_inclusive():
    assert recall_from_errors([PoseError(0.25, 2.0)]) == (1.0, 1.0, 1.0)


def test_one_coordinate_over_fails():
    # inside on position, outside on rotation
    assert recall_from_errors([PoseError(0.01, 2.5)]) == (0.0, 1.0, 1.0)


def test_empty_queries_rejected():
    with pytest.raises(ValueError):
        recall_from_errors([])


def test_thresholds_validation():
    assert RecallThresholds().pairs == ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
    with pytest.raises(ValueError):
        RecallThresholds(((0.25, 2.0), (0.5, 2.0), (5.0, 10.0)))
    with pytest.raises(ValueError):
        RecallThresholds(((0.5, 2.0), (0.25, 5.0), (5.0, 10.0)))
    with pytest.raises(ValueError):
        RecallThresholds(((0.25, 2.0), (0.5, 5.0)))


errors_st = st.lists(st.one_of(st.none(), st.builds(PoseError, st.floats(0, 20), st.floats(0, 180))),
                     min_size=1, max_size=30)


@settings(max_examples=200, deadline=None)
@given(errors_st)
def test_recall_monotone_and_counted(errors):
    r = recall_from_errors(errors)
    assert r[0] <= r[1] <= r[2]
    n = len(errors)
    for (tt, tr), v in zip(RecallThresholds().pairs, r):
        assert v == sum(e is not None and e.epsilon_t <= tt and e.epsilon_r <= tr for e in errors) / n


def test_zero_shift_query_localizes(source_model):
    scene = source_model.scene
    pose = scene.query_poses[0]
    view = render_view_arrays(scene, pose, source_model.source, QUERY_SEED_OFFSET)
    est = localize_query(view, source_model.cloud, source_model.head, scene.intr)
    err = pose_error(pose, est)
    assert err.epsilon_t <= 0.25 and err.epsilon_r <= 2.0
    assert localize_query(view.subset(np.arange(0)), source_model.cloud, source_model.head, scene.intr) is None


def test_evaluate_pure_and_deterministic(source_model):
    scene = source_model.scene
    queries = [(render_view_arrays(scene, scene.query_poses[i], source_model.source, QUERY_SEED_OFFSET + i),
                scene.query_poses[i]) for i in range(4)]
    a = evaluate(queries, source_model.cloud, source_model.head, scene.intr, label="frozen", gamma=0.0)
    b = evaluate(queries, source_model.cloud, source_model.head, scene.intr, label="frozen", gamma=0.0)
    assert a.recall == b.recall == (1.0, 1.0, 1.0)
    assert a.errors == b.errors and a.acceptance_rate == 1.0


def _stub_ablation(grid=None):
    calls = []

    def train_arm(terms):
        calls.append(terms)
        return len(terms)

    def evaluate_head(head, label):
        k = 0 if label == "frozen" else head
        return RecallReport((0.1 * k, 0.15 * k, 0.2 * k), [], 1.0, label, 0.6)

    return run_ablation(train_arm, evaluate_head, "frozen-head", grid), calls


def test_ablation_default_grid_rows():
    rows, calls = _stub_ablation()
    assert [n for n, _ in rows] == ["frozen", "Corres (fine-tune)", "Corres + VW-CORAL", "Corres + CD-SOS",
                                    "Corres + SoftMatch", "Corres + VW-CORAL + CD-SOS",
                                    "Corres + VW-CORAL + CD-SOS + SoftMatch (ours)"]
    assert calls == list(LOSS_SETS.values())
    for _, r in rows:
        assert r.recall[0] <= r.recall[1] <= r.recall[2]


def test_ablation_single_and_empty_grid():
    rows, _ = _stub_ablation([("corres",)])
    assert [n for n, _ in rows] == ["frozen", "Corres (fine-tune)"]
    with pytest.raises(ValueError):
        _stub_ablation([])


def test_method_name_order_independent():
    assert method_name(("softmatch", "corres")) == "Corres + SoftMatch"
    assert method_name(tuple(reversed(TERMS))).endswith("(ours)")


def test_format_csv_and_table():
    reports = [RecallReport((0.25, 0.5, 0.75), PLANTED, 1.0, "frozen", 0.6),
               RecallReport((0.5, 0.75, 1.0), PLANTED, 0.75, "Corres (fine-tune)", 0.6)]
    text = format_csv(reports)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == "frozen,0.60,0.2500,0.5000,0.7500,1.0000"
    assert lines[2] == "Corres (fine-tune),0.60,0.5000,0.7500,1.0000,0.7500"
    table = format_table(reports)
    assert " 25.0 /  50.0 /  75.0" in table and "75.0%" in table
    assert "count as failures" in table
    np.testing.assert_allclose(mean_recall(reports), [0.375, 0.625, 0.875])

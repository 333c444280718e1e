from __future__ import annotations

import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import f1_score

from conceptguide.errors import ContractViolation
from conceptguide.metrics import (
    MetricResult,
    average_precision,
    mean_average_precision,
    weighted_f1,
)
from conceptguide.stage2 import DiseasePrediction


def prediction(image_id, scores, decision=None):
    return DiseasePrediction(
        image_id=image_id, scores=np.asarray(scores, dtype=np.float64), decision=decision
    )


def prefix_rescan_ap(scores, relevance):
    """Oracle: precision@k recomputed from scratch for every prefix that
    ends on a relevant item, summed in rank order, divided by the positive
    count once. Shares no counting state with the implementation."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    positives = sum(relevance)
    if positives == 0:
        return 0.0
    total = 0.0
    for k in range(1, len(order) + 1):
        prefix = order[:k]
        if relevance[prefix[-1]]:
            total += sum(relevance[i] for i in prefix) / k
    return total / positives


def test_average_precision_hand_examples():
    # Hits at ranks 2 and 4: (1/2 + 2/4) / 2 = 0.5.
    assert average_precision([0.9, 0.8, 0.7, 0.6], [0, 1, 0, 1]) == 0.5
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 1, 0, 0]) == 1.0
    # Single positive ranked last of three: precision 1/3.
    assert average_precision([0.9, 0.8, 0.7], [0, 0, 1]) == pytest.approx(1.0 / 3.0)
    assert average_precision([0.1], [1]) == 1.0


def test_average_precision_zero_positives_is_zero_with_note():
    notes = []
    assert average_precision([0.9, 0.1], [0, 0], notes=notes) == 0.0
    assert notes == ["no positive samples; AP defined as 0"]


def test_average_precision_breaks_ties_by_input_order():
    notes = []
    assert average_precision([0.5, 0.5], [1, 0], notes=notes) == 1.0
    assert any("tied" in n for n in notes)
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5


def test_average_precision_shape_contract():
    with pytest.raises(ContractViolation):
        average_precision([0.5, 0.5], [1])
    with pytest.raises(ContractViolation):
        average_precision([[0.5]], [[1]])


@settings(max_examples=300, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(min_value=-100.0, max_value=100.0, allow_nan=False),
            st.integers(min_value=0, max_value=1),
        ),
        min_size=1,
        max_size=12,
    )
)
def test_average_precision_equals_prefix_rescan_oracle(pairs):
    scores = [p[0] for p in pairs]
    relevance = [p[1] for p in pairs]
    assert average_precision(scores, relevance) == prefix_rescan_ap(scores, relevance)


def map_fixture():
    # Class a ranking: x (hit), y (miss), z (hit) -> AP = (1/1 + 2/3) / 2.
    # Class b ranking: x (miss), y (hit), z (miss) -> AP = 1/2.
    predictions = [
        prediction("x", [0.9, 0.8]),
        prediction("y", [0.7, 0.5]),
        prediction("z", [0.5, 0.1]),
    ]
    truth = {"x": frozenset({"a"}), "y": frozenset({"b"}), "z": frozenset({"a"})}
    return predictions, truth


def test_mean_average_precision_hand_case():
    predictions, truth = map_fixture()
    result = mean_average_precision(predictions, truth, diseases=("a", "b"))
    ap_a = (1.0 + 2.0 / 3.0) / 2.0
    ap_b = 0.5
    assert result.per_class == [("a", pytest.approx(ap_a)), ("b", pytest.approx(ap_b))]
    assert result.mean == pytest.approx((ap_a + ap_b) / 2.0)
    assert result.verify()


def test_mean_average_precision_respects_class_set():
    predictions, truth = map_fixture()
    result = mean_average_precision(predictions, truth, diseases=("a", "b"), class_set=("b",))
    assert result.per_class == [("b", 0.5)]
    assert result.mean == 0.5


def test_mean_average_precision_excludes_zero_positive_classes():
    predictions, truth = map_fixture()
    notes = []
    result = mean_average_precision(
        predictions, truth, diseases=("a", "b"), class_set=None, notes=notes
    )
    # Full truth has positives for both; drop b from truth and rescore.
    truth_without_b = {"x": frozenset({"a"}), "y": frozenset(), "z": frozenset({"a"})}
    notes = []
    partial = mean_average_precision(
        predictions, truth_without_b, diseases=("a", "b"), notes=notes
    )
    assert [name for name, _ in partial.per_class] == ["a"]
    assert any("excluded" in n for n in notes)
    assert partial.mean == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    assert result.mean != partial.mean


def test_mean_average_precision_error_cases():
    predictions, truth = map_fixture()
    with pytest.raises(ContractViolation):
        mean_average_precision(predictions, truth, diseases=("a", "b"), class_set=("c",))
    with pytest.raises(ContractViolation):
        mean_average_precision([], truth, diseases=("a", "b"))
    with pytest.raises(ContractViolation):
        mean_average_precision(predictions, {}, diseases=("a", "b"))


def test_metric_result_aggregation_matches_stdlib():
    per_seed = [0.8, 0.9, 0.95, 0.7, 1.0]
    result = MetricResult.from_per_seed("mAP", per_seed)
    assert result.mean == pytest.approx(statistics.fmean(per_seed))
    assert result.std == pytest.approx(statistics.pstdev(per_seed))
    assert result.verify(tol=1e-9)
    tampered = MetricResult(metric="mAP", mean=result.mean + 0.01, std=result.std, per_seed=per_seed)
    assert not tampered.verify()
    with pytest.raises(ContractViolation):
        MetricResult.from_per_seed("mAP", [])


def test_weighted_f1_hand_example():
    # Truth: a, a, a, b. Decisions hit all three a's and miss b entirely:
    # F1(a) = 1 with support 3, F1(b) = 0 with support 1 -> 3/4.
    predictions = [
        prediction("p", [0.0], decision=frozenset({"a"})),
        prediction("q", [0.0], decision=frozenset({"a"})),
        prediction("r", [0.0], decision=frozenset({"a"})),
        prediction("s", [0.0], decision=frozenset()),
    ]
    truth = {
        "p": frozenset({"a"}),
        "q": frozenset({"a"}),
        "r": frozenset({"a"}),
        "s": frozenset({"b"}),
    }
    assert weighted_f1(predictions, truth, diseases=("a", "b")) == pytest.approx(0.75, abs=1e-9)


def test_weighted_f1_perfect_and_all_wrong():
    predictions = [
        prediction("p", [0.0], decision="a"),
        prediction("q", [0.0], decision="b"),
    ]
    truth = {"p": frozenset({"a"}), "q": frozenset({"b"})}
    assert weighted_f1(predictions, truth, diseases=("a", "b")) == 1.0
    swapped = {"p": frozenset({"b"}), "q": frozenset({"a"})}
    assert weighted_f1(predictions, swapped, diseases=("a", "b")) == 0.0


def test_weighted_f1_single_label_decisions_count_as_singletons():
    predictions = [prediction("p", [0.0], decision="a")]
    truth = {"p": frozenset({"a"})}
    assert weighted_f1(predictions, truth, diseases=("a", "b")) == 1.0


def test_weighted_f1_requires_some_support():
    predictions = [prediction("p", [0.0], decision=frozenset({"a"}))]
    with pytest.raises(ContractViolation):
        weighted_f1(predictions, {"p": frozenset()}, diseases=("a",))
    with pytest.raises(ContractViolation):
        weighted_f1([], {}, diseases=("a",))


def test_weighted_f1_matches_sklearn_on_random_instances():
    rng = np.random.default_rng(0)
    diseases = ("a", "b", "c")
    checked = 0
    while checked < 50:
        n = int(rng.integers(1, 9))
        truth_matrix = rng.integers(0, 2, size=(n, 3))
        decision_matrix = rng.integers(0, 2, size=(n, 3))
        if truth_matrix.sum() == 0:
            continue
        predictions = []
        truth = {}
        for i in range(n):
            decided = frozenset(d for j, d in enumerate(diseases) if decision_matrix[i, j])
            predictions.append(prediction(f"i{i}", [0.0, 0.0, 0.0], decision=decided))
            truth[f"i{i}"] = frozenset(d for j, d in enumerate(diseases) if truth_matrix[i, j])
        ours = weighted_f1(predictions, truth, diseases)
        reference = f1_score(
            truth_matrix, decision_matrix, average="weighted", zero_division=0
        )
        assert ours == pytest.approx(reference, abs=1e-12)
        checked += 1

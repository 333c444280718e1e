from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conceptguide import stage1
from conceptguide.data import AccessLog, derive_concept_targets
from conceptguide.encoders import FeatureVector, mock_bundle, new_context
from conceptguide.errors import ConfigurationError, ContractViolation, TrainingError
from conceptguide.stage1 import (
    ConceptLogits,
    TrainConfig,
    check_checkpoint_compat,
    concept_bce,
    concept_scores,
    infer_concepts,
    learning_rate,
    load_logits,
    save_logits,
    train,
)


def quick_config(**overrides):
    base = dict(lr=0.1, epochs=6, warmup_epochs=2, batch_size=8, m=2, seed=3)
    base.update(overrides)
    return TrainConfig(**base)


def test_concept_bce_frozen_example():
    # -(ln 0.8 + ln 0.7) / 2 = -(-0.22314355 + -0.35667494) / 2, evaluated
    # in 64-bit floats: 0.2899092476264711.
    assert concept_bce([0.8, 0.3], [1, 0]) == pytest.approx(0.2899092476264711, abs=1e-6)


def test_concept_bce_uniform_is_ln_two():
    # p = 0.5 everywhere makes every term -ln(1/2), so the mean is ln 2
    # regardless of targets or length.
    for e in (1, 2, 7, 64):
        value = concept_bce(np.full(e, 0.5), np.arange(e) % 2)
        assert value == pytest.approx(math.log(2.0), abs=1e-9)


def test_concept_bce_clamps_the_log():
    # p = 0 against target 1 is clamped at 1e-12: loss = -ln(1e-12).
    assert concept_bce([0.0], [1]) == pytest.approx(27.631021115928547, abs=1e-9)
    # p = 1 against target 1 is the other clamp edge: -ln(1 - 1e-12) ~ 1e-12.
    assert concept_bce([1.0], [1]) < 1e-9


def test_concept_bce_shape_contract():
    with pytest.raises(ContractViolation):
        concept_bce([0.5, 0.5], [1])
    with pytest.raises(ContractViolation):
        concept_bce([], [])
    with pytest.raises(ContractViolation):
        concept_bce([[0.5]], [[1]])


def test_concept_scores_aligned_and_orthogonal_features():
    bundle = mock_bundle(seed=0, d=16)  # logit_scale 10
    e0 = np.zeros(16)
    e0[0] = 1.0
    e1 = np.zeros(16)
    e1[1] = 1.0
    concept_features = torch.tensor(np.stack([e0, e1]), dtype=torch.float64)
    logits = concept_scores(
        bundle, None, FeatureVector(values=e0), concept_features, image_id="img"
    )
    assert logits.image_id == "img"
    assert logits.scores.tolist() == pytest.approx([10.0, 0.0])
    # sigmoid(10) = 1 / (1 + e^-10) = 0.9999546021312976; sigmoid(0) = 0.5.
    assert logits.probabilities.tolist() == pytest.approx([0.9999546021312976, 0.5], abs=1e-12)


def test_concept_scores_dimension_contract():
    bundle = mock_bundle(seed=0, d=16)
    good = torch.zeros((2, 16), dtype=torch.float64)
    with pytest.raises(ContractViolation):
        concept_scores(bundle, None, FeatureVector(values=np.ones(8) / math.sqrt(8.0)), good)
    with pytest.raises(ContractViolation):
        concept_scores(bundle, None, FeatureVector(values=np.ones(16) / 4.0), good.flatten())


def test_concept_logits_must_be_vectors():
    with pytest.raises(ContractViolation):
        ConceptLogits(image_id="x", scores=np.zeros((2, 2)))


def test_learning_rate_warmup_then_cosine():
    config = TrainConfig(lr=0.4, warmup_epochs=4, epochs=20, schedule="cosine")
    ramp = [learning_rate(config, e) for e in range(1, 5)]
    assert ramp == pytest.approx([0.1, 0.2, 0.3, 0.4])
    tail = [learning_rate(config, e) for e in range(4, 21)]
    assert all(a >= b for a, b in zip(tail, tail[1:]))
    assert learning_rate(config, 20) == pytest.approx(0.0, abs=1e-15)


def test_learning_rate_constant_after_warmup():
    config = TrainConfig(lr=0.4, warmup_epochs=2, epochs=10, schedule="constant")
    assert learning_rate(config, 1) == pytest.approx(0.2)
    assert [learning_rate(config, e) for e in range(3, 11)] == [0.4] * 8


def test_learning_rate_epoch_bounds():
    config = TrainConfig(epochs=10)
    with pytest.raises(ConfigurationError):
        learning_rate(config, 0)
    with pytest.raises(ConfigurationError):
        learning_rate(config, 11)


@settings(max_examples=40, deadline=None)
@given(
    lr=st.floats(min_value=1e-4, max_value=10.0, allow_nan=False),
    warmup=st.integers(min_value=1, max_value=10),
    extra=st.integers(min_value=1, max_value=40),
)
def test_learning_rate_warmup_is_strictly_increasing(lr, warmup, extra):
    config = TrainConfig(lr=lr, warmup_epochs=warmup, epochs=warmup + extra)
    values = [learning_rate(config, e) for e in range(1, warmup + 1)]
    assert all(a < b for a, b in zip(values, values[1:])) or warmup == 1
    assert values[-1] == pytest.approx(lr)
    after = [learning_rate(config, e) for e in range(warmup + 1, config.epochs + 1)]
    assert all(a >= b for a, b in zip(after, after[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(schedule="linear")
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_epochs=10, epochs=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(position_policy="ANYWHERE")


def test_train_is_deterministic(tiny_dataset, tiny_bundle, train_pools):
    _, bank, space = tiny_dataset
    train_pool, val_pool, _ = train_pools
    one = train(tiny_bundle, bank, train_pool, val_pool, space, quick_config())
    two = train(tiny_bundle, bank, train_pool, val_pool, space, quick_config())
    assert one.loss_history == two.loss_history
    assert one.val_history == two.val_history
    assert torch.equal(one.context.vectors, two.context.vectors)
    assert torch.equal(one.best_context.vectors, two.best_context.vectors)


def test_train_seed_changes_the_run(tiny_dataset, tiny_bundle, train_pools):
    _, bank, space = tiny_dataset
    train_pool, val_pool, _ = train_pools
    one = train(tiny_bundle, bank, train_pool, val_pool, space, quick_config(seed=3))
    two = train(tiny_bundle, bank, train_pool, val_pool, space, quick_config(seed=4))
    assert one.loss_history != two.loss_history


def test_train_reduces_loss_and_freezes_encoders(tiny_dataset, tiny_bundle, train_pools):
    _, bank, space = tiny_dataset
    train_pool, val_pool, _ = train_pools
    before = tiny_bundle.frozen_fingerprint()
    state = train(tiny_bundle, bank, train_pool, val_pool, space, quick_config())
    assert tiny_bundle.frozen_fingerprint() == before
    assert state.loss_history[-1] < state.loss_history[0]
    assert state.epoch == 6
    assert len(state.loss_history) == 6 * 2  # 16 train ids in batches of 8
    assert len(state.val_history) == 6


def test_train_tracks_the_best_validation_epoch(tiny_dataset, tiny_bundle, train_pools):
    _, bank, space = tiny_dataset
    train_pool, val_pool, _ = train_pools
    state = train(tiny_bundle, bank, train_pool, val_pool, space, quick_config())
    assert state.best_val_metric == min(state.val_history)
    assert state.best_epoch == state.val_history.index(state.best_val_metric) + 1
    # Recompute the best context's validation loss from public pieces.
    targets = {t.image_id: t.targets for t in derive_concept_targets(val_pool, bank, space)}
    logits = infer_concepts(tiny_bundle, state.best_context, val_pool, space)
    recomputed = float(
        np.mean([concept_bce(row.probabilities, targets[row.image_id]) for row in logits])
    )
    assert recomputed == pytest.approx(state.best_val_metric, rel=1e-9)


def test_train_rejects_empty_pool(tiny_dataset, tiny_bundle):
    _, bank, space = tiny_dataset
    with pytest.raises(TrainingError):
        train(tiny_bundle, bank, [], [], space, quick_config())


def test_train_aborts_on_non_finite_loss(tiny_dataset, tiny_bundle, train_pools, monkeypatch):
    _, bank, space = tiny_dataset
    train_pool, val_pool, _ = train_pools

    def poisoned(*args, **kwargs):
        return torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True)

    monkeypatch.setattr(stage1, "_batch_loss", poisoned)
    with pytest.raises(TrainingError) as err:
        train(tiny_bundle, bank, train_pool, val_pool, space, quick_config())
    message = str(err.value)
    assert "epoch 1" in message
    assert "lr=" in message
    assert "batch id" in message


def test_train_records_access_log(tiny_dataset, tiny_bundle, train_pools):
    _, bank, space = tiny_dataset
    train_pool, val_pool, _ = train_pools
    log = AccessLog()
    train(tiny_bundle, bank, train_pool, val_pool, space, quick_config(), access_log=log)
    assert log.ids("stage1-train") == {s.image_id for s in train_pool}
    assert log.ids("stage1-val") == {s.image_id for s in val_pool}


def test_infer_concepts_is_stateless_per_sample(tiny_dataset, tiny_bundle, train_pools):
    _, _, space = tiny_dataset
    _, _, test_pool = train_pools
    context = new_context(2, tiny_bundle.d_tok, seed=8)
    log = AccessLog()
    forward = infer_concepts(tiny_bundle, context, test_pool, space, access_log=log, phase="p")
    backward = infer_concepts(tiny_bundle, context, list(reversed(test_pool)), space)
    by_id = {row.image_id: row.scores for row in backward}
    for row in forward:
        assert np.array_equal(row.scores, by_id[row.image_id])
    assert log.ids("p") == {s.image_id for s in test_pool}


def test_logits_file_round_trip(tmp_path):
    rows = [
        ConceptLogits(image_id="a", scores=np.array([1.25, -3.5, 0.001])),
        ConceptLogits(image_id="b", scores=np.array([-0.125, 2.0, 9.75])),
    ]
    path = tmp_path / "logits.tsv"
    save_logits(rows, path, bank_version=4, label_space_digest="deadbeef")
    loaded, header = load_logits(path)
    assert header == {"E": 3, "bank_version": 4, "label_space_digest": "deadbeef"}
    assert [r.image_id for r in loaded] == ["a", "b"]
    for original, back in zip(rows, loaded):
        # Written as float32: the round trip matches to float32 resolution.
        assert np.array_equal(back.scores, original.scores.astype(np.float32).astype(np.float64))


def test_save_logits_rejects_ragged_rows(tmp_path):
    rows = [
        ConceptLogits(image_id="a", scores=np.array([1.0, 2.0])),
        ConceptLogits(image_id="b", scores=np.array([1.0])),
    ]
    with pytest.raises(ContractViolation):
        save_logits(rows, tmp_path / "x.tsv", bank_version=1, label_space_digest="d")


def test_load_logits_rejects_malformed_rows(tmp_path):
    path = tmp_path / "logits.tsv"
    path.write_text(
        '{"E": 2, "bank_version": 1, "label_space_digest": "d"}\na\t1.0\n',
        encoding="utf-8",
    )
    with pytest.raises(ConfigurationError) as err:
        load_logits(path)
    assert "line 2" in str(err.value)


def test_check_checkpoint_compat(tiny_dataset):
    _, bank, space = tiny_dataset
    good = {"bank_version": bank.version, "label_space_digest": space.digest}
    check_checkpoint_compat(good, bank, space)
    with pytest.raises(ConfigurationError):
        check_checkpoint_compat({**good, "bank_version": bank.version + 1}, bank, space)
    with pytest.raises(ConfigurationError):
        check_checkpoint_compat({**good, "label_space_digest": "stale"}, bank, space)

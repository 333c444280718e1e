from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from conceptguide import protocols
from conceptguide.bank import Concept, ConceptBank, DiseaseEntry
from conceptguide.config import canonical_json
from conceptguide.data import LabelSpace, generate_synthetic, label_space_for
from conceptguide.encoders import mock_bundle
from conceptguide.errors import ContractViolation, DataError
from conceptguide.protocols import (
    NOVEL_SCORING_RULE,
    ProtocolSpec,
    bank_prior_scores,
    format_cell,
    run_ablation,
    run_base_to_novel,
    run_few_shot,
    train_joint,
    write_report,
)
from conceptguide.stage1 import ConceptLogits, TrainConfig
from conceptguide.stage2 import predict


@pytest.fixture(scope="module")
def protocol_setup():
    samples, bank = generate_synthetic(
        k=3, e_per_disease=2, shared_fraction=0.0, images_per_disease=10, noise=0.0, seed=6
    )
    space = label_space_for(samples, bank)
    bundle = mock_bundle(seed=4, d=16)
    config = TrainConfig(lr=0.05, epochs=3, warmup_epochs=1, batch_size=16, m=2)
    return samples, bank, space, bundle, config


def test_protocol_spec_normalizes_aliases_and_validates():
    spec = ProtocolSpec(stage2_kind="lr")
    assert spec.stage2_kind == "logistic_regression"
    assert spec.to_dict()["stage2_kind"] == "logistic_regression"
    with pytest.raises(ContractViolation):
        ProtocolSpec(task="open_set")
    with pytest.raises(ContractViolation):
        ProtocolSpec(stage2_kind="boosting")
    with pytest.raises(ContractViolation):
        ProtocolSpec(seeds=())


def test_format_cell():
    assert format_cell(0.95, 0.01234) == "0.9500±0.0123"
    assert format_cell(1.0, 0.0) == "1.0000±0.0000"


def logit(p):
    return math.log(p / (1.0 - p))


def test_bank_prior_scores_hand_case():
    bank = ConceptBank()
    for cid in ("c0", "c1", "c2"):
        bank.add_concept(Concept(id=cid, display_name=cid, status="validated"))
    bank.diseases["A"] = DiseaseEntry(name="A", concept_ids={"c0", "c1"})
    bank.diseases["B"] = DiseaseEntry(name="B", concept_ids={"c2"})
    space = LabelSpace(diseases=("A", "B"), concept_ids=("c0", "c1", "c2"))
    # Probabilities decode to [0.9, 0.7, 0.2]:
    # score_A = mean(0.9, 0.7) - 0.2 = 0.6; score_B = 0.2 - mean(0.9, 0.7) = -0.6.
    row = ConceptLogits(image_id="x", scores=np.array([logit(0.9), logit(0.7), logit(0.2)]))
    scores = bank_prior_scores([row], bank, space, ("A", "B"))
    assert scores.shape == (1, 2)
    assert scores[0, 0] == pytest.approx(0.6, abs=1e-12)
    assert scores[0, 1] == pytest.approx(-0.6, abs=1e-12)


def test_bank_prior_scores_needs_concepts_in_space():
    bank = ConceptBank()
    bank.add_concept(Concept(id="c0", display_name="c0", status="validated"))
    bank.diseases["A"] = DiseaseEntry(name="A", concept_ids={"c0"})
    bank.diseases["ghost"] = DiseaseEntry(name="ghost", concept_ids={"c9"})
    space = LabelSpace(diseases=("A",), concept_ids=("c0",))
    row = ConceptLogits(image_id="x", scores=np.array([0.0]))
    with pytest.raises(DataError):
        bank_prior_scores([row], bank, space, ("ghost",))


def test_run_few_shot_report_shape(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    protocol = ProtocolSpec(task="few_shot", shots=4, seeds=(1, 2), stage2_kind="lr")
    report = run_few_shot(protocol, samples, space, bank, bundle, config)
    assert report["task"] == "few_shot"
    assert report["encoder"] == bundle.name
    assert report["encoder_fingerprint"] == bundle.frozen_fingerprint()
    assert report["label_space_digest"] == space.digest
    assert report["bank_version"] == bank.version
    for metric in ("mAP", "weighted_f1"):
        agg = report["aggregates"][metric]
        assert len(agg["per_seed"]) == 2
        assert agg["mean"] == pytest.approx(np.mean(agg["per_seed"]))
    assert [row["seed"] for row in report["per_seed"]] == [1, 2]
    for row in report["per_seed"]:
        assert set(row["episode_counts"]) == set(space.diseases)
        assert "stage1-train" in row["access"]
        assert row["access"]["stage1-train"]["unique_ids"] > 0
    # The stored train_config is seed-neutral; per-seed configs derive from it.
    assert report["train_config"]["seed"] == 0


def test_run_few_shot_is_byte_deterministic(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    protocol = ProtocolSpec(task="few_shot", shots=4, seeds=(1,), stage2_kind="lr")
    one = run_few_shot(protocol, samples, space, bank, bundle, config, config={"x": 1})
    two = run_few_shot(protocol, samples, space, bank, bundle, config, config={"x": 1})
    assert canonical_json(one) == canonical_json(two)
    assert one["config_digest"] == two["config_digest"]


def test_run_few_shot_needs_a_test_split(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    no_test = [s for s in samples if s.split != "test"]
    with pytest.raises(DataError):
        run_few_shot(ProtocolSpec(seeds=(1,)), no_test, space, bank, bundle, config)


def test_run_few_shot_flags_shortfall(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    protocol = ProtocolSpec(task="few_shot", shots=50, seeds=(1,), stage2_kind="lr")
    report = run_few_shot(protocol, samples, space, bank, bundle, config)
    assert any("fewer than 50" in w for w in report["warnings"])


def test_run_base_to_novel_report_and_hygiene(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    protocol = ProtocolSpec(task="base_to_novel", shots=4, seeds=(1, 2), stage2_kind="lr")
    report = run_base_to_novel(protocol, samples, space, bank, bundle, config)
    assert report["task"] == "base_to_novel"
    assert report["novel_scoring_rule"] == NOVEL_SCORING_RULE
    # 3 diseases with equal train counts: name tiebreak puts the first two
    # in base, the last in novel.
    assert report["split"] == {"base": ["disease00", "disease01"], "novel": ["disease02"]}
    for row in report["per_seed"]:
        hygiene = row["hygiene"]
        assert hygiene["novel_labeled_ids"] == 10
        assert hygiene["training_reads"] > 0
        assert hygiene["novel_reads_during_training"] == 0
        assert [name for name, _ in row["per_class_ap"]] == ["disease02"]


def test_run_base_to_novel_guard_fires_on_novel_reads(protocol_setup, monkeypatch):
    samples, bank, space, bundle, config = protocol_setup

    from conceptguide.data import split_base_novel as real_split

    def leaky_split(all_samples, label_space):
        split, _ = real_split(all_samples, label_space)
        # Return the unfiltered train pool: novel-labeled samples included.
        return split, [s for s in all_samples if s.split == "train"]

    monkeypatch.setattr(protocols, "split_base_novel", leaky_split)
    protocol = ProtocolSpec(task="base_to_novel", shots=4, seeds=(1,), stage2_kind="lr")
    with pytest.raises(ContractViolation) as err:
        run_base_to_novel(protocol, samples, space, bank, bundle, config)
    assert "hygiene" in str(err.value)


def test_run_base_to_novel_needs_novel_test_samples(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    pruned = [
        s
        for s in samples
        if not (s.split == "test" and "disease02" in s.disease_labels)
    ]
    with pytest.raises(DataError):
        run_base_to_novel(ProtocolSpec(seeds=(1,)), pruned, space, bank, bundle, config)


def test_run_ablation_token_position_grid(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    protocol = ProtocolSpec(shots=4, seeds=(1,))
    table = run_ablation("token_position", protocol, samples, space, bank, bundle, config)
    assert table["rows"] == ["logistic_regression", "linear_svm", "random_forest", "mlp"]
    assert table["columns"] == ["START", "MIDDLE", "END"]
    assert table["column_axis"] == "position"
    for kind in table["rows"]:
        for column in table["columns"]:
            cell = table["cells"][kind][column]
            assert set(cell) == {"mean", "std", "per_seed", "display"}
            assert len(cell["per_seed"]) == 1
            assert cell["display"] == format_cell(cell["mean"], cell["std"])


def test_run_ablation_num_tokens_and_shots_columns(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    protocol = ProtocolSpec(shots=4, seeds=(1,))
    tokens = run_ablation(
        "num_tokens", protocol, samples, space, bank, bundle, config, token_counts=(2, 4)
    )
    assert tokens["columns"] == ["2", "4"]
    assert tokens["column_axis"] == "M"
    kinds = run_ablation(
        "stage2_kind", protocol, samples, space, bank, bundle, config, shot_counts=(2, 4)
    )
    assert kinds["columns"] == ["2", "4"]
    assert kinds["column_axis"] == "shots"
    # The mlp row of this sweep is the jointly-trained variant; it still
    # produces a complete set of cells.
    assert all(kinds["cells"]["mlp"][c]["per_seed"] for c in kinds["columns"])


def test_run_ablation_rejects_unknown_sweep(protocol_setup):
    samples, bank, space, bundle, config = protocol_setup
    with pytest.raises(ContractViolation):
        run_ablation("encoder_depth", ProtocolSpec(), samples, space, bank, bundle, config)


def test_train_joint_learns_and_stays_frozen(protocol_setup):
    samples, bank, space, bundle, _ = protocol_setup
    train_pool = [s for s in samples if s.split == "train"][:12]
    val_pool = [s for s in samples if s.split == "val"]
    config = TrainConfig(lr=0.05, epochs=8, warmup_epochs=2, batch_size=12, m=2)
    before = bundle.frozen_fingerprint()
    context, model, losses = train_joint(bundle, bank, train_pool, val_pool, space, config)
    assert bundle.frozen_fingerprint() == before
    assert losses[-1] < losses[0]
    assert model.kind == "mlp"
    assert model.diseases == space.diseases
    # The returned pieces predict end to end.
    from conceptguide.stage1 import infer_concepts

    logits = infer_concepts(bundle, context, train_pool, space)
    predictions = predict(model, logits)
    assert len(predictions) == len(train_pool)
    assert all(p.decision in space.diseases for p in predictions)


def test_train_joint_is_deterministic(protocol_setup):
    samples, bank, space, bundle, _ = protocol_setup
    train_pool = [s for s in samples if s.split == "train"][:8]
    config = TrainConfig(lr=0.05, epochs=3, warmup_epochs=1, batch_size=8, m=2)
    _, _, one = train_joint(bundle, bank, train_pool, [], space, config)
    ctx_a, model_a, two = train_joint(bundle, bank, train_pool, [], space, config)
    assert one == two
    ctx_b, model_b, _ = train_joint(bundle, bank, train_pool, [], space, config)
    assert torch.equal(ctx_a.vectors, ctx_b.vectors)
    assert np.array_equal(model_a.heads["mlp"]["w1"], model_b.heads["mlp"]["w1"])


def test_write_report_is_canonical(protocol_setup, tmp_path):
    samples, bank, space, bundle, config = protocol_setup
    protocol = ProtocolSpec(task="few_shot", shots=4, seeds=(1,), stage2_kind="lr")
    report = run_few_shot(protocol, samples, space, bank, bundle, config)
    path = tmp_path / "report.json"
    write_report(report, path)
    assert path.read_text(encoding="utf-8") == canonical_json(report)
    assert path.read_text(encoding="utf-8").endswith("\n")

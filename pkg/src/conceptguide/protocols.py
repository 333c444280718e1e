"""Measurement protocols: n-shot classification, base-to-novel zero-shot
transfer with an instrumented access log, the three ablation sweeps, and
the joint context+MLP trainer used by the end-to-end ablation row.

Reports are plain dicts rendered through canonical_json, so a rerun with
the same config digest produces byte-identical files; nothing wall-clock
or path-dependent is allowed in."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .bank import ConceptBank, STATUS_VALIDATED
from .config import canonical_json, config_digest
from .data import (
    AccessLog,
    ImageSample,
    LabelSpace,
    sample_episode,
    split_base_novel,
)
from .encoders import EncoderBundle, PromptContext, encode_concepts, new_context
from .errors import ContractViolation, DataError, TrainingError
from .metrics import MetricResult, mean_average_precision, weighted_f1
from .stage1 import (
    ConceptLogits,
    TrainConfig,
    infer_concepts,
    learning_rate,
    train,
)
from .stage2 import (
    KIND_MLP,
    KINDS,
    KIND_ALIASES,
    Stage2Model,
    fit,
    predict,
)
from .rng import sample_without_replacement, stream_for

TASKS = ("few_shot", "base_to_novel")
SWEEPS = ("token_position", "num_tokens", "stage2_kind")

SWEEP_POSITIONS = ("START", "MIDDLE", "END")
SWEEP_TOKEN_COUNTS = (2, 4, 8, 16, 32, 64)
SWEEP_SHOT_COUNTS = (2, 4, 8, 16)

NOVEL_SCORING_RULE = (
    "novel disease score = mean predicted probability of the disease's bank concepts "
    "minus mean predicted probability of all other concepts (bank-prior linear head); "
    "base diseases are scored by the fitted stage-2 model"
)


@dataclass(frozen=True)
class ProtocolSpec:
    task: str = "few_shot"
    shots: int = 16
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    stage2_kind: str = "logistic_regression"
    mode: str = "single_label"
    input_space: str = "scores"
    joint_mlp: bool = False  # Table-5 MLP row: train context and MLP together

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractViolation(f"task must be one of {TASKS}")
        kind = KIND_ALIASES.get(self.stage2_kind, self.stage2_kind)
        if kind not in KINDS:
            raise ContractViolation(f"stage2_kind must map into {KINDS}")
        object.__setattr__(self, "stage2_kind", kind)
        if not self.seeds:
            raise ContractViolation("at least one seed required")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "shots": self.shots,
            "seeds": list(self.seeds),
            "stage2_kind": self.stage2_kind,
            "mode": self.mode,
            "input_space": self.input_space,
            "joint_mlp": self.joint_mlp,
        }


def _labels_of(samples: list[ImageSample]) -> dict:
    return {s.image_id: s.disease_labels for s in samples}


def _metric_dict(result: MetricResult) -> dict:
    out = {
        "mean": result.mean,
        "std": result.std,
        "per_seed": result.per_seed,
    }
    if result.per_class is not None:
        out["per_class"] = [[name, value] for name, value in result.per_class]
    return out


def _access_summary(log: AccessLog) -> dict:
    return {phase: {"unique_ids": len(log.ids(phase)), "reads": log.count(phase)} for phase in log.phases()}


def _episode_pool(samples: list[ImageSample], pool: list[ImageSample], shots: int, seed: int):
    episode = sample_episode(pool, shots, seed)
    by_id = {s.image_id: s for s in pool}
    return episode, [by_id[i] for i in episode.unique_ids()]


def bank_prior_scores(
    logits: list[ConceptLogits],
    bank: ConceptBank,
    label_space: LabelSpace,
    diseases: tuple[str, ...],
) -> np.ndarray:
    """Zero-shot head: no fitted parameters, only the bank's
    disease-to-concept mapping over predicted concept probabilities."""
    index = label_space.concept_index()
    masks = []
    for disease in diseases:
        entry = bank.diseases[disease]
        ids = [
            index[cid]
            for cid in sorted(entry.concept_ids)
            if cid in index and bank.concepts[cid].status == STATUS_VALIDATED
        ]
        if not ids:
            raise DataError(f"disease {disease!r} has no validated concepts in the label space")
        mask = np.zeros(label_space.E, dtype=bool)
        mask[ids] = True
        masks.append(mask)
    out = np.zeros((len(logits), len(diseases)))
    for i, row in enumerate(logits):
        p = row.probabilities
        for j, mask in enumerate(masks):
            inside = float(p[mask].mean())
            outside = float(p[~mask].mean()) if (~mask).any() else 0.0
            out[i, j] = inside - outside
    return out


def run_few_shot(
    protocol: ProtocolSpec,
    samples: list[ImageSample],
    label_space: LabelSpace,
    bank: ConceptBank,
    bundle: EncoderBundle,
    train_config: TrainConfig,
    config: dict | None = None,
) -> dict:
    """Per seed: sample an episode, tune the context on it, fit stage 2 on
    the episode's logits, score the full test split."""
    bundle.image_encoder.bind_label_space(label_space)
    labels = _labels_of(samples)
    val_pool = [s for s in samples if s.split == "val"]
    test_pool = [s for s in samples if s.split == "test"]
    if not test_pool:
        raise DataError("test split is empty")

    per_seed_rows = []
    map_values: list[float] = []
    f1_values: list[float] = []
    warnings: list[str] = []
    for seed in protocol.seeds:
        episode, train_pool = _episode_pool(samples, samples, protocol.shots, seed)
        if any(episode.shortfall.values()):
            short = sorted(d for d, flag in episode.shortfall.items() if flag)
            warnings.append(f"seed {seed}: diseases {short} have fewer than {protocol.shots} train images")
        log = AccessLog()
        cfg = replace(train_config, seed=seed)
        notes: list[str] = []

        if protocol.stage2_kind == KIND_MLP and protocol.joint_mlp:
            context, model, losses = train_joint(
                bundle, bank, train_pool, val_pool, label_space, cfg,
                mode=protocol.mode, hyper={"seed": seed}, access_log=log,
            )
            best_epoch = cfg.epochs
        else:
            state = train(bundle, bank, train_pool, val_pool, label_space, cfg, access_log=log)
            context = state.best_context
            best_epoch = state.best_epoch
            losses = state.loss_history
            train_logits = infer_concepts(
                bundle, context, train_pool, label_space, access_log=log, phase="stage1-infer-train"
            )
            model = fit(
                protocol.stage2_kind,
                train_logits,
                labels,
                label_space,
                mode=protocol.mode,
                hyper={"seed": seed},
                input_space=protocol.input_space,
            )
        test_logits = infer_concepts(
            bundle, context, test_pool, label_space, access_log=log, phase="stage1-infer-test"
        )
        predictions = predict(model, test_logits)
        map_result = mean_average_precision(predictions, labels, model.diseases, notes=notes)
        f1 = weighted_f1(predictions, labels, model.diseases)
        map_values.append(map_result.mean)
        f1_values.append(f1)
        per_seed_rows.append(
            {
                "seed": seed,
                "mAP": map_result.mean,
                "weighted_f1": f1,
                "per_class_ap": [[n, v] for n, v in map_result.per_class],
                "best_epoch": best_epoch,
                "final_train_loss": losses[-1] if losses else None,
                "episode_counts": dict(sorted(episode.effective_counts().items())),
                "access": _access_summary(log),
                "stage2_warnings": list(model.warnings),
                "notes": notes,
            }
        )

    aggregates = {
        "mAP": _metric_dict(MetricResult.from_per_seed("mAP", map_values)),
        "weighted_f1": _metric_dict(MetricResult.from_per_seed("weighted_f1", f1_values)),
    }
    report = {
        "task": "few_shot",
        "protocol": protocol.to_dict(),
        "train_config": asdict(replace(train_config, seed=0)),
        "encoder": bundle.name,
        "encoder_fingerprint": bundle.frozen_fingerprint(),
        "bank_version": bank.version,
        "label_space_digest": label_space.digest,
        "aggregates": aggregates,
        "per_seed": per_seed_rows,
        "warnings": warnings,
    }
    if config is not None:
        report["config_digest"] = config_digest(config)
    return report


def run_base_to_novel(
    protocol: ProtocolSpec,
    samples: list[ImageSample],
    label_space: LabelSpace,
    bank: ConceptBank,
    bundle: EncoderBundle,
    train_config: TrainConfig,
    config: dict | None = None,
) -> dict:
    """Train on base-only samples with the full concept bank, then score
    novel test samples the trainer never read. The access log is the
    proof: training-phase reads must not intersect novel-labeled ids."""
    bundle.image_encoder.bind_label_space(label_space)
    labels = _labels_of(samples)
    split, base_train_pool = split_base_novel(samples, label_space)
    novel_set = set(split.novel)
    if not novel_set:
        raise DataError("base/novel split produced no novel diseases")
    novel_labeled_ids = {s.image_id for s in samples if s.disease_labels & novel_set}
    base_val_pool = [
        s for s in samples if s.split == "val" and s.disease_labels <= set(split.base)
    ]
    novel_test_pool = [
        s for s in samples if s.split == "test" and s.disease_labels & novel_set
    ]
    if not novel_test_pool:
        raise DataError("no test samples carry a novel label; nothing to evaluate")

    base_space = LabelSpace(diseases=split.base, concept_ids=label_space.concept_ids)

    per_seed_rows = []
    map_values: list[float] = []
    f1_values: list[float] = []
    warnings: list[str] = []
    for seed in protocol.seeds:
        episode, train_pool = _episode_pool(samples, base_train_pool, protocol.shots, seed)
        log = AccessLog()
        cfg = replace(train_config, seed=seed)
        state = train(bundle, bank, train_pool, base_val_pool, label_space, cfg, access_log=log)
        context = state.best_context

        trained_ids = log.ids("stage1-train") | log.ids("stage1-val")
        overlap = sorted(trained_ids & novel_labeled_ids)
        if overlap:
            raise ContractViolation(
                f"zero-shot hygiene broken: training read novel-labeled samples {overlap[:5]}"
            )

        train_logits = infer_concepts(
            bundle, context, train_pool, label_space, access_log=log, phase="stage1-infer-train"
        )
        base_model = fit(
            protocol.stage2_kind,
            train_logits,
            labels,
            base_space,
            mode=protocol.mode,
            hyper={"seed": seed},
            input_space=protocol.input_space,
        )
        test_logits = infer_concepts(
            bundle, context, novel_test_pool, label_space, access_log=log, phase="stage1-infer-test"
        )

        base_scores = np.stack([p.scores for p in predict(base_model, test_logits)])
        novel_scores = bank_prior_scores(test_logits, bank, label_space, split.novel)
        diseases = split.base + split.novel
        notes: list[str] = []
        predictions = []
        from .stage2 import DiseasePrediction

        novel_order = list(split.novel)
        for i, row in enumerate(test_logits):
            scores = np.concatenate([base_scores[i], novel_scores[i]])
            decision = novel_order[int(np.argmax(novel_scores[i]))]
            predictions.append(
                DiseasePrediction(image_id=row.image_id, scores=scores, decision=decision)
            )
        map_result = mean_average_precision(
            predictions, labels, diseases, class_set=split.novel, notes=notes
        )
        f1 = weighted_f1(predictions, labels, split.novel)
        map_values.append(map_result.mean)
        f1_values.append(f1)
        per_seed_rows.append(
            {
                "seed": seed,
                "mAP": map_result.mean,
                "weighted_f1": f1,
                "per_class_ap": [[n, v] for n, v in map_result.per_class],
                "hygiene": {
                    "novel_labeled_ids": len(novel_labeled_ids),
                    "training_reads": len(trained_ids),
                    "novel_reads_during_training": len(trained_ids & novel_labeled_ids),
                },
                "access": _access_summary(log),
                "notes": notes,
            }
        )

    aggregates = {
        "mAP": _metric_dict(MetricResult.from_per_seed("mAP", map_values)),
        "weighted_f1": _metric_dict(MetricResult.from_per_seed("weighted_f1", f1_values)),
    }
    report = {
        "task": "base_to_novel",
        "novel_scoring_rule": NOVEL_SCORING_RULE,
        "protocol": protocol.to_dict(),
        "train_config": asdict(replace(train_config, seed=0)),
        "encoder": bundle.name,
        "encoder_fingerprint": bundle.frozen_fingerprint(),
        "bank_version": bank.version,
        "label_space_digest": label_space.digest,
        "split": {"base": list(split.base), "novel": list(split.novel)},
        "aggregates": aggregates,
        "per_seed": per_seed_rows,
        "warnings": warnings,
    }
    if config is not None:
        report["config_digest"] = config_digest(config)
    return report


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.4f}±{std:.4f}"


def run_ablation(
    sweep: str,
    protocol: ProtocolSpec,
    samples: list[ImageSample],
    label_space: LabelSpace,
    bank: ConceptBank,
    bundle: EncoderBundle,
    train_config: TrainConfig,
    token_counts: tuple[int, ...] = SWEEP_TOKEN_COUNTS,
    shot_counts: tuple[int, ...] = SWEEP_SHOT_COUNTS,
) -> dict:
    """Grid runs sharing stage-1 work where the grid allows it. Rows are
    the four stage-2 kinds; columns are positions, token counts, or shot
    counts depending on the sweep. Cells hold mean and std of test mAP
    over the protocol seeds."""
    if sweep not in SWEEPS:
        raise ContractViolation(f"sweep must be one of {SWEEPS}")
    bundle.image_encoder.bind_label_space(label_space)
    labels = _labels_of(samples)
    val_pool = [s for s in samples if s.split == "val"]
    test_pool = [s for s in samples if s.split == "test"]
    if not test_pool:
        raise DataError("test split is empty")

    if sweep == "token_position":
        columns = list(SWEEP_POSITIONS)
    elif sweep == "num_tokens":
        columns = [str(m) for m in token_counts]
    else:
        columns = [str(n) for n in shot_counts]
    rows = list(KINDS)

    # per_cell[row][col] = list of per-seed mAP values
    per_cell: dict[str, dict[str, list[float]]] = {r: {c: [] for c in columns} for r in rows}

    for col in columns:
        cfg = train_config
        shots = protocol.shots
        if sweep == "token_position":
            cfg = replace(train_config, position_policy=col)
        elif sweep == "num_tokens":
            cfg = replace(train_config, m=int(col))
        else:
            shots = int(col)
        for seed in protocol.seeds:
            episode, train_pool = _episode_pool(samples, samples, shots, seed)
            seed_cfg = replace(cfg, seed=seed)
            state = train(bundle, bank, train_pool, val_pool, label_space, seed_cfg)
            context = state.best_context
            train_logits = infer_concepts(bundle, context, train_pool, label_space)
            test_logits = infer_concepts(bundle, context, test_pool, label_space)
            for kind in rows:
                if kind == KIND_MLP and sweep == "stage2_kind":
                    # Table-style end-to-end row: retrain context jointly.
                    joint_context, model, _ = train_joint(
                        bundle, bank, train_pool, val_pool, label_space, seed_cfg,
                        mode=protocol.mode, hyper={"seed": seed},
                    )
                    kind_test_logits = infer_concepts(bundle, joint_context, test_pool, label_space)
                else:
                    model = fit(
                        kind, train_logits, labels, label_space,
                        mode=protocol.mode, hyper={"seed": seed},
                        input_space=protocol.input_space,
                    )
                    kind_test_logits = test_logits
                predictions = predict(model, kind_test_logits)
                result = mean_average_precision(predictions, labels, model.diseases)
                per_cell[kind][col].append(result.mean)

    cells = {}
    for kind in rows:
        cells[kind] = {}
        for col in columns:
            agg = MetricResult.from_per_seed("mAP", per_cell[kind][col])
            cells[kind][col] = {
                "mean": agg.mean,
                "std": agg.std,
                "per_seed": agg.per_seed,
                "display": format_cell(agg.mean, agg.std),
            }

    return {
        "sweep": sweep,
        "metric": "mAP",
        "row_axis": "stage2_kind",
        "rows": rows,
        "column_axis": {"token_position": "position", "num_tokens": "M", "stage2_kind": "shots"}[sweep],
        "columns": columns,
        "cells": cells,
        "seeds": list(protocol.seeds),
        "shots": protocol.shots,
        "encoder": bundle.name,
        "bank_version": bank.version,
        "label_space_digest": label_space.digest,
    }


def train_joint(
    bundle: EncoderBundle,
    bank: ConceptBank,
    train_samples: list[ImageSample],
    val_samples: list[ImageSample],
    label_space: LabelSpace,
    config: TrainConfig,
    mode: str = "single_label",
    hyper: dict | None = None,
    access_log: AccessLog | None = None,
) -> tuple[PromptContext, Stage2Model, list[float]]:
    """End-to-end variant: context and a one-hidden-layer MLP optimized
    together under disease cross-entropy plus the concept BCE as an
    auxiliary term with weight 1.0."""
    from .stage1 import _batch_loss, _encode_pool, derive_concept_targets

    if not train_samples:
        raise TrainingError("training pool is empty")
    merged = {"hidden": 64, "seed": 0}
    merged.update(hyper or {})
    fingerprint_before = bundle.frozen_fingerprint()

    concept_targets = {
        t.image_id: t.targets for t in derive_concept_targets(train_samples, bank, label_space)
    }
    feats = _encode_pool(bundle, train_samples, access_log, "stage1-train")
    labels = _labels_of(train_samples)
    disease_index = label_space.disease_index()

    ids = sorted(feats)
    features = {i: torch.as_tensor(feats[i], dtype=torch.float64) for i in ids}
    c_targets = {i: torch.as_tensor(concept_targets[i], dtype=torch.float64) for i in ids}
    d_targets = {}
    for i in ids:
        row = torch.zeros(label_space.K, dtype=torch.float64)
        for name in labels[i]:
            row[disease_index[name]] = 1.0
        d_targets[i] = row

    context = new_context(
        config.m, bundle.d_tok, config.position_policy, seed=config.seed, sigma=config.init_sigma
    )
    gen = torch.Generator().manual_seed(int(merged["seed"]))
    hidden = int(merged["hidden"])
    w1 = (torch.randn(hidden, label_space.E, dtype=torch.float64, generator=gen) * (2.0 / label_space.E) ** 0.5).requires_grad_(True)
    b1 = torch.zeros(hidden, dtype=torch.float64, requires_grad=True)
    w2 = (torch.randn(label_space.K, hidden, dtype=torch.float64, generator=gen) * (2.0 / hidden) ** 0.5).requires_grad_(True)
    b2 = torch.zeros(label_space.K, dtype=torch.float64, requires_grad=True)

    optimizer = torch.optim.SGD(
        [context.vectors, w1, b1, w2, b2], lr=config.lr, momentum=config.momentum
    )
    losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        lr = learning_rate(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = sample_without_replacement(ids, len(ids), stream_for(config.seed, f"joint-{epoch:04d}"))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            optimizer.zero_grad()
            concept_features = encode_concepts(bundle, context, label_space)
            f = torch.stack([features[i] for i in batch])
            ct = torch.stack([c_targets[i] for i in batch])
            dt = torch.stack([d_targets[i] for i in batch])
            scores = bundle.logit_scale * (f @ concept_features.T)
            bce = _batch_loss(bundle, concept_features, f, ct)
            out = torch.tanh(scores @ w1.T + b1) @ w2.T + b2
            if mode == "single_label":
                ce = torch.nn.functional.cross_entropy(out, dt.argmax(dim=1))
            else:
                ce = torch.nn.functional.binary_cross_entropy_with_logits(out, dt)
            loss = ce + 1.0 * bce
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError(f"joint loss is not finite at epoch {epoch} (lr={lr:g})")
            loss.backward()
            optimizer.step()
            losses.append(value)

    if bundle.frozen_fingerprint() != fingerprint_before:
        raise TrainingError("encoder fingerprint changed during joint training")

    model = Stage2Model(
        kind=KIND_MLP,
        mode=mode,
        diseases=label_space.diseases,
        e=label_space.E,
        label_space_digest=label_space.digest,
        input_space="scores",
        hyper=dict(merged),
        heads={
            "mlp": {
                "w1": w1.detach().numpy(),
                "b1": b1.detach().numpy(),
                "w2": w2.detach().numpy(),
                "b2": b2.detach().numpy(),
            }
        },
    )
    return context, model, losses


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(report))

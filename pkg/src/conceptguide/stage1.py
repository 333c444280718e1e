"""Stage 1: tune the shared prompt context so per-concept similarity
scores match the label-derived concept targets under mean binary
cross-entropy. Encoders stay frozen; the context matrix is the only
parameter that moves."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .bank import ConceptBank
from .data import AccessLog, ConceptTarget, ImageSample, LabelSpace, derive_concept_targets
from .encoders import (
    EncoderBundle,
    FeatureVector,
    POSITION_END,
    POSITIONS,
    PromptContext,
    encode_concepts,
    encode_image,
    new_context,
)
from .errors import ConfigurationError, ContractViolation, TrainingError
from .rng import sample_without_replacement, stream_for

LOG_EPS = 1e-12
SCHEDULES = ("cosine", "constant")


@dataclass
class ConceptLogits:
    image_id: str
    scores: np.ndarray  # pre-sigmoid, length E

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ContractViolation("scores must be a vector")

    @property
    def probabilities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.scores))

    @property
    def E(self) -> int:
        return int(self.scores.shape[0])


@dataclass
class TrainConfig:
    lr: float = 1e-3
    schedule: str = "cosine"
    warmup_epochs: int = 5
    epochs: int = 100
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    m: int = 32
    position_policy: str = POSITION_END
    seed: int = 0
    init_sigma: float = 0.02

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.m < 1:
            raise ConfigurationError("lr, epochs, batch_size and m must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must be in [0, epochs)")
        if self.position_policy not in POSITIONS:
            raise ConfigurationError(f"position_policy must be one of {POSITIONS}")


@dataclass
class TrainState:
    context: PromptContext
    epoch: int
    best_val_metric: float
    loss_history: list[float]
    best_context: PromptContext
    best_epoch: int
    val_history: list[float] = field(default_factory=list)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Linear ramp over the warmup epochs, then cosine decay to zero at the
    final epoch (or flat, for the constant schedule). Epochs are 1-based."""
    if epoch < 1 or epoch > config.epochs:
        raise ConfigurationError(f"epoch {epoch} outside 1..{config.epochs}")
    if config.warmup_epochs and epoch <= config.warmup_epochs:
        return config.lr * epoch / config.warmup_epochs
    if config.schedule == "constant":
        return config.lr
    span = config.epochs - config.warmup_epochs
    progress = (epoch - config.warmup_epochs) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def concept_scores(
    bundle: EncoderBundle,
    context: PromptContext,
    image_feature: FeatureVector,
    concept_features: torch.Tensor,
    image_id: str = "",
) -> ConceptLogits:
    """scores_j = logit_scale * <f, g_j>."""
    if concept_features.ndim != 2:
        raise ContractViolation("concept_features must be an E x D matrix")
    if image_feature.values.shape[0] != concept_features.shape[1]:
        raise ContractViolation(
            f"image feature has dimension {image_feature.values.shape[0]}, "
            f"concept features have {concept_features.shape[1]}"
        )
    with torch.no_grad():
        f = torch.as_tensor(image_feature.values, dtype=torch.float64)
        scores = bundle.logit_scale * (concept_features @ f)
    return ConceptLogits(image_id=image_id, scores=scores.numpy())


def concept_bce(probabilities, targets) -> float:
    """-(1/E) sum_j [c_j log p_j + (1-c_j) log(1-p_j)], logs clamped at
    1e-12."""
    p = np.asarray(probabilities, dtype=np.float64)
    c = np.asarray(targets, dtype=np.float64)
    if p.shape != c.shape or p.ndim != 1 or p.size == 0:
        raise ContractViolation(f"probabilities {p.shape} and targets {c.shape} must be equal-length vectors")
    p = np.clip(p, LOG_EPS, 1.0 - LOG_EPS)
    return float(-np.mean(c * np.log(p) + (1.0 - c) * np.log(1.0 - p)))


def _batch_loss(
    bundle: EncoderBundle,
    concept_features: torch.Tensor,
    features: torch.Tensor,
    targets: torch.Tensor,
) -> torch.Tensor:
    """Differentiable mean-over-batch of the per-image mean BCE."""
    scores = bundle.logit_scale * (features @ concept_features.T)
    probs = torch.clamp(torch.sigmoid(scores), LOG_EPS, 1.0 - LOG_EPS)
    per_image = -(targets * torch.log(probs) + (1.0 - targets) * torch.log(1.0 - probs)).mean(dim=1)
    return per_image.mean()


def _encode_pool(
    bundle: EncoderBundle,
    samples: list[ImageSample],
    access_log: AccessLog | None,
    phase: str,
) -> dict[str, np.ndarray]:
    out = {}
    for s in samples:
        if access_log is not None:
            access_log.record(phase, s.image_id)
        out[s.image_id] = encode_image(bundle, s.image_ref).values
    return out


def train(
    bundle: EncoderBundle,
    bank: ConceptBank,
    train_samples: list[ImageSample],
    val_samples: list[ImageSample],
    label_space: LabelSpace,
    config: TrainConfig,
    access_log: AccessLog | None = None,
) -> TrainState:
    """SGD over the context matrix only. Frozen images and targets are
    encoded once up front; every epoch reshuffles with a seed-keyed stream
    so runs with the same config are step-identical."""
    if not train_samples:
        raise TrainingError("training pool is empty")
    fingerprint_before = bundle.frozen_fingerprint()

    targets = {t.image_id: t.targets for t in derive_concept_targets(train_samples, bank, label_space)}
    val_targets = {t.image_id: t.targets for t in derive_concept_targets(val_samples, bank, label_space)} if val_samples else {}

    feats = _encode_pool(bundle, train_samples, access_log, "stage1-train")
    val_feats = _encode_pool(bundle, val_samples, access_log, "stage1-val")

    ids = sorted(feats)
    feature_mat = {i: torch.as_tensor(feats[i], dtype=torch.float64) for i in ids}
    target_mat = {i: torch.as_tensor(targets[i], dtype=torch.float64) for i in ids}

    context = new_context(
        config.m, bundle.d_tok, config.position_policy, seed=config.seed, sigma=config.init_sigma
    )
    optimizer = torch.optim.SGD(
        [context.vectors], lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )

    loss_history: list[float] = []
    val_history: list[float] = []
    best_val = math.inf
    best_epoch = 0
    best_vectors = context.vectors.detach().clone()

    for epoch in range(1, config.epochs + 1):
        lr = learning_rate(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = sample_without_replacement(ids, len(ids), stream_for(config.seed, f"epoch-{epoch:04d}"))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            optimizer.zero_grad()
            concept_features = encode_concepts(bundle, context, label_space)
            loss = _batch_loss(
                bundle,
                concept_features,
                torch.stack([feature_mat[i] for i in batch]),
                torch.stack([target_mat[i] for i in batch]),
            )
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError(
                    f"loss is not finite at epoch {epoch} (lr={lr:g}, first batch id {batch[0]!r})"
                )
            loss.backward()
            optimizer.step()
            loss_history.append(value)

        if val_feats:
            with torch.no_grad():
                concept_features = encode_concepts(bundle, context, label_space)
                val_loss = float(
                    _batch_loss(
                        bundle,
                        concept_features,
                        torch.stack([torch.as_tensor(val_feats[i], dtype=torch.float64) for i in sorted(val_feats)]),
                        torch.stack([torch.as_tensor(val_targets[i], dtype=torch.float64) for i in sorted(val_feats)]),
                    )
                )
        else:
            val_loss = loss_history[-1]
        val_history.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_vectors = context.vectors.detach().clone()

    fingerprint_after = bundle.frozen_fingerprint()
    if fingerprint_after != fingerprint_before:
        raise TrainingError("encoder fingerprint changed during training; frozen contract broken")

    best_context = PromptContext(
        vectors=best_vectors.requires_grad_(True), position_policy=config.position_policy
    )
    return TrainState(
        context=context,
        epoch=config.epochs,
        best_val_metric=best_val if val_feats else min(val_history),
        loss_history=loss_history,
        best_context=best_context,
        best_epoch=best_epoch,
        val_history=val_history,
    )


def infer_concepts(
    bundle: EncoderBundle,
    context: PromptContext,
    samples: list[ImageSample],
    label_space: LabelSpace,
    access_log: AccessLog | None = None,
    phase: str = "stage1-infer",
) -> list[ConceptLogits]:
    """Deterministic eval-mode logits; the only artifact Stage 2 sees."""
    with torch.no_grad():
        concept_features = encode_concepts(bundle, context, label_space)
    out = []
    for s in samples:
        if access_log is not None:
            access_log.record(phase, s.image_id)
        feature = encode_image(bundle, s.image_ref)
        out.append(
            concept_scores(bundle, context, feature, concept_features, image_id=s.image_id)
        )
    return out


def check_checkpoint_compat(header: dict, bank: ConceptBank, label_space: LabelSpace) -> None:
    if int(header.get("bank_version", -1)) != bank.version:
        raise ConfigurationError(
            f"checkpoint was trained against bank version {header.get('bank_version')}, "
            f"current bank is version {bank.version}; refusing to run"
        )
    if header.get("label_space_digest") != label_space.digest:
        raise ConfigurationError(
            "checkpoint label-space digest does not match the current manifest/bank "
            f"({header.get('label_space_digest')} vs {label_space.digest}); refusing to run"
        )


def save_logits(
    logits: list[ConceptLogits], path, bank_version: int, label_space_digest: str
) -> None:
    """One JSON header line, then one tab-separated row per image. Scores
    are written as float32 with enough digits to round-trip exactly."""
    e = logits[0].E if logits else 0
    header = {"bank_version": bank_version, "label_space_digest": label_space_digest, "E": e}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in logits:
            if row.E != e:
                raise ContractViolation(f"row {row.image_id!r} has E={row.E}, header says {e}")
            cells = "\t".join(f"{float(v):.9g}" for v in row.scores.astype(np.float32))
            fh.write(f"{row.image_id}\t{cells}\n")


def load_logits(path) -> tuple[list[ConceptLogits], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        e = int(header["E"])
        out = []
        for line_num, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != e + 1:
                raise ConfigurationError(
                    f"{path} line {line_num}: expected {e + 1} fields, got {len(parts)}"
                )
            scores = np.array([np.float32(x) for x in parts[1:]], dtype=np.float64)
            out.append(ConceptLogits(image_id=parts[0], scores=scores))
    return out, header

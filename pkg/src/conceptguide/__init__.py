"""Interpretable two-stage disease classification: learnable prompt
contexts predict visual concepts against frozen vision-language encoders,
and inspectable classifiers map those concept logits to diseases."""

from .bank import (
    ConceptBank,
    Concept,
    canonicalize,
    freeze_bank,
    load_bank,
    save_bank,
    validate_concept,
)
from .data import (
    AccessLog,
    BaseNovelSplit,
    FewShotEpisode,
    ImageSample,
    LabelSpace,
    derive_concept_targets,
    generate_synthetic,
    label_space_for,
    load_manifest,
    sample_episode,
    split_base_novel,
    write_manifest,
)
from .encoders import (
    EncoderBundle,
    PromptContext,
    assemble_prompt,
    encode_concepts,
    encode_image,
    load_bundle,
    mock_bundle,
    new_context,
)
from .errors import ConceptGuideError
from .generation import build_bank, collect_generations, intersect_generations, render_template
from .interpret import ContributionReport, contributions, export_sankey
from .metrics import MetricResult, average_precision, mean_average_precision, weighted_f1
from .protocols import ProtocolSpec, run_ablation, run_base_to_novel, run_few_shot, train_joint
from .stage1 import ConceptLogits, TrainConfig, concept_bce, concept_scores, infer_concepts, train
from .stage2 import Stage2Model, concept_weights, fit, predict

__version__ = "0.1.0"

__all__ = [
    "AccessLog",
    "BaseNovelSplit",
    "Concept",
    "ConceptBank",
    "ConceptGuideError",
    "ConceptLogits",
    "ContributionReport",
    "EncoderBundle",
    "FewShotEpisode",
    "ImageSample",
    "LabelSpace",
    "MetricResult",
    "PromptContext",
    "ProtocolSpec",
    "Stage2Model",
    "TrainConfig",
    "assemble_prompt",
    "average_precision",
    "build_bank",
    "canonicalize",
    "collect_generations",
    "concept_bce",
    "concept_scores",
    "concept_weights",
    "contributions",
    "derive_concept_targets",
    "encode_concepts",
    "encode_image",
    "export_sankey",
    "fit",
    "freeze_bank",
    "generate_synthetic",
    "infer_concepts",
    "intersect_generations",
    "label_space_for",
    "load_bank",
    "load_bundle",
    "load_manifest",
    "mean_average_precision",
    "mock_bundle",
    "new_context",
    "predict",
    "render_template",
    "run_ablation",
    "run_base_to_novel",
    "run_few_shot",
    "sample_episode",
    "save_bank",
    "split_base_novel",
    "train",
    "train_joint",
    "validate_concept",
    "weighted_f1",
    "write_manifest",
]

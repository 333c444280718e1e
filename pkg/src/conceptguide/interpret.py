"""Per-disease concept attribution from linear Stage-2 models, and a
Sankey-ready flow export. Contribution of concept j to disease d is the
weight times the concept activation, averaged over the disease's test
samples, so widths reflect what the model actually used at test time."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import canonical_json
from .errors import ConfigurationError, ContractViolation, UnsupportedOperationError
from .stage1 import ConceptLogits
from .stage2 import LINEAR_KINDS, Stage2Model, concept_weights

NORMALIZATIONS = ("sum", "minmax", "none")


@dataclass
class ContributionEntry:
    concept_id: str
    contribution: float  # raw mean(weight * activation)
    normalized: float | None  # None for negative entries under sum
    rank: int


@dataclass
class ContributionReport:
    disease: str
    entries: list[ContributionEntry]
    normalization: str
    sample_count: int
    degenerate: bool = False  # all-zero contributions; normalization skipped

    def top(self, k: int) -> list[ContributionEntry]:
        return self.entries[:k]

    def bottom(self, k: int) -> list[ContributionEntry]:
        return self.entries[len(self.entries) - k :] if k else []


def contributions(
    model: Stage2Model,
    logits_set: list[ConceptLogits],
    disease: str,
    concept_ids: tuple[str, ...],
    truth: dict | None = None,
    normalization: str = "sum",
) -> ContributionReport:
    """contribution_j = mean over the disease's samples of
    weight[disease, j] * activation_j, in the model's input space. With
    sum normalization, positive entries are scaled to sum to 1; negative
    entries keep their raw value."""
    if model.kind not in LINEAR_KINDS:
        raise UnsupportedOperationError(
            f"contributions need a linear model, not {model.kind}"
        )
    if normalization not in NORMALIZATIONS:
        raise ConfigurationError(f"normalization must be one of {NORMALIZATIONS}")
    if disease not in model.diseases:
        raise ConfigurationError(f"disease {disease!r} is not in the fitted model")
    if len(concept_ids) != model.e:
        raise ContractViolation(
            f"{len(concept_ids)} concept ids for a model with E={model.e}"
        )
    rows = logits_set
    if truth is not None:
        rows = [r for r in logits_set if disease in truth.get(r.image_id, frozenset())]
    if not rows:
        raise ContractViolation(f"no samples of disease {disease!r} to attribute over")

    weights = concept_weights(model)[model.diseases.index(disease)]
    activations = np.stack(
        [r.probabilities if model.input_space == "probabilities" else r.scores for r in rows]
    )
    raw = (activations * weights).mean(axis=0)

    degenerate = bool(np.all(raw == 0.0))
    positive_sum = float(raw[raw > 0].sum())
    lo, hi = float(raw.min()), float(raw.max())

    def _normalize(value: float) -> float | None:
        if degenerate or normalization == "none":
            return None
        if normalization == "sum":
            return value / positive_sum if value > 0 and positive_sum > 0 else None
        return (value - lo) / (hi - lo) if hi > lo else None

    order = sorted(range(len(concept_ids)), key=lambda j: (-raw[j], concept_ids[j]))
    entries = [
        ContributionEntry(
            concept_id=concept_ids[j],
            contribution=float(raw[j]),
            normalized=_normalize(float(raw[j])),
            rank=rank,
        )
        for rank, j in enumerate(order, start=1)
    ]
    return ContributionReport(
        disease=disease,
        entries=entries,
        normalization=normalization,
        sample_count=len(rows),
        degenerate=degenerate,
    )


def export_sankey(reports: list[ContributionReport], top_k: int, bottom_k: int) -> dict:
    """Flow graph with concept and disease nodes; one link per reported
    concept. Shared concepts collapse onto a single node. Ordering is
    fully deterministic so the export is byte-stable."""
    if not reports:
        raise ContractViolation("need at least one contribution report")
    links = []
    concept_nodes: set[str] = set()
    disease_nodes: set[str] = set()
    for report in sorted(reports, key=lambda r: r.disease):
        disease_nodes.add(report.disease)
        picked = report.top(top_k) + report.bottom(bottom_k)
        seen: set[str] = set()
        for entry in picked:
            if entry.concept_id in seen:  # top and bottom overlap on tiny banks
                continue
            seen.add(entry.concept_id)
            concept_nodes.add(entry.concept_id)
            width = entry.normalized if entry.normalized is not None else abs(entry.contribution)
            links.append(
                {
                    "source": entry.concept_id,
                    "target": report.disease,
                    "value": float(width),
                    "polarity": "positive" if entry.contribution >= 0 else "negative",
                    "rank": entry.rank,
                }
            )
    links.sort(key=lambda l: (l["target"], l["rank"]))
    return {
        "nodes": [
            {"name": n, "kind": "concept"} for n in sorted(concept_nodes)
        ]
        + [{"name": n, "kind": "disease"} for n in sorted(disease_nodes)],
        "links": links,
    }


def report_to_dict(report: ContributionReport) -> dict:
    return {
        "disease": report.disease,
        "normalization": report.normalization,
        "sample_count": report.sample_count,
        "degenerate": report.degenerate,
        "entries": [
            {
                "concept_id": e.concept_id,
                "contribution": e.contribution,
                "normalized": e.normalized,
                "rank": e.rank,
            }
            for e in report.entries
        ],
    }


def write_sankey(flow: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(flow))

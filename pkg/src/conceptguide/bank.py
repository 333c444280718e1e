"""Concept bank: canonical concept records, disease-to-concept mapping,
review states, and the versioned on-disk format.

A bank is "frozen for training" when every disease entry references only
validated concepts and none is empty; that state is derived, not stored,
because the file schema is fixed.
"""

from __future__ import annotations

import datetime
import json
import string
from dataclasses import dataclass, field

from .errors import BankError, ConfigurationError, ConflictError, MigrationError, SchemaError

SCHEMA_VERSION = 1

STATUS_GENERATED = "generated"
STATUS_VALIDATED = "validated"
STATUS_REJECTED = "rejected"
STATUSES = (STATUS_GENERATED, STATUS_VALIDATED, STATUS_REJECTED)

DECISIONS = (STATUS_VALIDATED, STATUS_REJECTED)

# Punctuation maps to a space, not to nothing, so "asteroid-bodies" merges
# with "asteroid bodies" instead of becoming a new token.
_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


def canonicalize(text: str) -> str:
    """Canonical concept key: lowercase, punctuation to spaces, trimmed,
    internal whitespace collapsed. Idempotent."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def utc_now_iso() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


@dataclass
class AuditEntry:
    decision: str
    reviewer: str
    timestamp: str
    forced: bool = False

    def to_dict(self) -> dict:
        return {
            "decision": self.decision,
            "reviewer": self.reviewer,
            "timestamp": self.timestamp,
            "forced": self.forced,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "AuditEntry":
        return cls(
            decision=str(raw["decision"]),
            reviewer=str(raw["reviewer"]),
            timestamp=str(raw["timestamp"]),
            forced=bool(raw.get("forced", False)),
        )


@dataclass
class Concept:
    """One bank concept.

    provenance holds (template_id, generation_index) pairs for every
    generation that produced the concept; the audit list records every
    review decision ever taken, including overridden ones.
    """

    id: str
    display_name: str
    synonyms: list[str] = field(default_factory=list)
    status: str = STATUS_GENERATED
    provenance: list[tuple[str, int]] = field(default_factory=list)
    audit: list[AuditEntry] = field(default_factory=list)

    def distinct_generations(self) -> int:
        return len(set(self.provenance))

    def has_override(self) -> bool:
        return any(entry.forced for entry in self.audit)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "display_name": self.display_name,
            "synonyms": list(self.synonyms),
            "status": self.status,
            "provenance": [[t, i] for t, i in self.provenance],
            "audit": [entry.to_dict() for entry in self.audit],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Concept":
        return cls(
            id=str(raw["id"]),
            display_name=str(raw["display_name"]),
            synonyms=[str(s) for s in raw.get("synonyms", [])],
            status=str(raw["status"]),
            provenance=[(str(t), int(i)) for t, i in raw.get("provenance", [])],
            audit=[AuditEntry.from_dict(e) for e in raw.get("audit", [])],
        )


@dataclass
class DiseaseEntry:
    name: str
    concept_ids: set[str] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {"name": self.name, "concept_ids": sorted(self.concept_ids)}


@dataclass
class ConceptBank:
    concepts: dict[str, Concept] = field(default_factory=dict)
    diseases: dict[str, DiseaseEntry] = field(default_factory=dict)
    version: int = 1

    @property
    def E(self) -> int:
        """Number of validated concepts."""
        return sum(1 for c in self.concepts.values() if c.status == STATUS_VALIDATED)

    @property
    def K(self) -> int:
        return len(self.diseases)

    def validated_ids(self) -> list[str]:
        return sorted(c.id for c in self.concepts.values() if c.status == STATUS_VALIDATED)

    @property
    def is_frozen_for_training(self) -> bool:
        """True when every disease references only validated concepts and
        every disease entry is non-empty."""
        if not self.diseases:
            return False
        for entry in self.diseases.values():
            if not entry.concept_ids:
                return False
            for cid in entry.concept_ids:
                concept = self.concepts.get(cid)
                if concept is None or concept.status != STATUS_VALIDATED:
                    return False
        return True

    def add_concept(self, concept: Concept) -> None:
        """Insert or merge: an id produced by several diseases accumulates
        provenance and synonyms instead of being duplicated."""
        existing = self.concepts.get(concept.id)
        if existing is None:
            self.concepts[concept.id] = concept
            return
        merged = set(existing.provenance) | set(concept.provenance)
        existing.provenance = sorted(merged)
        existing.synonyms = sorted(set(existing.synonyms) | set(concept.synonyms))


def validate_concept(
    bank: ConceptBank,
    concept_id: str,
    decision: str,
    reviewer: str,
    force: bool = False,
    timestamp: str | None = None,
) -> ConceptBank:
    """Apply a review decision in place and bump the bank version.

    Re-deciding an already-decided concept requires force; the guard keeps
    review history honest. A concept whose provenance spans fewer than two
    distinct generations can only be validated with force (the manual
    override of the retention rule).
    """
    if decision not in DECISIONS:
        raise ConfigurationError(f"unknown decision {decision!r}; expected one of {DECISIONS}")
    concept = bank.concepts.get(concept_id)
    if concept is None:
        raise BankError(f"unknown concept id: {concept_id!r}")
    if concept.status != STATUS_GENERATED and not force:
        raise ConflictError(
            f"concept {concept_id!r} is already {concept.status}; pass force to re-decide"
        )
    if decision == STATUS_VALIDATED and concept.distinct_generations() < 2 and not force:
        raise BankError(
            f"concept {concept_id!r} has provenance from {concept.distinct_generations()} "
            "generation(s); validation needs at least two or a forced override"
        )
    concept.audit.append(
        AuditEntry(
            decision=decision,
            reviewer=reviewer,
            timestamp=timestamp if timestamp is not None else utc_now_iso(),
            forced=force,
        )
    )
    concept.status = decision
    bank.version += 1
    return bank


def freeze_bank(bank: ConceptBank) -> ConceptBank:
    """Return a bank whose disease entries reference validated concepts only.

    Raises when a disease would end up empty: such a disease is untrainable
    and silently dropping it would corrupt the label space.
    """
    new_diseases: dict[str, DiseaseEntry] = {}
    for name in sorted(bank.diseases):
        entry = bank.diseases[name]
        kept = {
            cid
            for cid in entry.concept_ids
            if cid in bank.concepts and bank.concepts[cid].status == STATUS_VALIDATED
        }
        if not kept:
            raise BankError(f"disease {name!r} has no validated concepts; cannot freeze")
        new_diseases[name] = DiseaseEntry(name=name, concept_ids=kept)
    return ConceptBank(concepts=dict(bank.concepts), diseases=new_diseases, version=bank.version + 1)


def bank_to_dict(bank: ConceptBank) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "bank_version": bank.version,
        "concepts": [bank.concepts[cid].to_dict() for cid in sorted(bank.concepts)],
        "diseases": [bank.diseases[name].to_dict() for name in sorted(bank.diseases)],
    }


def bank_from_dict(raw: dict) -> ConceptBank:
    schema = raw.get("schema_version")
    if schema != SCHEMA_VERSION:
        raise MigrationError(
            f"bank file has schema_version {schema!r}, this build reads {SCHEMA_VERSION}; "
            "migrate the file before loading"
        )
    concepts: dict[str, Concept] = {}
    for entry in raw.get("concepts", []):
        concept = Concept.from_dict(entry)
        if concept.id in concepts:
            raise SchemaError(f"duplicate concept id in bank file: {concept.id!r}")
        if concept.status not in STATUSES:
            raise SchemaError(f"concept {concept.id!r} has unknown status {concept.status!r}")
        if concept.id != canonicalize(concept.display_name):
            raise SchemaError(
                f"concept id {concept.id!r} does not match canonicalize() of its display name"
            )
        concepts[concept.id] = concept
    diseases: dict[str, DiseaseEntry] = {}
    for entry in raw.get("diseases", []):
        name = str(entry["name"])
        if name in diseases:
            raise SchemaError(f"duplicate disease name in bank file: {name!r}")
        ids = {str(c) for c in entry.get("concept_ids", [])}
        missing = sorted(cid for cid in ids if cid not in concepts)
        if missing:
            raise SchemaError(f"disease {name!r} references unknown concept ids: {missing}")
        diseases[name] = DiseaseEntry(name=name, concept_ids=ids)
    return ConceptBank(concepts=concepts, diseases=diseases, version=int(raw.get("bank_version", 1)))


def save_bank(bank: ConceptBank, path) -> None:
    text = json.dumps(bank_to_dict(bank), indent=2, sort_keys=True, ensure_ascii=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_bank(path) -> ConceptBank:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return bank_from_dict(raw)

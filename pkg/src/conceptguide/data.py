"""Dataset machinery: manifest ingestion, concept targets, few-shot
episodes, base-to-novel splitting, and a synthetic generator whose image
ids carry their own concept signature for the mock encoder."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .bank import AuditEntry, Concept, ConceptBank, DiseaseEntry, STATUS_VALIDATED
from .errors import BankError, DataError, ManifestError
from .rng import SplitMix64, fnv1a64, sample_without_replacement, stream_for

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("image_id", "image_ref", "disease_labels", "split")

# Synthetic/fixture audit entries use a fixed stamp so generated banks are
# byte-identical across runs.
EPOCH_TIMESTAMP = "1970-01-01T00:00:00+00:00"


@dataclass(frozen=True)
class ImageSample:
    image_id: str
    image_ref: str
    disease_labels: frozenset[str]
    split: str


@dataclass(frozen=True)
class LabelSpace:
    """Frozen ordering of diseases and concepts; every stage indexes
    through this, so its digest is stamped into checkpoints and models."""

    diseases: tuple[str, ...]
    concept_ids: tuple[str, ...]

    @property
    def K(self) -> int:
        return len(self.diseases)

    @property
    def E(self) -> int:
        return len(self.concept_ids)

    @property
    def digest(self) -> str:
        payload = "\x1f".join(self.diseases) + "\x1e" + "\x1f".join(self.concept_ids)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def concept_index(self) -> dict[str, int]:
        return {cid: j for j, cid in enumerate(self.concept_ids)}

    def disease_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.diseases)}


@dataclass
class ConceptTarget:
    image_id: str
    targets: np.ndarray  # uint8 vector, length E


@dataclass
class FewShotEpisode:
    n_shots: int
    seed: int
    selected_ids: dict[str, list[str]]
    shortfall: dict[str, bool]
    manifest_digest: str

    def effective_counts(self) -> dict[str, int]:
        return {name: len(ids) for name, ids in self.selected_ids.items()}

    def unique_ids(self) -> list[str]:
        """Episode membership: multi-label images count toward every disease
        they carry, but each id appears once."""
        seen = set()
        out = []
        for name in sorted(self.selected_ids):
            for image_id in self.selected_ids[name]:
                if image_id not in seen:
                    seen.add(image_id)
                    out.append(image_id)
        return out


@dataclass(frozen=True)
class BaseNovelSplit:
    base: tuple[str, ...]
    novel: tuple[str, ...]


class AccessLog:
    """Records which image ids each pipeline phase actually touched.

    Zero-shot hygiene is proved from this log: the trainer records every id
    it encodes, and the protocol asserts the intersection with
    novel-labeled ids is empty."""

    def __init__(self):
        self._ids: dict[str, set[str]] = {}
        self._counts: dict[str, int] = {}

    def record(self, phase: str, image_id: str) -> None:
        self._ids.setdefault(phase, set()).add(image_id)
        self._counts[phase] = self._counts.get(phase, 0) + 1

    def ids(self, phase: str | None = None) -> set[str]:
        if phase is not None:
            return set(self._ids.get(phase, set()))
        out: set[str] = set()
        for bucket in self._ids.values():
            out |= bucket
        return out

    def count(self, phase: str) -> int:
        return self._counts.get(phase, 0)

    def phases(self) -> list[str]:
        return sorted(self._ids)


def manifest_digest_of(samples: list[ImageSample]) -> str:
    h = hashlib.sha256()
    for s in sorted(samples, key=lambda x: x.image_id):
        h.update(
            ("\x1f".join([s.image_id, s.image_ref, ";".join(sorted(s.disease_labels)), s.split]) + "\n").encode("utf-8")
        )
    return h.hexdigest()


def label_space_for(samples: list[ImageSample], bank: ConceptBank) -> LabelSpace:
    present = sorted({name for s in samples for name in s.disease_labels})
    concept_ids: set[str] = set()
    for name in present:
        entry = bank.diseases[name]
        for cid in entry.concept_ids:
            concept = bank.concepts.get(cid)
            if concept is not None and concept.status == STATUS_VALIDATED:
                concept_ids.add(cid)
    return LabelSpace(diseases=tuple(present), concept_ids=tuple(sorted(concept_ids)))


def load_manifest(path, bank: ConceptBank) -> tuple[list[ImageSample], LabelSpace]:
    """Read the delimited manifest and validate every row against the bank.

    Columns: image_id, image_ref, disease_labels (semicolon-joined), split.
    All row-level problems are gathered and reported together."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty file, expected a header row")
        missing_cols = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing_cols:
            raise ManifestError(f"{path}: header is missing columns {missing_cols}")
        samples: list[ImageSample] = []
        seen_ids: set[str] = set()
        problems: list[str] = []
        for row_num, row in enumerate(reader, start=2):
            image_id = (row["image_id"] or "").strip()
            image_ref = (row["image_ref"] or "").strip()
            labels = frozenset(
                part.strip() for part in (row["disease_labels"] or "").split(";") if part.strip()
            )
            split = (row["split"] or "").strip()
            if not image_id:
                problems.append(f"row {row_num}: empty image_id")
                continue
            if image_id in seen_ids:
                problems.append(f"row {row_num}: duplicate image_id {image_id!r}")
                continue
            if not labels:
                problems.append(f"row {row_num}: no disease labels")
                continue
            unknown = sorted(name for name in labels if name not in bank.diseases)
            if unknown:
                problems.append(f"row {row_num}: unknown disease name(s) {unknown}")
                continue
            if split not in SPLITS:
                problems.append(f"row {row_num}: split must be one of {SPLITS}, got {split!r}")
                continue
            seen_ids.add(image_id)
            samples.append(
                ImageSample(image_id=image_id, image_ref=image_ref, disease_labels=labels, split=split)
            )
    if problems:
        raise ManifestError(f"{path}: {len(problems)} invalid row(s):\n  " + "\n  ".join(problems))
    return samples, label_space_for(samples, bank)


def write_manifest(samples: list[ImageSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for s in samples:
            writer.writerow([s.image_id, s.image_ref, ";".join(sorted(s.disease_labels)), s.split])


def derive_concept_targets(
    samples: list[ImageSample], bank: ConceptBank, label_space: LabelSpace
) -> list[ConceptTarget]:
    """targets[j] = 1 iff concept j belongs to any of the sample's diseases."""
    if not bank.is_frozen_for_training:
        raise BankError(
            "bank is not frozen for training: every disease must reference only "
            "validated concepts; run freeze first"
        )
    index = label_space.concept_index()
    per_disease: dict[str, list[int]] = {}
    for name in label_space.diseases:
        entry = bank.diseases.get(name)
        if entry is None or not entry.concept_ids:
            raise DataError(f"disease {name!r} has an empty concept set; untrainable")
        per_disease[name] = [index[cid] for cid in entry.concept_ids if cid in index]
        if not per_disease[name]:
            raise DataError(f"disease {name!r} has no concepts inside the label space")
    out = []
    for s in samples:
        targets = np.zeros(label_space.E, dtype=np.uint8)
        for name in s.disease_labels:
            targets[per_disease[name]] = 1
        out.append(ConceptTarget(image_id=s.image_id, targets=targets))
    return out


def sample_episode(samples: list[ImageSample], n_shots: int, seed: int) -> FewShotEpisode:
    """Uniform without-replacement draw of n_shots train images per disease.

    Each disease consumes its own splitmix64 stream keyed by
    (seed, disease name), so draws are independent of disease iteration
    order and of pool sizes elsewhere. Under-populated diseases take all
    they have and are flagged."""
    if n_shots < 1:
        raise DataError("n_shots must be at least 1")
    pools: dict[str, list[str]] = {}
    for s in samples:
        if s.split != "train":
            continue
        for name in s.disease_labels:
            pools.setdefault(name, []).append(s.image_id)
    selected: dict[str, list[str]] = {}
    shortfall: dict[str, bool] = {}
    for name in sorted(pools):
        pool = sorted(pools[name])
        rng = stream_for(seed, name)
        selected[name] = sample_without_replacement(pool, n_shots, rng)
        shortfall[name] = len(pool) < n_shots
    return FewShotEpisode(
        n_shots=n_shots,
        seed=seed,
        selected_ids=selected,
        shortfall=shortfall,
        manifest_digest=manifest_digest_of(samples),
    )


def split_base_novel(
    samples: list[ImageSample], label_space: LabelSpace
) -> tuple[BaseNovelSplit, list[ImageSample]]:
    """Base = the ceil(K/2) most frequent diseases by train count, ties by
    name. Also returns the train pool filtered to samples whose labels all
    sit inside base (the only samples zero-shot training may read)."""
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise DataError("train split is empty; cannot rank diseases")
    counts = {name: 0 for name in label_space.diseases}
    for s in train:
        for name in s.disease_labels:
            if name in counts:
                counts[name] += 1
    ranked = sorted(label_space.diseases, key=lambda name: (-counts[name], name))
    n_base = math.ceil(label_space.K / 2)
    split = BaseNovelSplit(base=tuple(ranked[:n_base]), novel=tuple(ranked[n_base:]))
    base_set = set(split.base)
    filtered = [s for s in train if s.disease_labels <= base_set]
    return split, filtered


def generate_synthetic(
    k: int,
    e_per_disease: int,
    shared_fraction: float,
    images_per_disease: int,
    noise: float,
    seed: int,
) -> tuple[list[ImageSample], ConceptBank]:
    """Build a synthetic bank and manifest for desk-scale runs.

    Concept naming puts the disease slug last ("sign003 disease01") because
    the mock text encoder weights later tokens more, which correlates
    same-disease concept anchors and keeps the noiseless set separable.
    shared_fraction of each disease's concepts come from a pool shared by
    all diseases. Image ids embed the visual concept signature
    ("...-s01101...") that the mock image encoder reads back; noise flips
    each signature bit independently, targets stay label-derived.
    """
    if k < 1 or e_per_disease < 1 or images_per_disease < 1:
        raise DataError("k, e_per_disease and images_per_disease must be positive")
    if not 0.0 <= shared_fraction < 1.0:
        raise DataError("shared_fraction must be in [0, 1)")
    if not 0.0 <= noise <= 1.0:
        raise DataError("noise must be a probability")

    diseases = [f"disease{i:02d}" for i in range(k)]
    n_shared = int(shared_fraction * e_per_disease)
    n_own = e_per_disease - n_shared

    bank = ConceptBank()
    counter = 0

    def _new_concept(name: str) -> Concept:
        return Concept(
            id=name,
            display_name=name,
            status=STATUS_VALIDATED,
            provenance=[],
            audit=[
                AuditEntry(
                    decision=STATUS_VALIDATED,
                    reviewer="synthetic-generator",
                    timestamp=EPOCH_TIMESTAMP,
                    forced=True,
                )
            ],
        )

    shared_ids = []
    for _ in range(n_shared):
        name = f"sign{counter:03d} shared"
        counter += 1
        bank.add_concept(_new_concept(name))
        shared_ids.append(name)
    for disease in diseases:
        own = []
        for _ in range(n_own):
            name = f"sign{counter:03d} {disease}"
            counter += 1
            bank.add_concept(_new_concept(name))
            own.append(name)
        bank.diseases[disease] = DiseaseEntry(name=disease, concept_ids=set(own) | set(shared_ids))

    concept_order = sorted(bank.concepts)
    index = {cid: j for j, cid in enumerate(concept_order)}
    flips = SplitMix64((fnv1a64("synthetic-noise") ^ (seed * 0x9E3779B97F4A7C15)) & ((1 << 64) - 1))

    n = images_per_disease
    n_val = max(1, n // 10) if n >= 3 else 0
    n_test = max(1, n // 10) if n >= 3 else 0
    n_train = n - n_val - n_test

    samples: list[ImageSample] = []
    for disease in diseases:
        base_bits = np.zeros(len(concept_order), dtype=np.uint8)
        for cid in bank.diseases[disease].concept_ids:
            base_bits[index[cid]] = 1
        for i in range(n):
            bits = base_bits.copy()
            if noise > 0.0:
                for j in range(len(bits)):
                    if flips.unit() < noise:
                        bits[j] ^= 1
            sig = "".join("1" if b else "0" for b in bits)
            image_id = f"{disease}-{i:03d}-s{sig}"
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            samples.append(
                ImageSample(
                    image_id=image_id,
                    image_ref=f"synthetic://{image_id}",
                    disease_labels=frozenset([disease]),
                    split=split,
                )
            )
    return samples, bank

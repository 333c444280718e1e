"""Frozen encoder interface, prompt assembly, and the deterministic mock
encoder pair used for offline runs.

The mock text encoder is a differentiable map (position-weighted token
mixing through a fixed random projection, then L2 normalization) so
analytic gradients with respect to the learnable context exist. The mock
image encoder reads the concept signature embedded in a synthetic image
id and emits a unit vector pulled toward its present concepts' text
anchors and away from the absent ones."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import LabelSpace
from .errors import ConfigurationError, ContractViolation, EncoderError
from .rng import fnv1a64

POSITION_START = "START"
POSITION_MIDDLE = "MIDDLE"
POSITION_END = "END"
POSITIONS = (POSITION_START, POSITION_MIDDLE, POSITION_END)

MOCK_LOGIT_SCALE = 10.0
MOCK_MAX_SEQ_LEN = 77
# How far mock image features are nudged off the anchor geometry; keeps
# samples of one disease distinct without moving them across boundaries.
MOCK_PERTURBATION = 0.08


@dataclass
class FeatureVector:
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.normalized:
            norm = float(np.linalg.norm(self.values))
            if abs(norm - 1.0) > 1e-6:
                raise ContractViolation(f"feature marked normalized has L2 norm {norm!r}")


@dataclass(frozen=True)
class TokenEmbedding:
    values: np.ndarray


@dataclass
class PromptContext:
    """M learnable context vectors shared across every concept prompt."""

    vectors: torch.Tensor  # M x D_tok, float64, requires_grad
    position_policy: str = POSITION_END

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ContractViolation("context must be an M x D_tok matrix with M >= 1")
        if self.position_policy not in POSITIONS:
            raise ConfigurationError(
                f"position_policy must be one of {POSITIONS}, got {self.position_policy!r}"
            )

    @property
    def M(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def d_tok(self) -> int:
        return int(self.vectors.shape[1])


def new_context(m: int, d_tok: int, position_policy: str = POSITION_END, seed: int = 0, sigma: float = 0.02) -> PromptContext:
    if m < 1:
        raise ConfigurationError("context needs at least one token")
    init = np.random.default_rng(seed).normal(0.0, sigma, size=(m, d_tok))
    vectors = torch.tensor(init, dtype=torch.float64, requires_grad=True)
    return PromptContext(vectors=vectors, position_policy=position_policy)


def assemble_prompt(
    context: PromptContext, concept_tokens: list[TokenEmbedding], max_len: int | None = None
) -> torch.Tensor:
    """Insert the concept block into the context sequence.

    END -> [w_1..w_M, concept...]; START -> [concept..., w_1..w_M];
    MIDDLE -> concept block after the first ceil(M/2) context vectors.
    Learnable tokens are never dropped: an over-long sequence is an error,
    not a truncation."""
    if not concept_tokens:
        raise ContractViolation("concept token list must be non-empty")
    m = context.M
    total = m + len(concept_tokens)
    if max_len is not None and total > max_len:
        raise EncoderError(
            f"prompt of length {total} (M={m} + {len(concept_tokens)} concept tokens) "
            f"exceeds the encoder maximum of {max_len}; shrink M or the concept text"
        )
    block = torch.stack(
        [torch.as_tensor(tok.values, dtype=torch.float64) for tok in concept_tokens]
    )
    if block.shape[1] != context.d_tok:
        raise ContractViolation(
            f"concept embeddings have dimension {block.shape[1]}, context has {context.d_tok}"
        )
    if context.position_policy == POSITION_START:
        cut = 0
    elif context.position_policy == POSITION_MIDDLE:
        cut = math.ceil(m / 2)
    else:
        cut = m
    return torch.cat([context.vectors[:cut], block, context.vectors[cut:]], dim=0)


class MockTokenizer:
    """Whitespace tokenizer with a fixed random unit embedding per word."""

    def __init__(self, seed: int, d_tok: int):
        self.seed = seed
        self.d_tok = d_tok
        self._cache: dict[str, np.ndarray] = {}

    def _embedding(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            rng = np.random.default_rng((fnv1a64(word) ^ self.seed) & ((1 << 64) - 1))
            raw = rng.standard_normal(self.d_tok)
            vec = raw / np.linalg.norm(raw)
            self._cache[word] = vec
        return vec

    def tokenize(self, text: str) -> list[TokenEmbedding]:
        words = text.split()
        if not words:
            raise EncoderError(f"cannot tokenize concept text {text!r}: no words")
        return [TokenEmbedding(values=self._embedding(w)) for w in words]


class MockTextEncoder:
    """g(sequence) = normalize(W @ position-weighted mean of the rows).

    Position weight of row t is (t+1)/sum, so later tokens dominate; the
    projection W is fixed at construction and never trained."""

    def __init__(self, seed: int, d: int, d_tok: int):
        self.seed = seed
        self.d = d
        self.d_tok = d_tok
        self.max_seq_len = MOCK_MAX_SEQ_LEN
        w = np.random.default_rng(seed).standard_normal((d, d_tok)) / math.sqrt(d_tok)
        self.projection = torch.tensor(w, dtype=torch.float64, requires_grad=False)

    def encode(self, sequence: torch.Tensor) -> torch.Tensor:
        length = sequence.shape[0]
        if length > self.max_seq_len:
            raise EncoderError(
                f"sequence length {length} exceeds the encoder maximum of {self.max_seq_len}"
            )
        positions = torch.arange(1, length + 1, dtype=torch.float64)
        weights = positions / positions.sum()
        mixed = weights @ sequence
        projected = self.projection @ mixed
        return projected / torch.linalg.vector_norm(projected)


_SIGNATURE_RE = re.compile(r"-s([01]+)$")


class MockImageEncoder:
    """Maps a synthetic image ref to a unit feature built from the text
    anchors of the concepts its id-signature marks present.

    Must be bound to a label space first: anchors are the text features of
    each concept's own tokens, so the signature bit order (sorted concept
    ids) and the anchor rows line up."""

    def __init__(self, seed: int, d: int, tokenizer: MockTokenizer, text_encoder: MockTextEncoder):
        self.seed = seed
        self.d = d
        self._tokenizer = tokenizer
        self._text_encoder = text_encoder
        self._anchors: np.ndarray | None = None
        self._n_concepts = 0

    def bind_label_space(self, label_space: LabelSpace) -> None:
        rows = []
        for cid in label_space.concept_ids:
            tokens = self._tokenizer.tokenize(cid)
            block = torch.stack(
                [torch.as_tensor(t.values, dtype=torch.float64) for t in tokens]
            )
            with torch.no_grad():
                rows.append(self._text_encoder.encode(block).numpy())
        self._anchors = np.stack(rows) if rows else np.zeros((0, self.d))
        self._n_concepts = len(label_space.concept_ids)

    def anchors(self) -> np.ndarray:
        if self._anchors is None:
            raise EncoderError("image encoder is not bound to a label space yet")
        return self._anchors

    def encode(self, image_ref: str) -> np.ndarray:
        anchors = self.anchors()
        name = image_ref.rsplit("://", 1)[-1]
        match = _SIGNATURE_RE.search(name)
        if match is None:
            raise EncoderError(
                f"cannot decode {image_ref!r}: no trailing concept signature (-s<bits>)"
            )
        bits = match.group(1)
        if len(bits) != self._n_concepts:
            raise EncoderError(
                f"signature of {image_ref!r} has {len(bits)} bits, label space has "
                f"{self._n_concepts} concepts"
            )
        present = np.array([b == "1" for b in bits])

        def _mean_direction(mask: np.ndarray) -> np.ndarray:
            if not mask.any():
                return np.zeros(self.d)
            total = anchors[mask].sum(axis=0)
            return total / np.linalg.norm(total)

        rng = np.random.default_rng((fnv1a64(name) ^ self.seed) & ((1 << 64) - 1))
        noise = rng.standard_normal(self.d)
        noise /= np.linalg.norm(noise)
        raw = _mean_direction(present) - _mean_direction(~present) + MOCK_PERTURBATION * noise
        return raw / np.linalg.norm(raw)


@dataclass
class EncoderBundle:
    name: str
    image_encoder: MockImageEncoder
    text_encoder: MockTextEncoder
    tokenizer: MockTokenizer
    logit_scale: float
    d: int
    d_tok: int
    max_seq_len: int

    def frozen_fingerprint(self) -> str:
        """Byte-level digest of every encoder parameter; training must not
        change it."""
        h = hashlib.sha256()
        h.update(
            json.dumps(
                {
                    "name": self.name,
                    "d": self.d,
                    "d_tok": self.d_tok,
                    "max_seq_len": self.max_seq_len,
                    "logit_scale": self.logit_scale,
                    "text_seed": self.text_encoder.seed,
                    "tokenizer_seed": self.tokenizer.seed,
                    "image_seed": self.image_encoder.seed,
                },
                sort_keys=True,
            ).encode("utf-8")
        )
        with torch.no_grad():
            h.update(self.text_encoder.projection.numpy().tobytes())
        return h.hexdigest()


def mock_bundle(seed: int = 0, d: int = 64) -> EncoderBundle:
    if d < 8:
        raise ConfigurationError(f"mock encoder dimension must be at least 8, got {d}")
    tokenizer = MockTokenizer(seed=seed, d_tok=d)
    text_encoder = MockTextEncoder(seed=seed, d=d, d_tok=d)
    image_encoder = MockImageEncoder(seed=seed, d=d, tokenizer=tokenizer, text_encoder=text_encoder)
    return EncoderBundle(
        name=f"mock:{d}:{seed}",
        image_encoder=image_encoder,
        text_encoder=text_encoder,
        tokenizer=tokenizer,
        logit_scale=MOCK_LOGIT_SCALE,
        d=d,
        d_tok=d,
        max_seq_len=MOCK_MAX_SEQ_LEN,
    )


def load_bundle(name: str) -> EncoderBundle:
    """Encoder registry. "mock", "mock:<D>" and "mock:<D>:<seed>" are the
    built-in offline pair; pretrained adapters are an extension point and
    report a clear error rather than a silent fallback."""
    parts = name.split(":")
    if parts[0] == "mock":
        d = int(parts[1]) if len(parts) > 1 and parts[1] else 64
        seed = int(parts[2]) if len(parts) > 2 and parts[2] else 0
        return mock_bundle(seed=seed, d=d)
    raise ConfigurationError(
        f"unknown encoder {name!r}: only the mock family (mock, mock:<D>, mock:<D>:<seed>) "
        "ships with this build; pretrained adapters plug in via conceptguide.encoders"
    )


def encode_concepts(
    bundle: EncoderBundle, context: PromptContext, label_space: LabelSpace
) -> torch.Tensor:
    """E x D matrix of normalized prompt features, rows in label-space
    concept order; differentiable w.r.t. context.vectors only."""
    rows = []
    for cid in label_space.concept_ids:
        try:
            tokens = bundle.tokenizer.tokenize(cid)
        except EncoderError as exc:
            raise EncoderError(f"concept {cid!r}: {exc}") from exc
        sequence = assemble_prompt(context, tokens, max_len=bundle.max_seq_len)
        rows.append(bundle.text_encoder.encode(sequence))
    if not rows:
        raise ContractViolation("label space has no concepts to encode")
    return torch.stack(rows)


def encode_image(bundle: EncoderBundle, image_ref: str) -> FeatureVector:
    values = bundle.image_encoder.encode(image_ref)
    return FeatureVector(values=values, normalized=True)


def save_context(
    context: PromptContext, path, bank_version: int, label_space_digest: str
) -> None:
    """Checkpoint layout: one JSON header line, then the row-major float32
    context matrix."""
    header = {
        "M": context.M,
        "d_tok": context.d_tok,
        "position_policy": context.position_policy,
        "bank_version": bank_version,
        "label_space_digest": label_space_digest,
    }
    with torch.no_grad():
        matrix = context.vectors.numpy().astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(matrix.tobytes(order="C"))


def load_context(path) -> tuple[PromptContext, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{path}: not a context checkpoint ({exc})") from exc
    m, d_tok = int(header["M"]), int(header["d_tok"])
    expected = m * d_tok * 4
    if len(payload) != expected:
        raise ConfigurationError(
            f"{path}: checkpoint body has {len(payload)} bytes, header implies {expected}"
        )
    matrix = np.frombuffer(payload, dtype=np.float32).reshape(m, d_tok).astype(np.float64)
    vectors = torch.tensor(matrix, dtype=torch.float64, requires_grad=True)
    return PromptContext(vectors=vectors, position_policy=header["position_policy"]), header

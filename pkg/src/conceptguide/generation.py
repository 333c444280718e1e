"""Concept generation: prompt templates, generator adapters, and the
retention rule that turns raw generations into bank concepts.

Two fixed templates are shipped. Template 1 asks for the explicit visual
concepts of a condition; template 2 asks for concepts that distinguish the
condition from a normal retinal fundus image. Each template is queried
repeats_per_template times and only concepts supported by at least
min_support generations (default: all of them) survive.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field

from .bank import Concept, ConceptBank, DiseaseEntry, canonicalize
from .errors import ConfigurationError, GeneratorTransportError

TEMPLATE_EXPLICIT = "explicit_concepts"
TEMPLATE_VS_NORMAL = "vs_normal_comparison"
TEMPLATE_IDS = (TEMPLATE_EXPLICIT, TEMPLATE_VS_NORMAL)

TEMPLATES = {
    TEMPLATE_EXPLICIT: (
        "This is an image of {disease}. Visualize a typical color fundus "
        "photograph of this condition and list the explicit visual concepts "
        "that characterize it. Answer only with short comma-separated phrases."
    ),
    TEMPLATE_VS_NORMAL: (
        "What are the useful visual concepts for distinguishing {disease} "
        "from a normal retinal fundus image? Answer only with short "
        "comma-separated phrases."
    ),
}


@dataclass(frozen=True)
class GenerationRequest:
    disease_name: str
    template_id: str
    rendered_prompt: str


@dataclass
class RawGeneration:
    """One verbatim generator response, kept for expert audit."""

    disease_name: str
    template_id: str
    generation_index: int
    phrases: list[str]
    raw_text: str
    warning: bool = False

    def to_dict(self) -> dict:
        return {
            "disease_name": self.disease_name,
            "template_id": self.template_id,
            "generation_index": self.generation_index,
            "phrases": list(self.phrases),
            "raw_text": self.raw_text,
            "warning": self.warning,
        }


def render_template(disease_name: str, template_id: str) -> GenerationRequest:
    if not disease_name or not disease_name.strip():
        raise ConfigurationError("disease_name must be non-empty")
    template = TEMPLATES.get(template_id)
    if template is None:
        raise ConfigurationError(
            f"unknown template_id {template_id!r}; expected one of {TEMPLATE_IDS}"
        )
    return GenerationRequest(
        disease_name=disease_name,
        template_id=template_id,
        rendered_prompt=template.format(disease=disease_name),
    )


_BULLET = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


def parse_phrases(text: str) -> list[str]:
    """Phrase list from a generator response: one phrase per line, or a
    single comma-separated line. Bullets and numbering are stripped; the
    phrases themselves are kept verbatim."""
    lines = [_BULLET.sub("", line).strip() for line in text.splitlines()]
    lines = [line for line in lines if line]
    if len(lines) == 1 and "," in lines[0]:
        lines = [part.strip() for part in lines[0].split(",") if part.strip()]
    return lines


def collect_generations(
    disease_name: str,
    generator,
    repeats_per_template: int = 2,
    max_retries: int = 3,
    retry_sleep: float = 0.0,
) -> list[RawGeneration]:
    """Query both templates repeats_per_template times each.

    Transport errors are retried up to max_retries before propagating.
    Responses that parse to nothing are recorded as empty lists with a
    warning flag; that is an audit fact, not a crash.
    """
    if repeats_per_template < 2:
        raise ConfigurationError("repeats_per_template must be at least 2")
    out: list[RawGeneration] = []
    for template_id in TEMPLATE_IDS:
        request = render_template(disease_name, template_id)
        for index in range(repeats_per_template):
            attempt = 0
            while True:
                try:
                    raw_text = generator.generate(request.rendered_prompt)
                    break
                except GeneratorTransportError:
                    attempt += 1
                    if attempt >= max_retries:
                        raise
                    if retry_sleep:
                        time.sleep(retry_sleep)
            phrases = parse_phrases(raw_text)
            out.append(
                RawGeneration(
                    disease_name=disease_name,
                    template_id=template_id,
                    generation_index=index,
                    phrases=phrases,
                    raw_text=raw_text,
                    warning=not phrases,
                )
            )
    return out


def _canonical_synonym_map(synonym_map: dict[str, str] | None) -> dict[str, str]:
    if not synonym_map:
        return {}
    return {canonicalize(k): canonicalize(v) for k, v in synonym_map.items()}


def intersect_generations(
    raw_lists: list[RawGeneration],
    synonym_map: dict[str, str] | None = None,
    min_support: int | None = None,
) -> list[Concept]:
    """Retention rule: keep concepts whose canonical id (after synonym
    mapping) appears in at least min_support generations.

    min_support defaults to len(raw_lists), i.e. a concept must be common
    to every generation; it can be lowered to 2. The result is sorted by id
    and independent of the order of raw_lists.
    """
    if len(raw_lists) < 2:
        raise ConfigurationError("intersect_generations needs at least two generations")
    if min_support is None:
        min_support = len(raw_lists)
    if not 2 <= min_support <= len(raw_lists):
        raise ConfigurationError(
            f"min_support must be in [2, {len(raw_lists)}], got {min_support}"
        )
    mapping = _canonical_synonym_map(synonym_map)

    support: dict[str, set[tuple[str, int]]] = {}
    direct_forms: dict[str, set[str]] = {}
    mapped_forms: dict[str, set[str]] = {}
    for gen in raw_lists:
        tag = (gen.template_id, gen.generation_index)
        for phrase in gen.phrases:
            canon = canonicalize(phrase)
            if not canon:
                continue
            cid = mapping.get(canon, canon)
            support.setdefault(cid, set()).add(tag)
            if canon == cid:
                direct_forms.setdefault(cid, set()).add(phrase.strip())
            else:
                mapped_forms.setdefault(cid, set()).add(phrase.strip())

    concepts = []
    for cid in sorted(support):
        tags = support[cid]
        if len(tags) < min_support:
            continue
        direct = sorted(direct_forms.get(cid, ()))
        display = direct[0] if direct else cid
        all_forms = direct_forms.get(cid, set()) | mapped_forms.get(cid, set())
        synonyms = sorted(form for form in all_forms if form != display)
        concepts.append(
            Concept(
                id=cid,
                display_name=display,
                synonyms=synonyms,
                provenance=sorted(tags),
            )
        )
    return concepts


def build_bank(
    disease_names: list[str],
    generator,
    repeats_per_template: int = 2,
    synonym_map: dict[str, str] | None = None,
    min_support: int | None = None,
) -> tuple[ConceptBank, list[RawGeneration]]:
    """Run the full construction loop for every disease.

    Returns the bank (all concepts status=generated, awaiting review) plus
    every raw generation so callers can persist the verbatim evidence."""
    bank = ConceptBank()
    raw_log: list[RawGeneration] = []
    for name in disease_names:
        if name in bank.diseases:
            raise ConfigurationError(f"duplicate disease name: {name!r}")
        raws = collect_generations(name, generator, repeats_per_template)
        raw_log.extend(raws)
        concepts = intersect_generations(raws, synonym_map=synonym_map, min_support=min_support)
        for concept in concepts:
            bank.add_concept(concept)
        bank.diseases[name] = DiseaseEntry(name=name, concept_ids={c.id for c in concepts})
    return bank, raw_log


# --- generator adapters ----------------------------------------------------

# Canned generations keyed by (canonical disease, template_id); index picks
# the repeat. Shapes mirror the documented construction example: the first
# template's lists share three core phrasings, the second template phrases
# one of them differently ("calcific" vs "calcium"), so the default synonym
# map below is what makes the retention rule keep exactly three concepts.
DEFAULT_SYNONYM_MAP = {"calcific deposits": "calcium deposits"}

_FIXTURE_TABLE: dict[tuple[str, str], list[list[str]]] = {
    ("asteroid hyalosis", TEMPLATE_EXPLICIT): [
        ["asteroid bodies", "vitreous opacities", "calcific deposits", "small reflective particles"],
        ["asteroid bodies", "vitreous opacities", "calcific deposits", "stippled vitreous"],
    ],
    ("asteroid hyalosis", TEMPLATE_VS_NORMAL): [
        ["calcium deposits", "loss of retinal detail visualization", "shadowing",
         "vitreous opacities", "asteroid bodies"],
        ["calcium deposits", "shadowing", "asteroid bodies", "vitreous opacities"],
    ],
    ("diabetic retinopathy", TEMPLATE_EXPLICIT): [
        ["microaneurysms", "hard exudates", "hemorrhages", "cotton wool spots"],
        ["microaneurysms", "hard exudates", "hemorrhages", "venous beading"],
    ],
    ("diabetic retinopathy", TEMPLATE_VS_NORMAL): [
        ["microaneurysms", "hard exudates", "hemorrhages", "neovascularization"],
        ["microaneurysms", "hard exudates", "hemorrhages"],
    ],
    ("central retinal vein occlusion", TEMPLATE_EXPLICIT): [
        ["venous changes", "venous engorgement", "hemorrhages", "disc edema"],
        ["venous changes", "venous engorgement", "hemorrhages", "tortuous veins"],
    ],
    ("central retinal vein occlusion", TEMPLATE_VS_NORMAL): [
        ["venous engorgement", "hemorrhages", "venous changes", "retinal thickening"],
        ["hemorrhages", "venous changes", "venous engorgement"],
    ],
}

_TEMPLATE_PATTERNS = {
    template_id: re.compile(re.escape(text).replace(re.escape("{disease}"), "(?P<disease>.+?)"))
    for template_id, text in TEMPLATES.items()
}


def _reverse_template(prompt: str) -> tuple[str, str]:
    for template_id, pattern in _TEMPLATE_PATTERNS.items():
        match = pattern.fullmatch(prompt)
        if match:
            return match.group("disease"), template_id
    raise ConfigurationError("prompt does not match any shipped template")


class FixtureGenerator:
    """Deterministic offline generator.

    Knows canned responses for a few retinal diseases; any other disease
    gets a stable generic response derived from its name, with three
    phrases common to all generations plus one per-generation extra so the
    retention rule has something to discard.
    """

    def __init__(self):
        self._calls: dict[tuple[str, str], int] = {}

    def generate(self, prompt: str) -> str:
        disease, template_id = _reverse_template(prompt)
        key = (canonicalize(disease), template_id)
        index = self._calls.get(key, 0)
        self._calls[key] = index + 1
        canned = _FIXTURE_TABLE.get(key)
        if canned is not None:
            phrases = canned[index % len(canned)]
        else:
            slug = canonicalize(disease)
            phrases = [
                f"{slug} hallmark one",
                f"{slug} hallmark two",
                f"{slug} hallmark three",
                f"{slug} incidental {template_id.split('_')[0]} {index}",
            ]
        return "\n".join(phrases)


ENV_GENERATOR_URL = "CONCEPTGUIDE_GENERATOR_URL"
ENV_GENERATOR_KEY = "CONCEPTGUIDE_GENERATOR_KEY"
ENV_GENERATOR_MODEL = "CONCEPTGUIDE_GENERATOR_MODEL"


class LiveGenerator:
    """Thin chat-completion HTTP adapter.

    Endpoint and credentials come from environment variables only; they are
    never written to the bank file or anywhere else on disk.
    """

    def __init__(self, post=None, timeout: float = 60.0):
        url = os.environ.get(ENV_GENERATOR_URL)
        if not url:
            raise ConfigurationError(
                f"live generator needs {ENV_GENERATOR_URL} set in the environment"
            )
        self._url = url
        self._key = os.environ.get(ENV_GENERATOR_KEY)
        self._model = os.environ.get(ENV_GENERATOR_MODEL, "gpt-3.5-turbo")
        self._timeout = timeout
        if post is None:
            import requests

            post = requests.post
        self._post = post

    def generate(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self._key:
            headers["Authorization"] = f"Bearer {self._key}"
        payload = {
            "model": self._model,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            response = self._post(
                self._url, data=json.dumps(payload), headers=headers, timeout=self._timeout
            )
        except Exception as exc:  # transport layer: connection, timeout
            raise GeneratorTransportError(str(exc)) from exc
        status = getattr(response, "status_code", 200)
        if status >= 500:
            raise GeneratorTransportError(f"generator endpoint returned {status}")
        if status >= 400:
            raise ConfigurationError(f"generator endpoint rejected the request ({status})")
        body = response.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GeneratorTransportError(f"malformed generator response: {exc}") from exc


def make_generator(name: str):
    if name == "fixture":
        return FixtureGenerator()
    if name == "live":
        return LiveGenerator()
    raise ConfigurationError(f"unknown generator {name!r}; expected 'fixture' or 'live'")

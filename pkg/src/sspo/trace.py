"""Four-tier reasoning trace grammar.

A well-formed trace looks like::

    <think>
    <rhythm>...</rhythm>
    <conduction>...</conduction>
    <morphology>...</morphology>
    <impression>...</impression>
    </think>
    <answer>MI, NORM</answer>

Only whitespace may appear outside the four section bodies and the answer
body. Parsing never raises: malformed text yields ``tags_valid=False`` and
whatever sections could be recovered.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

LabelSet = frozenset  # frozenset[str] of canonical labels


class SectionKind(enum.Enum):
    RHYTHM = "rhythm"
    CONDUCTION = "conduction"
    MORPHOLOGY = "morphology"
    IMPRESSION = "impression"


SECTION_ORDER: tuple[SectionKind, ...] = tuple(SectionKind)

_STRUCTURAL = ("think", "answer") + tuple(k.value for k in SECTION_ORDER)
_TAG_RE = re.compile(r"<(/?)(" + "|".join(_STRUCTURAL) + r")>")
_LABEL_SPLIT_RE = re.compile(r"[,;\n]")

# the only tag sequence accepted by the grammar
_EXPECTED_TAGS: tuple[str, ...] = (
    ("think",)
    + tuple(t for k in SECTION_ORDER for t in (k.value, "/" + k.value))
    + ("/think", "answer", "/answer")
)
# tag pairs whose body is free text; everything else must be whitespace-only
_BODY_OPENERS = {k.value for k in SECTION_ORDER} | {"answer"}


def canonicalize_label(raw: str) -> str:
    """Trim, collapse internal whitespace runs and uppercase."""
    return " ".join(raw.split()).upper()


def make_label_set(labels: Iterable[str]) -> LabelSet:
    out = {canonicalize_label(x) for x in labels}
    out.discard("")
    return frozenset(out)


@dataclass(frozen=True)
class StructuredTrace:
    sections: Mapping[SectionKind, str]
    answer_text: str
    answer_set: LabelSet
    tags_valid: bool
    section_valid: Mapping[SectionKind, bool]
    oov_labels: tuple[str, ...] = field(default=())
    raw: str = field(default="", compare=False, repr=False)

    @classmethod
    def build(
        cls,
        sections: Mapping[SectionKind, str],
        answer_set: Iterable[str],
        tags_valid: bool = True,
        answer_text: str | None = None,
    ) -> "StructuredTrace":
        secs = {k: sections.get(k, "").strip() for k in SECTION_ORDER}
        labels = make_label_set(answer_set)
        if answer_text is None:
            answer_text = ", ".join(sorted(labels))
        return cls(
            sections=secs,
            answer_text=answer_text,
            answer_set=labels,
            tags_valid=tags_valid,
            section_valid={k: secs[k] != "" for k in SECTION_ORDER},
        )

    def same_content(self, other: "StructuredTrace") -> bool:
        """Equality over sections, indicators and answer set (ignores raw answer text)."""
        return (
            dict(self.sections) == dict(other.sections)
            and self.tags_valid == other.tags_valid
            and dict(self.section_valid) == dict(other.section_valid)
            and self.answer_set == other.answer_set
        )


def _tags_valid(text: str) -> bool:
    matches = list(_TAG_RE.finditer(text))
    tags = tuple(m.group(1) + m.group(2) for m in matches)
    if tags != _EXPECTED_TAGS:
        return False
    # gaps between consecutive tags: bodies are free, the rest must be blank
    prev_end = 0
    prev_tag = None
    for m in matches:
        gap = text[prev_end : m.start()]
        if prev_tag not in _BODY_OPENERS and gap.strip():
            return False
        prev_end = m.end()
        prev_tag = m.group(1) + m.group(2)
    return not text[prev_end:].strip()


def _region(text: str, name: str) -> str | None:
    m = re.search(rf"<{name}>(.*?)</{name}>", text, re.DOTALL)
    return None if m is None else m.group(1)


def parse_answer(answer_text: str, label_vocab: Iterable[str]) -> tuple[LabelSet, tuple[str, ...]]:
    vocab = make_label_set(label_vocab)
    found: set[str] = set()
    oov: list[str] = []
    for piece in _LABEL_SPLIT_RE.split(answer_text):
        lab = canonicalize_label(piece)
        if not lab:
            continue
        if lab in vocab:
            found.add(lab)
        elif lab not in oov:
            oov.append(lab)
    return frozenset(found), tuple(oov)


def parse_trace(raw_text: str, label_vocab: Iterable[str]) -> StructuredTrace:
    valid = _tags_valid(raw_text)
    think = _region(raw_text, "think")
    scope = think if think is not None else raw_text
    sections = {}
    for kind in SECTION_ORDER:
        body = _region(scope, kind.value)
        if body is None and think is not None:
            body = _region(raw_text, kind.value)
        sections[kind] = "" if body is None else body.strip()
    answer_text = _region(raw_text, "answer")
    answer_text = "" if answer_text is None else answer_text.strip()
    answer_set, oov = parse_answer(answer_text, label_vocab)
    return StructuredTrace(
        sections=sections,
        answer_text=answer_text,
        answer_set=answer_set,
        tags_valid=valid,
        section_valid={k: sections[k] != "" for k in SECTION_ORDER},
        oov_labels=oov,
        raw=raw_text,
    )


def serialize_sections(sections: Mapping[SectionKind, str], labels: Iterable[str]) -> str:
    lines = ["<think>"]
    for kind in SECTION_ORDER:
        body = sections.get(kind, "").strip()
        lines.append(f"<{kind.value}>{body}</{kind.value}>")
    lines.append("</think>")
    lines.append("<answer>" + ", ".join(sorted(make_label_set(labels))) + "</answer>")
    return "\n".join(lines)


def canonical_serialize(trace: StructuredTrace) -> str:
    return serialize_sections(trace.sections, trace.answer_set)

"""Rule-based cleaning of raw free-text analyses into canonical four-tier traces.

Steps: placeholder normalization, dropping records without an impression,
and deterministic field-to-section restructuring. Nothing is written into a
section that was not already in the input, except the fixed negative
sentences used for empty rhythm/conduction/morphology fields.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .synth import NEGATIVE_SENTENCES
from .trace import SECTION_ORDER, SectionKind, canonicalize_label, parse_trace, serialize_sections

PLACEHOLDERS = frozenset({"", "none", "n/a", "-"})

DEFAULT_FIELD_MAP: dict[str, SectionKind] = {
    "rhythm": SectionKind.RHYTHM,
    "conduction": SectionKind.CONDUCTION,
    "morphology": SectionKind.MORPHOLOGY,
    "impression": SectionKind.IMPRESSION,
}

_RESERVED_TAG_RE = re.compile(r"</?(think|answer|rhythm|conduction|morphology|impression)>")


class RestructureError(ValueError):
    def __init__(self, record_id: str, keys: list[str], reason: str = "unmappable field names"):
        self.record_id = record_id
        self.keys = keys
        super().__init__(f"record {record_id!r}: {reason}: {', '.join(keys)}")


@dataclass(frozen=True)
class RawRecord:
    id: str
    source_sections: Mapping[str, str | None]
    labels: tuple[str, ...] = ()

    @classmethod
    def from_json(cls, obj: dict) -> "RawRecord":
        if "source_sections" in obj:
            sections = dict(obj["source_sections"])
        elif "trace" in obj:
            # already-cleaned output feeds back in unchanged
            t = parse_trace(obj["trace"], obj.get("labels", []))
            sections = {k.value: t.sections[k] for k in SECTION_ORDER}
        else:
            sections = {}
        rid = str(obj.get("id", ""))
        if not rid:
            raise ValueError("raw record without id")
        return cls(rid, sections, tuple(obj.get("labels", [])))


@dataclass
class CleanReport:
    input_count: int = 0
    kept: int = 0
    dropped_missing_impression: int = 0
    placeholders_normalized: int = 0
    reformatted: int = 0

    def to_json(self) -> dict:
        return {
            "kept": self.kept,
            "dropped_missing_impression": self.dropped_missing_impression,
            "placeholders_normalized": self.placeholders_normalized,
            "reformatted": self.reformatted,
        }

    def describe(self) -> str:
        return (
            f"clean: {self.input_count} in, {self.kept} kept, "
            f"{self.dropped_missing_impression} dropped (no impression), "
            f"{self.placeholders_normalized} placeholders normalized, "
            f"{self.reformatted} reformatted"
        )


def is_placeholder(text: str | None) -> bool:
    return text is None or text.strip().lower() in PLACEHOLDERS


def _section_for(key: str, field_map: Mapping[str, SectionKind]) -> SectionKind | None:
    return field_map.get(key.strip().lower())


def normalize_placeholders(
    record: RawRecord,
    field_map: Mapping[str, SectionKind] = DEFAULT_FIELD_MAP,
) -> tuple[RawRecord, int]:
    """Swap placeholder text for the section's negative sentence.

    Impressions are never filled in; an empty impression is left empty so the
    record can be dropped. Absent rhythm/conduction/morphology fields are
    treated like placeholders. Returns the new record and the number of
    fields rewritten.
    """
    out: dict[str, str | None] = {}
    seen: set[SectionKind] = set()
    changed = 0
    for key, value in record.source_sections.items():
        kind = _section_for(key, field_map)
        if kind is not None:
            seen.add(kind)
        if kind in NEGATIVE_SENTENCES and is_placeholder(value):
            out[key] = NEGATIVE_SENTENCES[kind]
            changed += 1
        elif kind is SectionKind.IMPRESSION and is_placeholder(value):
            out[key] = ""
        else:
            out[key] = value
    for kind in SECTION_ORDER:
        if kind in NEGATIVE_SENTENCES and kind not in seen:
            out[kind.value] = NEGATIVE_SENTENCES[kind]
            changed += 1
    return RawRecord(record.id, out, record.labels), changed


def has_impression(record: RawRecord, field_map: Mapping[str, SectionKind] = DEFAULT_FIELD_MAP) -> bool:
    return any(
        _section_for(k, field_map) is SectionKind.IMPRESSION and not is_placeholder(v)
        for k, v in record.source_sections.items()
    )


def filter_missing_impression(
    records: Iterable[RawRecord],
    field_map: Mapping[str, SectionKind] = DEFAULT_FIELD_MAP,
    report: CleanReport | None = None,
) -> tuple[list[RawRecord], CleanReport]:
    report = report or CleanReport()
    kept = []
    for r in records:
        if has_impression(r, field_map):
            kept.append(r)
            report.kept += 1
        else:
            report.dropped_missing_impression += 1
    return kept, report


def restructure(record: RawRecord, field_map: Mapping[str, SectionKind] = DEFAULT_FIELD_MAP) -> str:
    unknown = [k for k in record.source_sections if _section_for(k, field_map) is None]
    if unknown:
        raise RestructureError(record.id, unknown)
    parts: dict[SectionKind, list[str]] = {k: [] for k in SECTION_ORDER}
    for key, value in record.source_sections.items():
        text = (value or "").strip()
        if _RESERVED_TAG_RE.search(text):
            raise RestructureError(record.id, [key], "field contains a reserved trace tag")
        if text:
            parts[_section_for(key, field_map)].append(text)
    labels = [canonicalize_label(l) for l in record.labels]
    bad = [l for l in labels if re.search(r"[,;\n]", l)]
    if bad:
        raise RestructureError(record.id, bad, "labels contain answer delimiters")
    return serialize_sections({k: " ".join(v) for k, v in parts.items()}, labels)


def clean_records(
    records: Iterable[RawRecord],
    field_map: Mapping[str, SectionKind] = DEFAULT_FIELD_MAP,
) -> tuple[list[dict], CleanReport]:
    """normalize -> filter -> restructure; output rows are cleaner-readable again."""
    records = list(records)
    # unmappable keys fail loudly even on records the filter would drop
    for r in records:
        unknown = [k for k in r.source_sections if _section_for(k, field_map) is None]
        if unknown:
            raise RestructureError(r.id, unknown)
    report = CleanReport(input_count=len(records))
    normalized = []
    for r in records:
        nr, n = normalize_placeholders(r, field_map)
        report.placeholders_normalized += n
        normalized.append(nr)
    kept, report = filter_missing_impression(normalized, field_map, report)
    out = []
    for r in kept:
        trace = restructure(r, field_map)
        labels = sorted({canonicalize_label(l) for l in r.labels} - {""})
        parsed = parse_trace(trace, labels)
        out.append(
            {
                "id": r.id,
                "labels": labels,
                "source_sections": {k.value: parsed.sections[k] for k in SECTION_ORDER},
                "trace": trace,
            }
        )
        report.reformatted += 1
    return out, report


def parse_field_map(pairs: Iterable[str]) -> dict[str, SectionKind]:
    """``alias=section`` strings on top of the identity mapping."""
    table = dict(DEFAULT_FIELD_MAP)
    for pair in pairs:
        alias, _, target = pair.partition("=")
        try:
            table[alias.strip().lower()] = SectionKind(target.strip().lower())
        except ValueError:
            raise ValueError(f"bad field alias {pair!r}; expected alias=rhythm|conduction|morphology|impression")
    return table


def read_raw(path: str | Path) -> list[RawRecord]:
    records = []
    ids: set[str] = set()
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            r = RawRecord.from_json(json.loads(line))
            if r.id in ids:
                raise ValueError(f"{path}:{n}: duplicate record id {r.id!r}")
            ids.add(r.id)
            records.append(r)
    return records


def write_clean(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

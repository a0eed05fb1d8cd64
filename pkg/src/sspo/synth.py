"""Synthetic structured-diagnosis task.

Each non-NORM label owns a sinusoid burst on one channel and a fixed evidence
sentence in one reasoning section. A record's signal is the sum of its active
bursts plus white noise; its teacher trace is assembled from the sentences.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .trace import SECTION_ORDER, LabelSet, SectionKind, make_label_set, serialize_sections

NEGATIVE_SENTENCES = {
    SectionKind.RHYTHM: "No rhythm abnormalities identified.",
    SectionKind.CONDUCTION: "No conduction abnormalities identified.",
    SectionKind.MORPHOLOGY: "No morphological abnormalities identified.",
}
NORMAL_IMPRESSION = "Normal ECG."
QUERY = "Diagnose this ECG."
NORM = "NORM"


@dataclass(frozen=True)
class LabelTemplate:
    channel: int
    cycles: float
    start: int
    length: int
    amplitude: float
    section: SectionKind
    sentence: str

    def waveform(self, n_samples: int, n_channels: int) -> np.ndarray:
        out = np.zeros((n_samples, n_channels))
        t = np.arange(self.length)
        burst = self.amplitude * np.sin(2.0 * np.pi * self.cycles * t / self.length)
        out[self.start : self.start + self.length, self.channel] = burst
        return out


def default_templates() -> dict[str, LabelTemplate]:
    return {
        "MI": LabelTemplate(0, 4.0, 32, 64, 1.0, SectionKind.MORPHOLOGY, "Pathological Q waves present."),
        "STTC": LabelTemplate(1, 3.0, 128, 64, 1.0, SectionKind.MORPHOLOGY, "ST segment depression with T wave inversion."),
        "CD": LabelTemplate(2, 5.0, 64, 64, 1.0, SectionKind.CONDUCTION, "Prolonged QRS duration."),
        "HYP": LabelTemplate(3, 2.0, 160, 64, 1.0, SectionKind.MORPHOLOGY, "Increased QRS voltage."),
    }


@dataclass(frozen=True)
class TaskSpec:
    labels: tuple[str, ...] = ("NORM", "MI", "STTC", "CD", "HYP")
    templates: dict[str, LabelTemplate] = field(default_factory=default_templates)
    activation_prob: float = 0.3
    noise_sigma: float = 0.8
    min_labels: int = 1
    max_labels: int = 3
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_samples: int = 256
    n_channels: int = 4
    seed: int = 0

    def validate(self) -> None:
        labels = list(self.labels)
        if NORM not in labels:
            raise ValueError("label set must contain NORM")
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels")
        missing = [l for l in labels if l != NORM and l not in self.templates]
        if missing:
            raise ValueError(f"no template for labels {missing}")
        if self.min_labels < 1 or self.min_labels > self.max_labels:
            raise ValueError(f"need 1 <= min_labels <= max_labels, got {self.min_labels}..{self.max_labels}")
        if self.min_labels > max(1, len(labels) - 1):
            # NORM never co-occurs, so at most |labels| - 1 labels can be active
            raise ValueError(f"min_labels={self.min_labels} is infeasible with {len(labels)} labels")
        if not 0.0 < self.activation_prob < 1.0:
            raise ValueError("activation_prob must be in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for name in self.disease_labels:
            tpl = self.templates[name]
            if not 0 <= tpl.channel < self.n_channels or tpl.start + tpl.length > self.n_samples:
                raise ValueError(f"template for {name} does not fit the signal shape")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    def to_json(self) -> dict:
        out = asdict(self)
        out["labels"] = list(self.labels)
        out["templates"] = {
            k: {**asdict(t), "section": t.section.value} for k, t in self.templates.items()
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        obj = dict(obj)
        obj["labels"] = tuple(obj["labels"])
        obj["templates"] = {
            k: LabelTemplate(**{**t, "section": SectionKind(t["section"])}) for k, t in obj["templates"].items()
        }
        return cls(**obj)

    @property
    def disease_labels(self) -> list[str]:
        return [l for l in self.labels if l != NORM]

    @property
    def label_vocab(self) -> LabelSet:
        return make_label_set(self.labels)

    def waveform(self, label: str) -> np.ndarray:
        return self.templates[label].waveform(self.n_samples, self.n_channels)

    def admissible(self, active: Iterable[str]) -> bool:
        n = max(len(list(active)), 1)
        return self.min_labels <= n <= self.max_labels

    def label_marginals(self) -> dict[str, float]:
        """Exact per-label frequencies under rejection sampling, by subset enumeration."""
        dis = self.disease_labels
        p = self.activation_prob
        mass = {l: 0.0 for l in self.labels}
        total = 0.0
        for bits in itertools.product((0, 1), repeat=len(dis)):
            active = [l for l, b in zip(dis, bits) if b]
            if not self.admissible(active):
                continue
            w = float(np.prod([p if b else 1 - p for b in bits]))
            total += w
            for l in active or [NORM]:
                mass[l] += w
        return {l: m / total for l, m in mass.items()}


@dataclass(frozen=True)
class SynthRecord:
    id: str
    signal: np.ndarray
    truth: LabelSet
    teacher_trace: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "signal": self.signal.tolist(),
            "labels": sorted(self.truth),
            "trace": self.teacher_trace,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthRecord":
        return cls(
            id=obj["id"],
            signal=np.asarray(obj["signal"], dtype=np.float64),
            truth=make_label_set(obj["labels"]),
            teacher_trace=obj["trace"],
        )


def teacher_trace(truth: Iterable[str], spec: TaskSpec) -> str:
    truth = make_label_set(truth)
    active = [l for l in spec.disease_labels if l in truth]
    bodies: dict[SectionKind, list[str]] = {k: [] for k in SECTION_ORDER}
    for name in active:
        tpl = spec.templates[name]
        bodies[tpl.section].append(tpl.sentence)
    sections = {}
    for kind in SECTION_ORDER[:-1]:
        sections[kind] = " ".join(bodies[kind]) or NEGATIVE_SENTENCES[kind]
    if active:
        sections[SectionKind.IMPRESSION] = "Consistent with " + " and ".join(active) + "."
    else:
        sections[SectionKind.IMPRESSION] = NORMAL_IMPRESSION
    return serialize_sections(sections, truth)


def _draw_active(spec: TaskSpec, rng: np.random.Generator) -> list[str]:
    dis = spec.disease_labels
    while True:
        active = [l for l, u in zip(dis, rng.random(len(dis))) if u < spec.activation_prob]
        if spec.admissible(active):
            return active


def make_record(spec: TaskSpec, index: int, record_id: str) -> SynthRecord:
    # one stream per record index keeps sharded generation identical
    rng = np.random.default_rng([spec.seed, index])
    active = _draw_active(spec, rng)
    signal = np.zeros((spec.n_samples, spec.n_channels))
    for name in active:
        signal += spec.waveform(name)
    if spec.noise_sigma > 0:
        signal += rng.normal(0.0, spec.noise_sigma, signal.shape)
    truth = make_label_set(active or [NORM])
    return SynthRecord(record_id, signal, truth, teacher_trace(truth, spec))


def generate_dataset(spec: TaskSpec) -> dict[str, list[SynthRecord]]:
    spec.validate()
    out: dict[str, list[SynthRecord]] = {}
    index = 0
    for split, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        out[split] = [make_record(spec, index + i, f"{split}-{i:05d}") for i in range(n)]
        index += n
    return out


def bayes_oracle(signal: np.ndarray, spec: TaskSpec) -> LabelSet:
    """Matched-filter detector thresholded halfway between noiseless on/off responses."""
    x = np.asarray(signal, dtype=np.float64)
    found = []
    for name in spec.disease_labels:
        tpl = spec.waveform(name)
        norm = np.linalg.norm(tpl)
        on = float((tpl * tpl).sum()) / norm
        off = 0.0
        if float((x * tpl).sum()) / norm > 0.5 * (on + off):
            found.append(name)
    return make_label_set(found or [NORM])


def vocabulary_texts(spec: TaskSpec) -> list[str]:
    texts = [QUERY, NORMAL_IMPRESSION, "Consistent with and."]
    texts += list(NEGATIVE_SENTENCES.values())
    texts += [spec.templates[l].sentence for l in spec.disease_labels]
    texts += list(spec.labels)
    return texts


def write_jsonl(path: str | Path, records: Iterable[SynthRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[SynthRecord]:
    with open(path) as fh:
        return [SynthRecord.from_json(json.loads(line)) for line in fh if line.strip()]

"""Dataset records and the line-delimited manifest format."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SCHEMA_VERSION = 1

SYMPTOMS: tuple[str, ...] = (
    "infiltration",
    "effusion",
    "atelectasis",
    "nodule",
    "mass",
    "pneumothorax",
    "consolidation",
)
N_SYMPTOMS = len(SYMPTOMS)

_KEYS = ("image_path", "patient_id", "source", "disease", "symptoms", "boxes")
_BOX_KEYS = ("symptom", "x", "y", "w", "h")


class ManifestError(ValueError):
    """Raised for unparsable or invalid manifest content."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DiseaseLabel(enum.Enum):
    NORMAL = "normal"
    TB = "tb"
    COVID = "covid"
    UNLABELED = "unlabeled"

    @property
    def index(self) -> int:
        """Class index for the disease head; -1 when there is no label."""
        return _DISEASE_INDEX[self]

    @classmethod
    def from_index(cls, i: int) -> "DiseaseLabel":
        return DISEASE_CLASSES[i]


DISEASE_CLASSES: tuple[DiseaseLabel, ...] = (DiseaseLabel.NORMAL, DiseaseLabel.TB, DiseaseLabel.COVID)
_DISEASE_INDEX = {d: i for i, d in enumerate(DISEASE_CLASSES)}
_DISEASE_INDEX[DiseaseLabel.UNLABELED] = -1


@dataclass(frozen=True)
class Box:
    symptom: str
    x: int
    y: int
    w: int
    h: int

    @property
    def xywh(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.w, self.h

    def to_json(self) -> dict:
        return {"symptom": self.symptom, "x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    patient_id: str
    source: str
    disease: DiseaseLabel
    symptoms: tuple[bool, ...] | None = None
    boxes: tuple[Box, ...] = ()

    def __post_init__(self):
        if not self.image_path:
            raise ManifestError("image_path must be nonempty")
        if not self.patient_id:
            raise ManifestError("patient_id must be nonempty")
        if self.symptoms is not None and len(self.symptoms) != N_SYMPTOMS:
            raise ManifestError(f"symptoms length must be {N_SYMPTOMS}, got {len(self.symptoms)}")
        for b in self.boxes:
            if b.symptom not in SYMPTOMS:
                raise ManifestError(f"boxes.symptom: unknown symptom {b.symptom!r}")
            if min(b.x, b.y, b.w, b.h) < 0:
                raise ManifestError("boxes: coordinates must be non-negative")

    @property
    def has_symptom(self) -> bool:
        return bool(self.symptoms) and any(self.symptoms)

    def symptom_count(self) -> int:
        return sum(self.symptoms) if self.symptoms is not None else 0

    def to_json(self) -> dict:
        return {
            "image_path": self.image_path,
            "patient_id": self.patient_id,
            "source": self.source,
            "disease": self.disease.value,
            "symptoms": None if self.symptoms is None else [int(s) for s in self.symptoms],
            "boxes": [b.to_json() for b in self.boxes],
        }


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...] = ()
    schema_version: int = SCHEMA_VERSION
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        seen: dict[str, int] = {}
        for i, r in enumerate(self.records):
            if r.image_path in seen:
                raise ManifestError(f"duplicate image_path {r.image_path!r}", line=i + 1)
            seen[r.image_path] = i
        object.__setattr__(self, "_index", seen)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_path(self, image_path: str) -> SampleRecord:
        return self.records[self._index[image_path]]

    def patients(self) -> list[str]:
        """Distinct patient ids in first-appearance order."""
        return list(dict.fromkeys(r.patient_id for r in self.records))

    def select_patients(self, ids: Iterable[str]) -> "Manifest":
        keep = set(ids)
        return Manifest(tuple(r for r in self.records if r.patient_id in keep), self.schema_version)


def _parse_record(obj, lineno: int) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ManifestError("expected a JSON object", lineno)
    unknown = sorted(set(obj) - set(_KEYS))
    if unknown:
        raise ManifestError(f"unknown key(s): {', '.join(unknown)}", lineno)
    missing = [k for k in _KEYS if k not in obj]
    if missing:
        raise ManifestError(f"missing key(s): {', '.join(missing)}", lineno)
    for k in ("image_path", "patient_id", "source"):
        if not isinstance(obj[k], str):
            raise ManifestError(f"{k} must be a string", lineno)
    try:
        disease = DiseaseLabel(obj["disease"])
    except ValueError:
        raise ManifestError(f"disease: invalid value {obj['disease']!r}", lineno) from None

    symptoms = obj["symptoms"]
    if symptoms is not None:
        if not isinstance(symptoms, list):
            raise ManifestError("symptoms must be an array or null", lineno)
        if len(symptoms) != N_SYMPTOMS:
            raise ManifestError(f"symptoms length must be {N_SYMPTOMS}, got {len(symptoms)}", lineno)
        if any(type(s) is not int or s not in (0, 1) for s in symptoms):
            raise ManifestError("symptoms entries must be 0 or 1", lineno)
        symptoms = tuple(bool(s) for s in symptoms)

    if not isinstance(obj["boxes"], list):
        raise ManifestError("boxes must be an array", lineno)
    boxes = []
    for b in obj["boxes"]:
        if not isinstance(b, dict) or set(b) != set(_BOX_KEYS):
            raise ManifestError(f"boxes entries need exactly keys {', '.join(_BOX_KEYS)}", lineno)
        if any(type(b[k]) is not int for k in _BOX_KEYS[1:]):
            raise ManifestError("boxes coordinates must be integers", lineno)
        boxes.append(Box(b["symptom"], b["x"], b["y"], b["w"], b["h"]))
    try:
        return SampleRecord(obj["image_path"], obj["patient_id"], obj["source"], disease, symptoms, tuple(boxes))
    except ManifestError as e:
        raise ManifestError(str(e), lineno) from None


def parse_manifest(lines: Iterable[str]) -> Manifest:
    records = []
    paths: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"parse error: {e.msg}", lineno) from None
        rec = _parse_record(obj, lineno)
        if rec.image_path in paths:
            raise ManifestError(f"duplicate image_path {rec.image_path!r}", lineno)
        paths.add(rec.image_path)
        records.append(rec)
    return Manifest(tuple(records))


def load_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as f:
        return parse_manifest(f)


def dumps_record(record: SampleRecord) -> str:
    return json.dumps(record.to_json(), sort_keys=True, separators=(", ", ": "))


def write_manifest(manifest: Manifest | Sequence[SampleRecord], path) -> None:
    records = manifest.records if isinstance(manifest, Manifest) else manifest
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(dumps_record(r) + "\n")


def class_counts(m: Manifest) -> tuple[dict[DiseaseLabel, int], dict[str, int]]:
    """Per-disease record counts and per-symptom positive counts.

    Symptom counts are multi-label, so their sum may exceed the number of records.
    UNLABELED is only reported when present.
    """
    disease = {d: 0 for d in DISEASE_CLASSES}
    symptoms = {s: 0 for s in SYMPTOMS}
    for r in m.records:
        disease[r.disease] = disease.get(r.disease, 0) + 1
        if r.symptoms is not None:
            for name, bit in zip(SYMPTOMS, r.symptoms):
                symptoms[name] += int(bit)
    return disease, symptoms

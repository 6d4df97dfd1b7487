"""
Test-result structuralization: rule-based note cleaning, regex field
extraction into a fixed-width numeric vector, and density-based pruning.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, ContractError

log = logging.getLogger(__name__)

RULE_CLASSES = (
    "comment_removal",
    "emphasis_stripping",
    "punctuation_spacing_removal",
    "punctuation_unification",
    "typo_correction",
    "measurement_unification",
    "phrasing_unification",
)
DISEASES = ("pneumonia", "rti", "bronchitis", "asthma")
FIELD_KINDS = ("numeric", "sign")
DEFAULT_DENSITY_THRESHOLD = 0.075

_WS = re.compile(r"\s+")
_MAX_PASSES = 8


# ---------------------------------------------------------------------------
# Note types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawNote:
    id: str
    text: str
    labels: tuple[int, ...] | None = None
    meta: dict | None = None

    def __post_init__(self):
        if self.labels is not None:
            labels = tuple(int(v) for v in self.labels)
            if len(labels) != len(DISEASES) or any(v not in (0, 1) for v in labels):
                raise ContractError(f"note {self.id}: labels must be a 4-vector of 0/1, got {self.labels}")
            if not any(labels):
                raise ContractError(f"note {self.id}: at least one disease label must be set")
            object.__setattr__(self, "labels", labels)

    def to_dict(self) -> dict:
        out = {"id": self.id, "text": self.text}
        if self.labels is not None:
            out["labels"] = list(self.labels)
        if self.meta is not None:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RawNote":
        return cls(id=str(d["id"]), text=d["text"], labels=d.get("labels"), meta=d.get("meta"))


@dataclass(frozen=True)
class CleanNote:
    id: str
    text: str


@dataclass(frozen=True)
class StructuredRecord:
    """Numeric field vector plus the text left after extraction.

    ``present[i]`` is False exactly when field ``i`` was not found, in which
    case ``values[i]`` is 0.
    """

    values: np.ndarray
    present: np.ndarray
    residual_text: str
    id: str | None = None
    failures: tuple[str, ...] = ()

    def project(self, indices: Sequence[int]) -> "StructuredRecord":
        idx = np.asarray(indices, dtype=int)
        return StructuredRecord(self.values[idx].copy(), self.present[idx].copy(),
                                self.residual_text, self.id, self.failures)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "values": [float(v) for v in self.values],
            "present": [bool(p) for p in self.present],
            "residual_text": self.residual_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredRecord":
        return cls(np.asarray(d["values"], dtype=np.float64), np.asarray(d["present"], dtype=bool),
                   d["residual_text"], d.get("id"))


def write_corpus(path: str | Path, notes: Iterable[RawNote]) -> None:
    """One JSON document per line with keys id, text, labels and meta."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for note in notes:
            fh.write(json.dumps(note.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[RawNote]:
    notes, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                note = RawNote.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ContractError(f"{path}:{lineno}: malformed corpus record: {exc}") from exc
            if note.id in seen:
                raise ContractError(f"{path}:{lineno}: duplicate note id {note.id!r}")
            seen.add(note.id)
            notes.append(note)
    return notes


# ---------------------------------------------------------------------------
# Rule tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleTable:
    """Seven ordered classes of (compiled pattern, replacement) rules."""

    classes: tuple[tuple[str, tuple[tuple[re.Pattern, str], ...]], ...]

    @classmethod
    def from_dict(cls, doc: dict) -> "RuleTable":
        entries = doc.get("classes")
        if not isinstance(entries, list) or len(entries) != len(RULE_CLASSES):
            raise ConfigurationError(f"rule table needs exactly {len(RULE_CLASSES)} classes")
        classes = []
        for expected, entry in zip(RULE_CLASSES, entries):
            if entry.get("name") != expected:
                raise ConfigurationError(f"rule class {entry.get('name')!r} out of order; expected {expected!r}")
            compiled = []
            for rule in entry.get("rules", []):
                try:
                    pat = re.compile(rule["pattern"])
                except (re.error, KeyError, TypeError) as exc:
                    raise ConfigurationError(f"bad rule in {expected}: {rule!r}: {exc}") from exc
                repl = rule.get("replacement", "")
                try:
                    _check_replacement(pat, repl)
                    pat.sub(repl, "")
                except (re.error, IndexError) as exc:
                    raise ConfigurationError(f"bad replacement in {expected}: {rule!r}: {exc}") from exc
                compiled.append((pat, repl))
            classes.append((expected, tuple(compiled)))
        return cls(tuple(classes))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RuleTable":
        if path is None:
            text = resources.files("finegrain.data").joinpath("default_rules.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {"classes": [
            {"name": name, "rules": [{"pattern": p.pattern, "replacement": r} for p, r in rules]}
            for name, rules in self.classes
        ]}


def _check_replacement(pat: re.Pattern, repl: str) -> None:
    for ref in re.findall(r"\\(\d+)", repl):
        if int(ref) > pat.groups:
            raise re.error(f"replacement references group {ref} but pattern has {pat.groups}")


def _apply_rules(text: str, rules: RuleTable) -> str:
    for _, class_rules in rules.classes:
        for pat, repl in class_rules:
            text = pat.sub(repl, text)
    return _WS.sub(" ", text).strip()


def preprocess(raw: RawNote, rules: RuleTable) -> CleanNote:
    """Apply the rule classes in order, repeating until the text is stable."""
    text = _WS.sub(" ", raw.text).strip()
    for _ in range(_MAX_PASSES):
        new = _apply_rules(text, rules)
        if new == text:
            break
        text = new
    else:
        log.warning("note %s: rule table did not reach a fixed point in %d passes", raw.id, _MAX_PASSES)
    return CleanNote(raw.id, text)


# ---------------------------------------------------------------------------
# Field schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldSpec:
    name: str
    unit: str
    kind: str
    pattern: str
    default: float = 0.0
    regex: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ConfigurationError(f"field {self.name}: kind must be one of {FIELD_KINDS}, got {self.kind!r}")
        try:
            regex = re.compile(self.pattern)
        except re.error as exc:
            raise ConfigurationError(f"field {self.name}: pattern does not compile: {exc}") from exc
        if regex.groups != 1:
            raise ConfigurationError(f"field {self.name}: pattern needs exactly one capture group, has {regex.groups}")
        object.__setattr__(self, "regex", regex)


class FieldSchema(tuple):
    """Ordered, name-unique sequence of :class:`FieldSpec`."""

    def __new__(cls, fields: Iterable[FieldSpec]):
        fields = tuple(fields)
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigurationError(f"duplicate field names: {dupes}")
        return super().__new__(cls, fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self]

    def index(self, name: str) -> int:  # type: ignore[override]
        return self.names.index(name)

    def subset(self, names: Iterable[str]) -> "FieldSchema":
        keep = set(names)
        return FieldSchema(f for f in self if f.name in keep)

    def to_dict(self) -> dict:
        return {"fields": [{"name": f.name, "unit": f.unit, "kind": f.kind, "pattern": f.pattern} for f in self]}

    @classmethod
    def from_dict(cls, doc: dict) -> "FieldSchema":
        entries = doc["fields"] if isinstance(doc, dict) else doc
        try:
            return cls(FieldSpec(e["name"], e.get("unit", ""), e["kind"], e["pattern"]) for e in entries)
        except KeyError as exc:
            raise ConfigurationError(f"schema entry missing key {exc}") from exc

    @classmethod
    def load(cls, path: str | Path | None = None) -> "FieldSchema":
        if path is None:
            text = resources.files("finegrain.data").joinpath("default_schema.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", "utf-8")

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

_SIGN_RUN = re.compile(r"^(\++|-+)$")
_NUM_PLUS = re.compile(r"^([0-9]+)\+$")
_ORPHAN_PUNCT = re.compile(r"\s*([,;])(?:\s*[,;])+")
_SPACE_BEFORE_PUNCT = re.compile(r"\s+([,.;:])(?!\d)")


def parse_sign(token: str) -> float:
    """``'++'`` -> 2, ``'-'`` -> -1, ``'3+'`` -> 3."""
    token = token.strip()
    m = _SIGN_RUN.match(token)
    if m:
        return float(len(token)) if token[0] == "+" else -float(len(token))
    m = _NUM_PLUS.match(token)
    if m:
        return float(m.group(1))
    raise ValueError(f"unparseable sign result {token!r}")


def _tidy(text: str) -> str:
    text = _WS.sub(" ", text)
    text = _ORPHAN_PUNCT.sub(r"\1", text)
    text = _SPACE_BEFORE_PUNCT.sub(r"\1", text)
    return text.strip(" ,;:.")


def extract(note: CleanNote, schema: FieldSchema) -> StructuredRecord:
    """Pull every schema field out of the text.

    The first match of each field's pattern supplies its value; every match is
    removed from the residual text. Unparseable captures leave the field
    absent and are listed in ``failures``.
    """
    text = note.text
    values = np.zeros(len(schema))
    present = np.zeros(len(schema), dtype=bool)
    failures = []
    for i, spec in enumerate(schema):
        m = spec.regex.search(text)
        if m is None:
            continue
        raw = m.group(1)
        try:
            value = parse_sign(raw) if spec.kind == "sign" else float(raw)
        except (TypeError, ValueError):
            failures.append(spec.name)
            log.debug("note %s: field %s could not parse %r", note.id, spec.name, raw)
        else:
            if np.isfinite(value):
                values[i] = value
                present[i] = True
            else:
                failures.append(spec.name)
        text = spec.regex.sub(" ", text)
    # span removal can splice new matches together; sweep until clean
    for _ in range(_MAX_PASSES):
        swept = text
        for spec in schema:
            swept = spec.regex.sub(" ", swept)
        if swept == text:
            break
        text = swept
    return StructuredRecord(values, present, _tidy(text), note.id, tuple(failures))


# ---------------------------------------------------------------------------
# Density pruning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityReport:
    names: tuple[str, ...]
    non_empty: tuple[int, ...]
    total: int

    @property
    def densities(self) -> dict[str, float]:
        return {n: c / self.total for n, c in zip(self.names, self.non_empty)}

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "fields": [
                {"name": n, "non_empty": c, "density": c / self.total}
                for n, c in zip(self.names, self.non_empty)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DensityReport":
        return cls(tuple(f["name"] for f in doc["fields"]), tuple(int(f["non_empty"]) for f in doc["fields"]),
                   int(doc["total"]))


def density_report(records: Sequence[StructuredRecord], schema: FieldSchema) -> DensityReport:
    if not records:
        raise ContractError("density report needs at least one record")
    width = len(schema)
    counts = np.zeros(width, dtype=int)
    for r in records:
        if r.present.shape != (width,):
            raise ContractError(f"record {r.id} has width {r.present.shape[0]}, schema has {width}")
        counts += r.present
    return DensityReport(tuple(schema.names), tuple(int(c) for c in counts), len(records))


def prune_schema(report: DensityReport, schema: FieldSchema,
                 threshold: float = DEFAULT_DENSITY_THRESHOLD) -> FieldSchema:
    """Keep, in order, the fields whose density is strictly above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    if tuple(report.names) != tuple(schema.names):
        raise ContractError("density report does not describe this schema")
    dens = report.densities
    kept = FieldSchema(f for f in schema if dens[f.name] > threshold)
    if not kept:
        raise ConfigurationError(f"no field has density above {threshold}; the model needs at least one")
    return kept


# ---------------------------------------------------------------------------
# Estimator
# ---------------------------------------------------------------------------

def as_raw_notes(X) -> list[RawNote]:
    notes = []
    for i, item in enumerate(X):
        if isinstance(item, RawNote):
            notes.append(item)
        elif isinstance(item, str):
            notes.append(RawNote(str(i), item))
        elif isinstance(item, dict):
            notes.append(RawNote.from_dict(item))
        else:
            raise ContractError(f"cannot interpret item {i} of type {type(item).__name__} as a note")
    return notes


class Structuralizer(TransformerMixin, BaseEstimator):
    """Turn raw notes into :class:`StructuredRecord` objects.

    ``fit`` extracts every candidate field, measures per-field density and
    keeps the fields above ``threshold``; ``transform`` returns records whose
    value vectors follow the retained schema. Text matched by any candidate
    pattern is removed from the residual, retained or not.

    Parameters
    ----------
    rules : RuleTable, path or None
        Preprocessing rule table; None loads the packaged default.
    schema : FieldSchema, path or None
        Candidate field schema; None loads the packaged default.
    threshold : float
        Density pruning threshold (strict).
    prune : bool
        When False every candidate field is retained.
    """

    def __init__(self, rules=None, schema=None, threshold=DEFAULT_DENSITY_THRESHOLD, prune=True):
        self.rules = rules
        self.schema = schema
        self.threshold = threshold
        self.prune = prune

    def _resolve(self):
        rules = self.rules if isinstance(self.rules, RuleTable) else RuleTable.load(self.rules)
        schema = self.schema if isinstance(self.schema, FieldSchema) else FieldSchema.load(self.schema)
        return rules, schema

    def extract_all(self, X) -> list[StructuredRecord]:
        """Full-width records over the candidate schema."""
        rules, schema = self._resolve()
        return [extract(preprocess(n, rules), schema) for n in as_raw_notes(X)]

    def fit(self, X, y=None):
        rules, schema = self._resolve()
        records = [extract(preprocess(n, rules), schema) for n in as_raw_notes(X)]
        self.rules_ = rules
        self.candidate_schema_ = schema
        self.density_report_ = density_report(records, schema)
        self.schema_ = prune_schema(self.density_report_, schema, self.threshold) if self.prune else schema
        self.retained_index_ = np.array([schema.index(n) for n in self.schema_.names], dtype=int)
        self.n_features_out_ = len(self.schema_)
        return self

    def transform(self, X) -> list[StructuredRecord]:
        check_is_fitted(self, "schema_")
        out = []
        for note in as_raw_notes(X):
            rec = extract(preprocess(note, self.rules_), self.candidate_schema_)
            out.append(rec.project(self.retained_index_))
        return out

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "schema_")
        return np.array(self.schema_.names, dtype=object)

"""
Deterministic synthetic notes with planted label rules.

Every note is built from its own generator ``default_rng([seed, index])``,
so any subset can be regenerated independently and in any order. Labels
are a pure function of the rendered text: a disease is present exactly when
its trigger token appears in the residual text and its numeric predicate
holds on the extracted field value.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractError
from .structuralizer import (
    DISEASES,
    FieldSchema,
    RawNote,
    RuleTable,
    extract,
    preprocess,
    read_corpus,
    write_corpus,
)

SPLIT_PROPORTIONS = (11100, 1821, 1776)
SPLITS = ("train", "val", "test")
MONTH_WEIGHTS = (1.6, 1.5, 1.3, 1.0, 0.8, 0.6, 0.5, 0.5, 0.7, 0.9, 1.2, 1.4)
PRESETS = ("text", "struct", "mixed")

_SYLLABLES = ("ka", "lo", "mi", "nu", "re", "sa", "ti", "vo", "ze", "pa", "du", "fe", "go", "hi")
_TRIGGERS = ("zorvath", "quelmir", "brastik", "yundova")
_DISTRACTORS = ("zorvat", "quelmor", "brastak", "yundiva")


def _constructed_words(n_syllables: int) -> list[str]:
    words = [""]
    for _ in range(n_syllables):
        words = [w + s for w in words for s in _SYLLABLES]
    return words


FILLERS = tuple(_constructed_words(2))


@dataclass(frozen=True)
class FieldGen:
    """Background distribution of one field: clipped normal, fixed decimals."""

    mean: float
    sd: float
    lo: float
    hi: float
    decimals: int
    presence: float


FIELD_GENS: dict[str, FieldGen] = {
    "Temp": FieldGen(37.6, 0.8, 35.5, 41.0, 1, 0.8130),
    "HR": FieldGen(120, 20, 60, 200, 0, 0.7866),
    "BR": FieldGen(32, 9, 12, 70, 0, 0.7810),
    "SBP": FieldGen(100, 12, 70, 140, 0, 0.6175),
    "DBP": FieldGen(62, 8, 40, 90, 0, 0.6175),
    "Weight": FieldGen(15, 6, 3, 60, 1, 0.0341),
    "SPO2": FieldGen(96, 2, 80, 100, 0, 0.0759),
    "WBC": FieldGen(10, 4, 2, 30, 1, 0.7297),
    "GRA": FieldGen(50, 15, 5, 95, 1, 0.0317),
    "N": FieldGen(55, 15, 5, 95, 1, 0.6332),
    "CRP": FieldGen(15, 15, 0.5, 150, 1, 0.6220),
    "HGB": FieldGen(120, 12, 70, 170, 0, 0.6815),
    "RBC": FieldGen(4.5, 0.5, 2.5, 6.5, 2, 0.0401),
    "PLT": FieldGen(300, 90, 50, 700, 0, 0.6823),
    "LY": FieldGen(35, 15, 2, 90, 1, 0.4906),
    "ALT": FieldGen(20, 10, 3, 120, 0, 0.0357),
    "BPH": FieldGen(7.38, 0.05, 7.1, 7.6, 2, 0.1059),
    "PCO2": FieldGen(40, 6, 20, 70, 0, 0.0950),
    "PO2": FieldGen(90, 15, 40, 150, 0, 0.0925),
    "K": FieldGen(4.2, 0.4, 2.8, 6.0, 1, 0.0972),
    "Na": FieldGen(138, 3, 125, 150, 0, 0.0857),
    "Lac": FieldGen(1.5, 0.6, 0.3, 6.0, 1, 0.0242),
}
SIGN_PRESENCE = {"LEU": 0.030, "PRO": 0.054, "BLO": 0.0443}
GENDER_PRESENCE = 0.3572
AGE_PRESENCE = 0.9989

_PLAIN = {
    "HR": "HR {} bpm", "BR": "BR {} /min", "Weight": "Weight {} kg", "SPO2": "SpO2 {} %",
    "WBC": "WBC {} 10^9/L", "GRA": "GRA {} %", "N": "N {} %", "CRP": "CRP {} mg/L",
    "HGB": "Hemoglobin {}g/L", "RBC": "RBC {} 10^12/L", "PLT": "PLT {} 10^9/L", "LY": "LY {} %",
    "ALT": "ALT {} U/L", "BPH": "pH {}", "PCO2": "PCO2 {} mmHg", "PO2": "PO2 {} mmHg",
    "K": "K {} mmol/L", "Na": "Na {} mmol/L", "Lac": "Lac {} mmol/L",
}
# surface variants that the default rule table folds back into the plain form
_VARIANTS = {
    "HR": ["Heart rate {} bpm"],
    "WBC": ["WBC {}×10^9/L", "WBC {} x 10^9/L"],
    "HGB": ["HGB {} g/l", "Haemoglobin {}g/L"],
    "K": ["K {} mmol/l"],
    "Na": ["Na {} mmol/l"],
}
_SIGN_RENDER = {"LEU": "Leucocyte Esterase {}", "PRO": "PRO {}", "BLO": "BLO {}"}
_SIGN_TOKENS = ("-", "+", "++", "+++", "2+")


@dataclass(frozen=True)
class DiseaseRule:
    """``label = (any trigger in text) AND (field op threshold)``; either side may be omitted."""

    triggers: tuple[str, ...] = ()
    field: str | None = None
    op: str | None = None
    threshold: float | None = None
    margin: float = 0.0

    @property
    def has_predicate(self) -> bool:
        return self.field is not None

    def holds(self, value: float) -> bool:
        return value > self.threshold if self.op == ">" else value < self.threshold


@dataclass(frozen=True)
class GeneratorConfig:
    n_notes: int = 10_000
    seed: int = 0
    preset: str = "mixed"
    cooccurrence: tuple[float, float, float] = (0.775, 0.222, 0.003)
    prevalence: tuple[float, float, float, float] = (0.35, 0.25, 0.22, 0.18)
    rules: tuple[DiseaseRule, ...] = ()
    text_confuser_rate: float = 0.3
    struct_confuser_rate: float = 0.3
    distractor_rate: float = 0.3
    variant_rate: float = 0.25
    complaint_length: tuple[int, int] = (4, 10)
    male_rate: float = 0.64
    month_weights: tuple[float, ...] = MONTH_WEIGHTS
    split_sizes: tuple[int, int, int] | None = None

    def __post_init__(self):
        if not self.rules:
            object.__setattr__(self, "rules", preset_rules(self.preset))
        self.validate()

    def validate(self) -> None:
        if abs(sum(self.cooccurrence) - 1.0) > 1e-9 or min(self.cooccurrence) < 0:
            raise ConfigurationError(f"co-occurrence targets must be non-negative and sum to 1, got {self.cooccurrence}")
        if len(self.prevalence) != len(DISEASES) or min(self.prevalence) <= 0:
            raise ConfigurationError("prevalence needs one positive weight per disease")
        if len(self.rules) != len(DISEASES):
            raise ConfigurationError(f"need one rule per disease, got {len(self.rules)}")
        if len(self.month_weights) != 12 or min(self.month_weights) < 0:
            raise ConfigurationError("month_weights needs 12 non-negative entries")
        if self.text_confuser_rate + self.struct_confuser_rate > 1.0:
            raise ConfigurationError("confuser rates must sum to at most 1")
        used_fields, used_triggers = set(), set()
        for name, rule in zip(DISEASES, self.rules):
            if not rule.triggers and not rule.has_predicate:
                raise ConfigurationError(f"rule for {name} needs a trigger or a numeric predicate")
            for t in rule.triggers:
                if len(t.split()) != 1 or t in FILLERS or t in used_triggers:
                    raise ConfigurationError(f"trigger {t!r} must be a unique single token outside the filler vocabulary")
                used_triggers.add(t)
            if rule.has_predicate:
                gen = FIELD_GENS.get(rule.field)
                if gen is None:
                    raise ConfigurationError(f"rule for {name}: unknown numeric field {rule.field!r}")
                if rule.field in used_fields or rule.field in ("SBP", "DBP"):
                    raise ConfigurationError(f"rule for {name}: field {rule.field} cannot serve two rules")
                used_fields.add(rule.field)
                if rule.op not in (">", "<"):
                    raise ConfigurationError(f"rule for {name}: op must be '>' or '<'")
                if not gen.lo < rule.threshold - rule.margin < rule.threshold + rule.margin < gen.hi:
                    raise ConfigurationError(
                        f"rule for {name}: threshold {rule.threshold} +/- {rule.margin} leaves no room inside "
                        f"[{gen.lo}, {gen.hi}], so some label combinations are unsatisfiable")
        if self.split_sizes is not None:
            if len(self.split_sizes) != 3 or min(self.split_sizes) < 0:
                raise ConfigurationError("split_sizes needs three non-negative counts")
            if sum(self.split_sizes) != self.n_notes:
                object.__setattr__(self, "n_notes", int(sum(self.split_sizes)))

    def sizes(self) -> tuple[int, int, int]:
        if self.split_sizes is not None:
            return tuple(int(v) for v in self.split_sizes)
        total = sum(SPLIT_PROPORTIONS)
        n_train = round(self.n_notes * SPLIT_PROPORTIONS[0] / total)
        n_val = round(self.n_notes * SPLIT_PROPORTIONS[1] / total)
        return n_train, n_val, self.n_notes - n_train - n_val

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rules"] = [asdict(r) for r in self.rules]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "rules" in d:
            d["rules"] = tuple(DiseaseRule(**{**r, "triggers": tuple(r.get("triggers", ()))}) for r in d["rules"])
        for key in ("cooccurrence", "prevalence", "complaint_length", "month_weights", "split_sizes"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)


_PREDICATES = (
    ("CRP", ">", 20.0, 3.0),
    ("Temp", ">", 38.0, 0.2),
    ("WBC", ">", 12.0, 1.0),
    ("BR", ">", 40.0, 3.0),
)


def preset_rules(preset: str) -> tuple[DiseaseRule, ...]:
    if preset not in PRESETS:
        raise ConfigurationError(f"preset must be one of {PRESETS}, got {preset!r}")
    rules = []
    for trig, (fname, op, thr, margin) in zip(_TRIGGERS, _PREDICATES):
        if preset == "text":
            rules.append(DiseaseRule(triggers=(trig,)))
        elif preset == "struct":
            rules.append(DiseaseRule(field=fname, op=op, threshold=thr, margin=margin))
        else:
            rules.append(DiseaseRule(triggers=(trig,), field=fname, op=op, threshold=thr, margin=margin))
    return tuple(rules)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _fmt(value: float, decimals: int) -> str:
    return f"{value:.{decimals}f}"


def _background(gen: FieldGen, rng: np.random.Generator) -> float:
    return float(np.clip(rng.normal(gen.mean, gen.sd), gen.lo, gen.hi))


def _constrained(gen: FieldGen, rule: DiseaseRule, satisfy: bool, rng: np.random.Generator) -> float:
    """A value on the requested side of the rule, outside the margin band."""
    above = (rule.op == ">") == satisfy
    lo, hi = (rule.threshold + rule.margin, gen.hi) if above else (gen.lo, rule.threshold - rule.margin)
    for _ in range(20):
        v = _background(gen, rng)
        if lo <= v <= hi:
            return v
    return float(rng.uniform(lo, hi))


def _render_value(name: str, text_value: str, rng: np.random.Generator, variant_rate: float) -> str:
    if name == "Temp":
        u = rng.random()
        v = float(text_value)
        if u < variant_rate / 3:
            return f"T ({text_value} degrees C)"
        if u < 2 * variant_rate / 3:
            return f"Temp {text_value}℃"
        if u < variant_rate and 30.0 <= v < 40.0:
            return f"T {text_value[1:]} degrees C"
        return f"T {text_value} degrees C"
    if name in _VARIANTS and rng.random() < variant_rate:
        return str(rng.choice(_VARIANTS[name])).format(text_value)
    return _PLAIN[name].format(text_value)


def _draw_labels(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    k = int(rng.choice(3, p=cfg.cooccurrence)) + 1
    p = np.asarray(cfg.prevalence, dtype=float)
    chosen = rng.choice(len(DISEASES), size=k, replace=False, p=p / p.sum())
    labels = np.zeros(len(DISEASES), dtype=int)
    labels[chosen] = 1
    return labels


def generate_note(cfg: GeneratorConfig, index: int) -> RawNote:
    rng = np.random.default_rng([cfg.seed, index])
    labels = _draw_labels(cfg, rng)

    # meta
    age_days = int(np.clip(rng.gamma(2.0, 700.0), 30, 14 * 365))
    gender = "male" if rng.random() < cfg.male_rate else "female"
    w = np.asarray(cfg.month_weights, dtype=float)
    month = int(rng.choice(12, p=w / w.sum())) + 1

    # decide what each rule plants
    triggers: list[str] = []
    forced: dict[str, float | None] = {}
    for d, rule in enumerate(cfg.rules):
        if labels[d]:
            plant_trigger, satisfy = True, True
        elif rule.triggers and rule.has_predicate:
            u = rng.random()
            if u < cfg.text_confuser_rate:
                plant_trigger, satisfy = True, False
            elif u < cfg.text_confuser_rate + cfg.struct_confuser_rate:
                plant_trigger, satisfy = False, True
            else:
                plant_trigger, satisfy = False, False
        else:
            plant_trigger, satisfy = False, False
        if plant_trigger and rule.triggers:
            triggers.append(str(rng.choice(rule.triggers)))
        if rule.has_predicate:
            gen = FIELD_GENS[rule.field]
            if satisfy:
                forced[rule.field] = _constrained(gen, rule, True, rng)
            elif rng.random() < gen.presence:
                forced[rule.field] = _constrained(gen, rule, False, rng)
            else:
                forced[rule.field] = None

    # complaint text
    lo, hi = cfg.complaint_length
    words = [str(w) for w in rng.choice(FILLERS, size=int(rng.integers(lo, hi + 1)))]
    for t in triggers:
        words.insert(int(rng.integers(0, len(words) + 1)), t)
    if rng.random() < cfg.distractor_rate:
        words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(_DISTRACTORS)))
    if rng.random() < 0.5:
        words += [str(int(rng.integers(1, 15))), "days"]

    # test results
    planted: dict[str, float] = {}
    parts: list[str] = []
    if rng.random() < AGE_PRESENCE:
        text_value = _fmt(age_days / 365.25, 2)
        planted["Age"] = float(text_value)
        parts.append(f"Age {text_value} years")
    if rng.random() < GENDER_PRESENCE:
        planted["Gender"] = 1.0 if gender == "male" else 0.0
        word = gender if rng.random() < cfg.variant_rate else str(int(planted["Gender"]))
        parts.append(f"Gender {word}")
    bp = rng.random() < FIELD_GENS["SBP"].presence
    for name, gen in FIELD_GENS.items():
        if name in forced:
            value = forced[name]
            if value is None:
                continue
        elif name in ("SBP", "DBP"):
            if not bp:
                continue
            value = _background(gen, rng)
        elif rng.random() < gen.presence:
            value = _background(gen, rng)
        else:
            continue
        planted[name] = float(_fmt(value, gen.decimals))
    if "SBP" in planted:
        s, dia = _fmt(planted["SBP"], 0), _fmt(planted["DBP"], 0)
        parts.append(f"BP {s}/{dia} mmHg" if rng.random() < cfg.variant_rate else f"SBP {s} mmHg DBP {dia} mmHg")
    for name, gen in FIELD_GENS.items():
        if name in planted and name not in ("SBP", "DBP"):
            parts.append(_render_value(name, _fmt(planted[name], gen.decimals), rng, cfg.variant_rate))
    for name, presence in SIGN_PRESENCE.items():
        if rng.random() < presence:
            tok = str(rng.choice(_SIGN_TOKENS))
            planted[name] = float(tok[0]) if tok.endswith("+") and tok[0].isdigit() else (
                float(len(tok)) if tok[0] == "+" else -float(len(tok)))
            parts.append(_SIGN_RENDER[name].format(tok))
    order = rng.permutation(len(parts))
    sep = "，" if rng.random() < cfg.variant_rate else ", "
    text = " ".join(words) + ", " + sep.join(parts[i] for i in order)

    meta = {
        "age_days": age_days,
        "gender": gender,
        "admit_month": month,
        "planted": {"values": planted, "triggers": triggers},
    }
    return RawNote(id=f"n{index:06d}", text=text, labels=tuple(int(v) for v in labels), meta=meta)


@dataclass
class Corpus:
    notes: list[RawNote]
    config: GeneratorConfig
    splits: dict[str, list[RawNote]] = field(default_factory=dict)

    def provenance(self) -> dict:
        return {"generator": "finegrain.synth", "config": self.config.to_dict(),
                "sizes": {k: len(v) for k, v in self.splits.items()}}

    def save(self, out_dir: str | Path) -> None:
        """``corpus.jsonl``, one file per split and ``provenance.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_corpus(out / "corpus.jsonl", self.notes)
        for name, notes in self.splits.items():
            write_corpus(out / f"{name}.jsonl", notes)
        (out / "provenance.json").write_text(json.dumps(self.provenance(), indent=2, sort_keys=True) + "\n", "utf-8")


def generate(config: GeneratorConfig) -> Corpus:
    notes = []
    sizes = config.sizes()
    bounds = np.cumsum((0,) + sizes)
    splits: dict[str, list[RawNote]] = {name: [] for name in SPLITS}
    for i in range(config.n_notes):
        note = generate_note(config, i)
        split = SPLITS[int(np.searchsorted(bounds, i, side="right")) - 1]
        note = replace(note, meta={**note.meta, "split": split})
        notes.append(note)
        splits[split].append(note)
    return Corpus(notes, config, splits)


def load_split(corpus_dir: str | Path, split: str) -> list[RawNote]:
    path = Path(corpus_dir) / f"{split}.jsonl"
    if not path.exists():
        raise ContractError(f"corpus directory {corpus_dir} has no {split}.jsonl")
    return read_corpus(path)


# ---------------------------------------------------------------------------
# Label oracle
# ---------------------------------------------------------------------------

def derive_labels(note: RawNote, config: GeneratorConfig, rules: RuleTable | None = None,
                  schema: FieldSchema | None = None) -> tuple[int, ...]:
    """Re-derive labels from the rendered text alone."""
    rules = rules or RuleTable.load()
    schema = schema or FieldSchema.load()
    rec = extract(preprocess(note, rules), schema)
    tokens = set(rec.residual_text.split())
    out = []
    for rule in config.rules:
        ok = not rule.triggers or any(t in tokens for t in rule.triggers)
        if rule.has_predicate:
            i = schema.index(rule.field)
            ok = ok and bool(rec.present[i]) and rule.holds(float(rec.values[i]))
        out.append(int(ok))
    return tuple(out)


def trigger_token(note: RawNote, disease: int, config: GeneratorConfig) -> str | None:
    """The planted token that causes ``disease`` in this note, if any."""
    if not note.labels or not note.labels[disease]:
        return None
    triggers = set(config.rules[disease].triggers)
    for tok in (note.meta or {}).get("planted", {}).get("triggers", []):
        if tok in triggers:
            return tok
    return None


# ---------------------------------------------------------------------------
# Corpus statistics
# ---------------------------------------------------------------------------

AGE_BINS = ((0, 1), (1, 3), (3, 6), (6, 12), (12, 200))


def corpus_stats(notes: Sequence[RawNote]) -> dict:
    """Exact histograms of age, gender, disease counts and admission month.

    Notes missing a meta field are counted under ``unavailable`` for that panel.
    """
    age = Counter()
    gender = Counter()
    month = Counter()
    diseases = Counter()
    n_labels = Counter()
    for note in notes:
        meta = note.meta or {}
        days = meta.get("age_days")
        if days is None:
            age["unavailable"] += 1
        else:
            years = days / 365.25
            for lo, hi in AGE_BINS:
                if lo <= years < hi:
                    age[f"{lo}-{hi}"] += 1
                    break
        g = meta.get("gender")
        gender[g if g in ("male", "female") else "unavailable"] += 1
        m = meta.get("admit_month")
        month[str(m) if isinstance(m, int) and 1 <= m <= 12 else "unavailable"] += 1
        if note.labels is None:
            diseases["unavailable"] += 1
            n_labels["unavailable"] += 1
        else:
            for name, v in zip(DISEASES, note.labels):
                diseases[name] += v
            n_labels[str(sum(note.labels))] += 1
    n = len(notes)
    age_keys = [f"{lo}-{hi}" for lo, hi in AGE_BINS]
    return {
        "n_notes": n,
        "age_years": {k: age.get(k, 0) for k in age_keys + (["unavailable"] if age["unavailable"] else [])},
        "gender": {k: gender.get(k, 0) for k in ("male", "female", "unavailable") if k != "unavailable" or gender[k]},
        "gender_share": {k: (gender.get(k, 0) / n if n else 0.0) for k in ("male", "female")},
        "diseases": {k: diseases.get(k, 0) for k in list(DISEASES) + (["unavailable"] if diseases["unavailable"] else [])},
        "labels_per_note": dict(sorted(n_labels.items())),
        "admit_month": {str(m): month.get(str(m), 0) for m in range(1, 13)}
        | ({"unavailable": month["unavailable"]} if month["unavailable"] else {}),
    }


def stats_tables(stats: dict) -> dict[str, str]:
    """Each panel as a two-column tab-separated table."""
    out = {}
    for panel in ("age_years", "gender", "diseases", "labels_per_note", "admit_month"):
        rows = [f"{k}\t{v}" for k, v in stats[panel].items()]
        out[panel] = "bin\tcount\n" + "\n".join(rows) + "\n"
    return out

"""Gradient saliency over input tokens and its TSV/HTML renderings."""

from __future__ import annotations

import html
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .embedding import tokenize_and_pad
from .exceptions import ContractError
from .model import FineGrainNet
from .structuralizer import DISEASES
from .tensor_core import Tape, Tensor
from .validation import check_notes, check_target_class

REDUCTIONS = ("sum", "l2")


@dataclass
class SaliencyMap:
    """One value per real token; signed under ``sum``, non-negative under ``l2``."""

    tokens: list[str]
    values: np.ndarray
    target_class: int
    note_id: str = ""
    reduction: str = "sum"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.tokens) != self.values.size:
            raise ContractError(f"{len(self.tokens)} tokens but values of shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("saliency values must be finite")
        if not 0 <= self.target_class < len(DISEASES):
            raise ContractError(f"target class must lie in [0, {len(DISEASES)}), got {self.target_class}")

    def ranking(self) -> np.ndarray:
        """Token positions by descending |value|; ties keep text order."""
        return np.argsort(-np.abs(self.values), kind="stable")

    def top(self, k: int = 3) -> list[tuple[str, float]]:
        return [(self.tokens[i], float(self.values[i])) for i in self.ranking()[:k]]

    def __eq__(self, other) -> bool:
        return (isinstance(other, SaliencyMap) and self.tokens == other.tokens
                and np.array_equal(self.values, other.values) and self.target_class == other.target_class
                and self.note_id == other.note_id and self.reduction == other.reduction)


def token_saliency(net: FineGrainNet, ids: np.ndarray, length: int, values: np.ndarray,
                   target_class: int, reduction: str = "sum") -> np.ndarray:
    """Per-position saliency for one encoded note, padding dropped.

    The embedded note enters the network as a leaf tensor; the target logit
    is back-propagated to it in eval mode and reduced over channels.
    """
    c = check_target_class(target_class)
    if reduction not in REDUCTIONS:
        raise ContractError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if not net.config.uses_text:
        raise ContractError("saliency needs a model with a text stream")
    ids = np.asarray(ids).reshape(1, -1)
    lengths = np.array([int(length)])
    T = Tensor(np.swapaxes(net.table.data[ids], -1, -2), requires_grad=True)
    with Tape() as tape:
        logits, _ = net.forward(ids, lengths, np.asarray(values, dtype=np.float64).reshape(1, -1),
                                train=False, embedded=T)
        out = tc.sum_all(tc.take(logits, (0, c)))
    tape.backward(out)
    g = T.grad[0] if T.grad is not None else np.zeros(T.shape[1:])
    per_token = g.sum(axis=0) if reduction == "sum" else np.sqrt((g * g).sum(axis=0))
    return per_token[:int(length)]


def saliency(note, model, target_class, reduction: str = "sum") -> SaliencyMap:
    """Saliency of a fitted :class:`FineGrainClassifier` for one note.

    ``target_class`` is an index or a disease name. Values are gradients of
    the class logit, not of the probability.
    """
    [raw] = check_notes([note])
    c = check_target_class(target_class)
    enc = model.encode([raw])
    residual = model.residual_texts([raw])[0]
    seq = tokenize_and_pad(residual, model.vocab_, model.length, model.tokenizer)
    vals = token_saliency(model.net_, enc.ids[0], enc.lengths[0], enc.values[0], c, reduction)
    return SaliencyMap(list(seq.tokens), vals, c, raw.id, reduction)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def _escape(tok: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in tok)


def _unescape(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text) and text[i + 1] in _UNESCAPES:
            out.append(_UNESCAPES[text[i + 1]])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def output_stem(smap: SaliencyMap) -> str:
    return f"{smap.note_id or 'note'}.{DISEASES[smap.target_class]}.saliency"


def to_tsv(smap: SaliencyMap) -> str:
    lines = [f"# note_id\t{_escape(smap.note_id)}", f"# target_class\t{smap.target_class}",
             f"# reduction\t{smap.reduction}", "token\tvalue"]
    lines += [f"{_escape(t)}\t{float(v)!r}" for t, v in zip(smap.tokens, smap.values)]
    return "\n".join(lines) + "\n"


def parse_tsv(text: str) -> SaliencyMap:
    meta, tokens, values = {}, [], []
    header_seen = False
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        if line.startswith("# ") and not header_seen:
            key, _, val = line[2:].partition("\t")
            meta[key] = val
            continue
        if not header_seen:
            if line != "token\tvalue":
                raise ContractError(f"line {lineno}: expected the token/value header")
            header_seen = True
            continue
        tok, sep, val = line.rpartition("\t")
        if not sep:
            raise ContractError(f"line {lineno}: expected two tab-separated columns")
        tokens.append(_unescape(tok))
        values.append(float(val))
    if "target_class" not in meta:
        raise ContractError("missing target_class line")
    return SaliencyMap(tokens, np.array(values), int(meta["target_class"]),
                       _unescape(meta.get("note_id", "")), meta.get("reduction", "sum"))


def read_tsv(path: str | Path) -> SaliencyMap:
    return parse_tsv(Path(path).read_text("utf-8"))


def opacities(values: np.ndarray) -> np.ndarray:
    """|value| / max |value|; all zeros when the map is identically zero."""
    mag = np.abs(np.asarray(values, dtype=np.float64))
    peak = mag.max() if mag.size else 0.0
    return mag / peak if peak > 0 else np.zeros_like(mag)


def to_html(smap: SaliencyMap) -> str:
    spans = []
    for tok, v, a in zip(smap.tokens, smap.values, opacities(smap.values)):
        title = f"{v:.6g}"
        if a == 0:
            spans.append(f'<span title="{title}">{html.escape(tok)}</span>')
            continue
        rgb = "220,40,40" if v > 0 else "40,80,220"
        spans.append(f'<span title="{title}" style="background-color: rgba({rgb},{a:.4f})">'
                     f"{html.escape(tok)}</span>")
    name = html.escape(DISEASES[smap.target_class])
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{html.escape(smap.note_id)} {name}</title>\n"
        "<style>body{font-family:sans-serif;line-height:2}span{padding:2px 3px;margin:1px;border-radius:3px}"
        ".legend span{display:inline-block}</style></head>\n<body>\n"
        f"<h3>{html.escape(smap.note_id)}: {name} ({smap.reduction})</h3>\n"
        '<p class="legend"><span style="background-color: rgba(220,40,40,1)">raises</span> '
        '<span style="background-color: rgba(40,80,220,1)">lowers</span></p>\n'
        f"<p>{' '.join(spans)}</p>\n</body></html>\n"
    )


def render(smap: SaliencyMap, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``{note_id}.{class}.saliency.tsv`` and ``.html`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        stem = output_stem(smap)
        tsv, page = out / f"{stem}.tsv", out / f"{stem}.html"
        tsv.write_text(to_tsv(smap), "utf-8")
        page.write_text(to_html(smap), "utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write saliency output under {out}: {exc.strerror}") from exc
    return tsv, page


def trigger_rank(smap: SaliencyMap, token: str) -> float:
    """Best 1-based rank of ``token`` by |value|; inf when absent."""
    order = smap.ranking()
    ranks = [r + 1 for r, i in enumerate(order) if smap.tokens[i] == token]
    return min(ranks) if ranks else math.inf

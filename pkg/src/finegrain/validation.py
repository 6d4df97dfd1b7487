"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import ContractError
from .structuralizer import DISEASES, RawNote, as_raw_notes


def check_notes(X, require_labels: bool = False) -> list[RawNote]:
    if X is None:
        raise ContractError("expected a sequence of notes, got None")
    if isinstance(X, (str, bytes)):
        raise ContractError("expected a sequence of notes, got a single string")
    notes = as_raw_notes(X)
    if not notes:
        raise ContractError("expected at least one note")
    if require_labels:
        missing = [n.id for n in notes if n.labels is None]
        if missing:
            raise ContractError(f"{len(missing)} notes lack labels, e.g. {missing[:3]}")
    return notes


def check_label_matrix(y, n_rows: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != (n_rows, len(DISEASES)):
        raise ContractError(f"labels must have shape ({n_rows}, {len(DISEASES)}), got {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ContractError("labels must be 0/1")
    return arr.astype(np.int64)


def labels_for(notes: Sequence[RawNote], y=None) -> np.ndarray:
    """Explicit ``y`` if given, otherwise the labels carried by the notes."""
    if y is not None:
        return check_label_matrix(y, len(notes))
    missing = [n.id for n in notes if n.labels is None]
    if missing:
        raise ContractError(f"no y given and {len(missing)} notes lack labels, e.g. {missing[:3]}")
    return np.array([n.labels for n in notes], dtype=np.int64)


def check_target_class(c) -> int:
    if isinstance(c, str) and c in DISEASES:
        return DISEASES.index(c)
    try:
        c = int(c)
    except (TypeError, ValueError):
        raise ContractError(f"target class must be an index in [0, 4) or one of {DISEASES}, got {c!r}") from None
    if not 0 <= c < len(DISEASES):
        raise ContractError(f"target class must lie in [0, {len(DISEASES)}), got {c}")
    return c

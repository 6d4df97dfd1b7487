"""
scikit-learn style classifier wrapping structuralization, tokenization and
the two-stream network.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor_core as tc
from .embedding import Vocabulary, build_vocab, encode_batch, train_word2vec
from .exceptions import ArtifactMismatchError
from .metrics import mean_average_precision
from .model import FineGrainNet, ModelConfig
from .params import read_checkpoint, save_checkpoint
from .structuralizer import DISEASES, FieldSchema, RuleTable, Structuralizer
from .training import EncodedSet, History, TrainConfig, predict_logits, train
from .validation import check_notes, labels_for

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
_FILES = {
    "checkpoint": "model.fgck",
    "vocab": "vocab.txt",
    "schema": "schema.json",
    "candidate_schema": "candidate_schema.json",
    "rules": "rules.json",
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class FineGrainClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label classifier over raw clinical notes.

    ``fit`` structuralizes the notes, prunes sparse fields, builds a
    vocabulary from the residual text, standardizes the structured values and
    trains the network. Inputs are sequences of :class:`RawNote`, dicts in the
    corpus format, or plain strings.

    Parameters
    ----------
    channels, length, n_blocks, reduction, dropout, hidden
        Network shape; see :class:`ModelConfig`.
    infusion, fusion : bool
        Enable the cross-stream infusion blocks and the attentive fusion.
        Both off gives the plain two-stream baseline.
    modality : {"both", "text", "struct"}
    tokenizer : {"word", "char"}
    min_count : int
        Vocabulary frequency cut-off.
    batch_size, max_epochs, lr, patience, target_map
        Training loop settings; see :class:`TrainConfig`.
    word2vec_epochs : int
        When positive, initialize the embedding table with skip-gram vectors.
    scale_structured : bool
        Standardize each field with the mean and deviation of its present
        training values; absent fields stay 0.
    threshold : float
        Decision threshold on probabilities (strict).
    density_threshold : float
        Field pruning threshold (strict).
    rules, schema
        Rule table and candidate schema, as objects or paths; None uses the
        packaged defaults.
    random_state : int
    """

    def __init__(self, channels=64, length=256, n_blocks=4, reduction=4, dropout=0.5, hidden=None,
                 infusion=True, fusion=True, modality="both", tokenizer="char", min_count=1,
                 batch_size=32, max_epochs=50, lr=1e-3, patience=None, target_map=None,
                 word2vec_epochs=0, scale_structured=True, threshold=0.5, density_threshold=0.075,
                 rules=None, schema=None, random_state=0):
        self.channels = channels
        self.length = length
        self.n_blocks = n_blocks
        self.reduction = reduction
        self.dropout = dropout
        self.hidden = hidden
        self.infusion = infusion
        self.fusion = fusion
        self.modality = modality
        self.tokenizer = tokenizer
        self.min_count = min_count
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr = lr
        self.patience = patience
        self.target_map = target_map
        self.word2vec_epochs = word2vec_epochs
        self.scale_structured = scale_structured
        self.threshold = threshold
        self.density_threshold = density_threshold
        self.rules = rules
        self.schema = schema
        self.random_state = random_state

    # -- encoding ------------------------------------------------------------

    def _fit_scaler(self, records) -> None:
        values = np.array([r.values for r in records])
        present = np.array([r.present for r in records])
        width = values.shape[1]
        self.mean_ = np.zeros(width)
        self.scale_ = np.ones(width)
        if not self.scale_structured:
            return
        for j in range(width):
            v = values[present[:, j], j]
            if v.size:
                self.mean_[j] = v.mean()
                sd = v.std()
                self.scale_[j] = sd if sd > 0 else 1.0

    def _structured(self, records) -> np.ndarray:
        values = np.array([r.values for r in records], dtype=np.float64)
        present = np.array([r.present for r in records], dtype=bool)
        return np.where(present, (values - self.mean_) / self.scale_, 0.0)

    def encode(self, X, y=None, with_labels: bool = False) -> EncodedSet:
        """Structuralize, tokenize and scale notes into model-ready arrays."""
        check_is_fitted(self, "net_")
        notes = check_notes(X)
        records = self.structuralizer_.transform(notes)
        ids, lengths = encode_batch([r.residual_text for r in records], self.vocab_, self.length, self.tokenizer)
        labels = labels_for(notes, y) if (with_labels or y is not None) else None
        return EncodedSet(ids, lengths, self._structured(records), labels)

    def residual_texts(self, X) -> list[str]:
        check_is_fitted(self, "net_")
        return [r.residual_text for r in self.structuralizer_.transform(check_notes(X))]

    # -- fitting -------------------------------------------------------------

    def _build(self, n_fields: int, vocab_size: int) -> FineGrainNet:
        self.config_ = ModelConfig(
            channels=self.channels, length=self.length, n_fields=n_fields, vocab_size=vocab_size,
            reduction=self.reduction, n_blocks=self.n_blocks, dropout=self.dropout, hidden=self.hidden,
            infusion=self.infusion, fusion=self.fusion, modality=self.modality)
        return FineGrainNet(self.config_, seed=self.random_state)

    def fit(self, X, y=None, X_val=None, y_val=None):
        notes = check_notes(X)
        labels = labels_for(notes, y)
        rules = self.rules if isinstance(self.rules, RuleTable) else RuleTable.load(self.rules)
        schema = self.schema if isinstance(self.schema, FieldSchema) else FieldSchema.load(self.schema)
        self.structuralizer_ = Structuralizer(rules, schema, self.density_threshold).fit(notes)
        records = self.structuralizer_.transform(notes)
        texts = [r.residual_text for r in records]
        self.vocab_ = build_vocab(texts, self.min_count, self.tokenizer)
        self._fit_scaler(records)
        self.net_ = self._build(self.structuralizer_.n_features_out_, len(self.vocab_))
        if self.word2vec_epochs > 0 and self.config_.uses_text:
            table = train_word2vec(texts, self.vocab_, self.channels, epochs=self.word2vec_epochs,
                                   seed=self.random_state, mode=self.tokenizer)
            self.net_.table.data[...] = table.matrix
        self.classes_ = np.array(DISEASES)
        ids, lengths = encode_batch(texts, self.vocab_, self.length, self.tokenizer)
        train_set = EncodedSet(ids, lengths, self._structured(records), labels)
        val_set = None
        if X_val is not None:
            val_set = self.encode(X_val, y_val, with_labels=True)
        cfg = TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs, lr=self.lr,
                          patience=self.patience, target_map=self.target_map, seed=self.random_state)
        self.history_ = train(self.net_, train_set, val_set, cfg)
        return self

    # -- inference -----------------------------------------------------------

    def decision_function(self, X) -> np.ndarray:
        """Logits, shape (N, 4)."""
        check_is_fitted(self, "net_")
        return predict_logits(self.net_, self.encode(X))

    def predict_proba(self, X) -> np.ndarray:
        return tc.sigmoid(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        """Multi-label decisions: 1 where the probability is strictly above ``threshold``."""
        return (self.predict_proba(X) > self.threshold).astype(np.int64)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Mean average precision over classes with at least one positive."""
        notes = check_notes(X)
        return mean_average_precision(self.predict_proba(notes), labels_for(notes, y))

    # -- persistence ---------------------------------------------------------

    def _public_params(self) -> dict:
        params = self.get_params()
        params["rules"] = params["schema"] = None
        return params

    def save(self, directory: str | Path) -> None:
        """Write the checkpoint, vocabulary, schemas, rules and a manifest that pins them."""
        check_is_fitted(self, "net_")
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        st = self.structuralizer_
        self.vocab_.save(out / _FILES["vocab"])
        st.schema_.save(out / _FILES["schema"])
        st.candidate_schema_.save(out / _FILES["candidate_schema"])
        (out / _FILES["rules"]).write_text(
            json.dumps(st.rules_.to_dict(), indent=2, ensure_ascii=False) + "\n", "utf-8")
        save_checkpoint(out / _FILES["checkpoint"], self.net_.store, self.config_.to_dict())
        manifest = {
            "format_version": MANIFEST_VERSION,
            "model_config": self.config_.to_dict(),
            "estimator_params": self._public_params(),
            "scaler": {"mean": self.mean_.tolist(), "scale": self.scale_.tolist()},
            "history": {k: v for k, v in self.history_.to_dict().items() if k != "seconds"},
            "schema_sha256": st.schema_.digest(),
            "vocab_sha256": self.vocab_.digest(),
            "sha256": {key: _sha256(out / name) for key, name in sorted(_FILES.items())},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "FineGrainClassifier":
        """Restore a saved classifier, refusing files that do not match the manifest."""
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text("utf-8"))
        except FileNotFoundError as exc:
            raise ArtifactMismatchError(f"{d}: no manifest.json") from exc
        if manifest.get("format_version") != MANIFEST_VERSION:
            raise ArtifactMismatchError(f"{d}: unsupported manifest version {manifest.get('format_version')}")
        for key, name in _FILES.items():
            path = d / name
            if not path.exists():
                raise ArtifactMismatchError(f"{d}: missing {name}")
            if _sha256(path) != manifest["sha256"][key]:
                raise ArtifactMismatchError(f"{path}: contents do not match the manifest")
        vocab = Vocabulary.load(d / _FILES["vocab"])
        schema = FieldSchema.load(d / _FILES["schema"])
        if vocab.digest() != manifest["vocab_sha256"] or schema.digest() != manifest["schema_sha256"]:
            raise ArtifactMismatchError(f"{d}: vocabulary or schema hash mismatch")
        header, state = read_checkpoint(d / _FILES["checkpoint"])
        if header["config"] != manifest["model_config"]:
            raise ArtifactMismatchError(f"{d}: checkpoint config differs from the manifest")

        est = cls(**manifest["estimator_params"])
        candidate = FieldSchema.load(d / _FILES["candidate_schema"])
        rules = RuleTable.from_dict(json.loads((d / _FILES["rules"]).read_text("utf-8")))
        st = Structuralizer(rules, candidate, est.density_threshold)
        st.rules_, st.candidate_schema_, st.schema_ = rules, candidate, schema
        st.retained_index_ = np.array([candidate.index(n) for n in schema.names], dtype=int)
        st.n_features_out_ = len(schema)
        est.structuralizer_ = st
        est.vocab_ = vocab
        if len(vocab) != manifest["model_config"]["vocab_size"] or len(schema) != manifest["model_config"]["n_fields"]:
            raise ArtifactMismatchError(f"{d}: vocabulary or schema size disagrees with the model config")
        est.mean_ = np.asarray(manifest["scaler"]["mean"])
        est.scale_ = np.asarray(manifest["scaler"]["scale"])
        est.net_ = FineGrainNet(ModelConfig(**manifest["model_config"]), seed=0)
        est.config_ = est.net_.config
        est.net_.store.load_state(state)
        est.classes_ = np.array(DISEASES)
        est.history_ = History(**manifest["history"])
        return est

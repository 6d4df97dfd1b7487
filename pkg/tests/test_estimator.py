import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import TINY
from finegrain import tensor_core as tc
from finegrain.estimator import FineGrainClassifier
from finegrain.exceptions import ArtifactMismatchError, ConfigurationError, ContractError
from finegrain.structuralizer import RawNote


def test_params_and_clone():
    est = FineGrainClassifier(channels=16, lr=0.01)
    params = est.get_params()
    assert params["channels"] == 16 and params["lr"] == 0.01
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(n_blocks=2)
    assert est.n_blocks == 2


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        FineGrainClassifier().predict(["Temp 38 ℃"])


def test_fitted_attributes(tiny_model):
    m = tiny_model
    assert list(m.classes_) == ["pneumonia", "rti", "bronchitis", "asthma"]
    assert m.config_.n_fields == m.structuralizer_.n_features_out_
    assert m.config_.vocab_size == len(m.vocab_)
    assert len(m.history_.val_map) == 3
    assert m.history_.best_val_map == max(m.history_.val_map)


def test_prediction_shapes_and_consistency(tiny_model, tiny_corpus):
    X = tiny_corpus.splits["test"]
    z = tiny_model.decision_function(X)
    p = tiny_model.predict_proba(X)
    assert z.shape == p.shape == (40, 4)
    assert np.allclose(p, tc.sigmoid(z))
    assert np.array_equal(tiny_model.predict(X), (p > 0.5).astype(int))
    assert 0.0 <= tiny_model.score(X) <= 1.0


def test_threshold_is_strict(tiny_model, tiny_corpus):
    X = tiny_corpus.splits["test"][:5]
    p = tiny_model.predict_proba(X)
    est = clone(tiny_model)
    est.__dict__.update({k: v for k, v in tiny_model.__dict__.items() if k.endswith("_")})
    est.threshold = float(p[0, 0])
    assert est.predict(X)[0, 0] == 0


def test_accepts_dicts_and_strings(tiny_model, tiny_corpus):
    notes = tiny_corpus.splits["test"][:4]
    from_dicts = tiny_model.predict_proba([n.to_dict() for n in notes])
    assert np.array_equal(from_dicts, tiny_model.predict_proba(notes))
    assert tiny_model.predict_proba(["zorvath cough, CRP 40 mg/L"]).shape == (1, 4)


def test_bad_inputs(tiny_model):
    with pytest.raises(ContractError):
        tiny_model.predict(None)
    with pytest.raises(ContractError):
        tiny_model.predict("a single string")
    with pytest.raises(ContractError):
        tiny_model.predict([])
    with pytest.raises(ContractError):
        FineGrainClassifier().fit([RawNote("a", "text")])
    with pytest.raises(ContractError):
        FineGrainClassifier().fit([RawNote("a", "text")], y=[[1, 0, 0]])


def test_bad_hyperparameters(tiny_corpus):
    with pytest.raises(ConfigurationError):
        FineGrainClassifier(channels=10, reduction=4).fit(tiny_corpus.splits["train"])
    with pytest.raises(ConfigurationError):
        FineGrainClassifier(length=8).fit(tiny_corpus.splits["train"])


def test_explicit_y_overrides_note_labels(tiny_corpus):
    X = tiny_corpus.splits["train"][:40]
    y = np.zeros((40, 4), dtype=int)
    y[:, 2] = 1
    y[::2, 2] = 0
    est = FineGrainClassifier(**{**TINY, "max_epochs": 1}).fit(X, y)
    assert est.history_.best_epoch == 0


def test_refit_is_deterministic(tiny_corpus):
    X, V = tiny_corpus.splits["train"], tiny_corpus.splits["val"]
    a = FineGrainClassifier(**{**TINY, "max_epochs": 2}, random_state=5).fit(X, X_val=V)
    b = FineGrainClassifier(**{**TINY, "max_epochs": 2}, random_state=5).fit(X, X_val=V)
    assert np.array_equal(a.decision_function(V), b.decision_function(V))


@pytest.mark.parametrize("variant", [{"modality": "text"}, {"modality": "struct"},
                                     {"infusion": False, "fusion": False}])
def test_variants_fit(tiny_corpus, variant):
    est = FineGrainClassifier(**{**TINY, "max_epochs": 1}, **variant).fit(tiny_corpus.splits["train"])
    assert est.predict_proba(tiny_corpus.splits["val"]).shape == (40, 4)


def test_scaling_uses_present_values_only(tiny_model, tiny_corpus):
    enc = tiny_model.encode(tiny_corpus.splits["train"])
    records = tiny_model.structuralizer_.transform(tiny_corpus.splits["train"])
    present = np.array([r.present for r in records])
    assert np.all(enc.values[~present] == 0.0)
    for j in range(present.shape[1]):
        col = enc.values[present[:, j], j]
        if col.size > 1 and col.std() > 0:
            assert abs(col.mean()) < 1e-9 and abs(col.std() - 1) < 1e-9


def test_save_load_round_trip(tiny_model, tiny_corpus, tmp_path):
    X = tiny_corpus.splits["test"]
    tiny_model.save(tmp_path / "m")
    loaded = FineGrainClassifier.load(tmp_path / "m")
    assert loaded.get_params() == {**tiny_model.get_params(), "rules": None, "schema": None}
    # checkpoint stores float32
    assert np.allclose(loaded.decision_function(X), tiny_model.decision_function(X), atol=1e-4)
    loaded.save(tmp_path / "m2")
    again = FineGrainClassifier.load(tmp_path / "m2")
    assert np.array_equal(again.decision_function(X), loaded.decision_function(X))
    for name in ("model.fgck", "vocab.txt", "schema.json", "manifest.json"):
        assert (tmp_path / "m" / name).read_bytes() == (tmp_path / "m2" / name).read_bytes()


def test_save_is_byte_stable(tiny_model, tmp_path):
    tiny_model.save(tmp_path / "a")
    tiny_model.save(tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


@pytest.mark.parametrize("victim", ["model.fgck", "vocab.txt", "schema.json", "rules.json"])
def test_tampered_artifacts_refused(tiny_model, tmp_path, victim):
    tiny_model.save(tmp_path)
    path = tmp_path / victim
    path.write_bytes(path.read_bytes() + b"\n")
    with pytest.raises(ArtifactMismatchError):
        FineGrainClassifier.load(tmp_path)


def test_missing_artifacts_refused(tiny_model, tmp_path):
    with pytest.raises(ArtifactMismatchError):
        FineGrainClassifier.load(tmp_path)
    tiny_model.save(tmp_path)
    (tmp_path / "vocab.txt").unlink()
    with pytest.raises(ArtifactMismatchError):
        FineGrainClassifier.load(tmp_path)


def test_mismatched_config_refused(tiny_model, tmp_path):
    tiny_model.save(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["model_config"]["channels"] = 16
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ArtifactMismatchError):
        FineGrainClassifier.load(tmp_path)

import copy

import numpy as np
import pytest

from finegrain import tensor_core as tc
from finegrain.exceptions import ContractError
from finegrain.interpret import (
    SaliencyMap,
    opacities,
    parse_tsv,
    read_tsv,
    render,
    saliency,
    to_html,
    to_tsv,
    token_saliency,
    trigger_rank,
)
from finegrain.tensor_core import Tape, Tensor


@pytest.fixture()
def model(tiny_model):
    return copy.deepcopy(tiny_model)


@pytest.fixture()
def note(tiny_corpus):
    return tiny_corpus.splits["test"][0]


def test_one_value_per_real_token(model, note):
    smap = saliency(note, model, 0)
    residual = model.residual_texts([note])[0].split()[:model.length]
    assert smap.tokens == residual
    assert smap.values.shape == (len(residual),)
    assert smap.note_id == note.id and smap.target_class == 0
    assert np.all(np.isfinite(smap.values))


def test_matches_finite_differences(model, note):
    enc = model.encode([note])
    net = model.net_
    ids, n = enc.ids, int(enc.lengths[0])
    base = np.swapaxes(net.table.data[ids], -1, -2)

    def logit(T):
        out, _ = net.forward(ids, enc.lengths, enc.values, embedded=Tensor(T))
        return out.data[0, 2]

    eps = 1e-6
    numeric = np.zeros(base.shape[1:])
    for c in range(base.shape[1]):
        for j in range(n):
            up, down = base.copy(), base.copy()
            up[0, c, j] += eps
            down[0, c, j] -= eps
            numeric[c, j] = (logit(up) - logit(down)) / (2 * eps)
    vals = token_saliency(net, ids[0], n, enc.values[0], 2)
    assert np.allclose(vals, numeric[:, :n].sum(axis=0), atol=1e-6)


def test_zero_head_gives_zero_saliency(model, note):
    model.net_.fc2.weight.data[...] = 0.0
    smap = saliency(note, model, 1)
    assert np.all(smap.values == 0.0)


def test_head_rescaling_scales_saliency(model, note):
    before = saliency(note, model, 3).values
    model.net_.fc2.weight.data *= 2.5
    model.net_.fc2.bias.data *= 2.5
    after = saliency(note, model, 3).values
    assert np.allclose(after, 2.5 * before, rtol=1e-12, atol=1e-15)


def test_invariant_to_batch_composition(model, tiny_corpus):
    notes = tiny_corpus.splits["test"][:3]
    enc = model.encode(notes)
    net = model.net_
    T = Tensor(np.swapaxes(net.table.data[enc.ids], -1, -2), requires_grad=True)
    with Tape() as tape:
        logits, _ = net.forward(enc.ids, enc.lengths, enc.values, embedded=T)
        out = tc.sum_all(tc.take(logits, (1, 0)))
    tape.backward(out)
    n = int(enc.lengths[1])
    batched = T.grad[1].sum(axis=0)[:n]
    alone = saliency(notes[1], model, 0).values
    assert np.allclose(batched, alone, atol=1e-12)
    assert np.all(T.grad[0] == 0) and np.all(T.grad[2] == 0)


def test_pad_columns_do_not_matter(model, note):
    enc = model.encode([note])
    n = int(enc.lengths[0])
    assert n + 2 <= model.length
    ids = enc.ids[0].copy()
    a = token_saliency(model.net_, ids, n, enc.values[0], 0)
    ids[[n, model.length - 1]] = ids[[model.length - 1, n]]
    b = token_saliency(model.net_, ids, n, enc.values[0], 0)
    assert np.array_equal(a, b)


def test_class_names_and_errors(model, note):
    assert saliency(note, model, "rti") == saliency(note, model, 1)
    for bad in (4, -1, "flu", None):
        with pytest.raises(ContractError):
            saliency(note, model, bad)
    with pytest.raises(ContractError):
        saliency(note, model, 0, reduction="mean")


def test_l2_reduction_is_non_negative(model, note):
    signed = saliency(note, model, 0)
    l2 = saliency(note, model, 0, reduction="l2")
    assert np.all(l2.values >= 0)
    assert np.all(l2.values + 1e-12 >= np.abs(signed.values) / np.sqrt(model.channels))


def test_map_contract():
    with pytest.raises(ContractError):
        SaliencyMap(["a", "b"], [1.0], 0)
    with pytest.raises(ContractError):
        SaliencyMap(["a"], [np.nan], 0)
    with pytest.raises(ContractError):
        SaliencyMap(["a"], [1.0], 4)


def test_ranking_and_trigger_rank():
    smap = SaliencyMap(["a", "b", "c", "b"], [0.1, -0.5, 0.5, 0.2], 0)
    assert list(smap.ranking()) == [1, 2, 3, 0]
    assert trigger_rank(smap, "b") == 1
    assert trigger_rank(smap, "a") == 4
    assert trigger_rank(smap, "z") == float("inf")
    assert smap.top(2) == [("b", -0.5), ("c", 0.5)]


def test_tsv_round_trip_is_exact():
    smap = SaliencyMap(["tab\there", "back\\slash", "new\nline", "", "℃"],
                       [0.1, -1e-300, 1 / 3, 0.0, -2.5e7], 2, "n\t01", "l2")
    assert parse_tsv(to_tsv(smap)) == smap


def test_tsv_parse_errors():
    with pytest.raises(ContractError):
        parse_tsv("token\tvalue\na\t1.0\n")
    with pytest.raises(ContractError):
        parse_tsv("# target_class\t0\nwrong header\n")
    with pytest.raises(ContractError):
        parse_tsv("# target_class\t0\ntoken\tvalue\nnovalue\n")


def test_render_files(tmp_path, model, note):
    smap = saliency(note, model, "bronchitis")
    tsv, page = render(smap, tmp_path / "out")
    assert tsv.name == f"{note.id}.bronchitis.saliency.tsv"
    assert page.name == f"{note.id}.bronchitis.saliency.html"
    assert read_tsv(tsv) == smap
    assert page.read_text("utf-8").startswith("<!DOCTYPE html>")


def test_html_opacity_and_colors():
    smap = SaliencyMap(["up", "down", "flat"], [0.5, -2.0, 0.0], 0, "x")
    assert list(opacities(smap.values)) == [0.25, 1.0, 0.0]
    body = to_html(smap).split("<p>")[-1]
    assert 'rgba(40,80,220,1.0000)">down' in body
    assert 'rgba(220,40,40,0.2500)">up' in body
    assert '<span title="0">flat</span>' in body


def test_html_all_zero_is_uncolored():
    body = to_html(SaliencyMap(["a", "<b>"], [0.0, 0.0], 0, "x")).split("<p>")[-1]
    assert "rgba" not in body and "&lt;b&gt;" in body


def test_render_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        render(SaliencyMap(["a"], [1.0], 0, "n"), blocker / "sub")

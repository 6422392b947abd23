import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reamil import metrics as mt
from reamil.backbone import BackboneConfig, normalize_coords
from reamil.data import BagRecord
from reamil.metrics import KCurve
from reamil.model import ReaMIL, softmax_np


def curve(p, k=None, n=None):
    p = np.asarray(p, dtype=np.float64)
    k = np.arange(1, len(p) + 1) if k is None else np.asarray(k)
    return KCurve("s", k, p, int(k[-1]) if n is None else n)


@pytest.fixture(scope="module")
def model():
    m = ReaMIL.create(BackboneConfig(d_in=8, d_model=16, heads=2), seed=5, with_head=True)
    m.temperature = 0.5
    return m


def _bag(n, seed=0, label=1):
    r = np.random.default_rng(seed)
    return BagRecord(f"b{seed}", r.normal(size=(n, 8)), r.uniform(0, 1000, (n, 2)), label, "p")


# ---------------------------------------------------------------- grid / curves


def test_default_grid_shape():
    g = mt.default_grid(64)
    assert list(g[:32]) == list(range(1, 33)) and g[-1] == 64 and np.all(np.diff(g) > 0)
    assert list(mt.default_grid(5)) == [1, 2, 3, 4, 5]
    assert list(mt.default_grid(1)) == [1]


def test_grid_entries_above_n_dropped(model):
    c = mt.kcurve(_bag(6), model, grid=[2, 4, 9])
    assert list(c.k) == [2, 4, 6]


def test_k_equals_n_is_full_bag_probability(model):
    for seed in range(5):
        bag = _bag(10 + seed, seed)
        c = mt.kcurve(bag, model)
        p_full = softmax_np(model.full_logits(bag.features, bag.coords).data)[bag.label]
        assert abs(c.p[-1] - p_full) <= 1e-6


def test_single_tile_curve_has_one_point(model):
    c = mt.kcurve(_bag(1), model)
    assert list(c.k) == [1] and len(c.p) == 1


def test_curve_points_match_independent_masked_passes(model):
    bag = _bag(12, 3)
    c = mt.kcurve(bag, model)
    a = model.selection(bag.features, bag.coords, mode="eval").logits.data
    top = np.argsort(-a, kind="stable")
    for k, p in zip(c.k, c.p):
        mask = np.zeros(bag.n_tiles, np.float32)
        mask[top[:k]] = 1.0
        ref = softmax_np(model.masked_logits(bag.features, bag.coords, mask).data)[bag.label]
        assert abs(p - ref) <= 1e-6


def test_evaluation_chunks_agree(model, monkeypatch):
    bag = _bag(40, 4)
    a = mt.kcurve(bag, model).p
    monkeypatch.setattr(mt, "EVAL_CHUNK", 7)
    np.testing.assert_allclose(mt.kcurve(bag, model).p, a, atol=1e-6)


# ---------------------------------------------------------------- msk / aukc


def test_msk_examples():
    assert mt.msk(curve([0.95, 0.97]), 0.9) == 1
    assert mt.msk(curve([0.2, 0.5, 0.95, 0.97]), 0.9) == 3
    assert mt.msk(curve([0.1, 0.85, 0.3]), 0.9) is None


def test_aukc_examples():
    assert mt.aukc(curve(np.ones(7))) == 1.0
    k = np.arange(1, 1001)
    assert abs(mt.aukc(KCurve("s", k, k / 1000, 1000)) - 0.5) <= 1e-3
    assert mt.aukc(KCurve("s", np.array([1, 2]), np.array([0.5, 1.0]), 2)) == 0.625


probs = st.lists(st.floats(0, 1), min_size=1, max_size=20)


@given(probs)
def test_metrics_pure_and_bounded(p):
    c = curve(p)
    assert 0.0 <= mt.aukc(c) <= 1.0
    assert mt.aukc(c) == mt.aukc(curve(p)) and mt.msk(c, 0.9) == mt.msk(curve(p), 0.9)


@given(probs, st.data())
def test_raising_a_point_never_lowers_aukc(p, data):
    c = curve(p)
    i = data.draw(st.integers(0, len(p) - 1))
    up = c.p.copy()
    up[i] = data.draw(st.floats(up[i], 1))
    assert mt.aukc(KCurve("s", c.k, up, c.n_tiles)) >= mt.aukc(c)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.data())
def test_inserting_a_point_above_the_chord_never_lowers_aukc(p, data):
    k = np.arange(1, len(p) + 1) * 2
    c = KCurve("s", k, np.asarray(p), int(k[-1]))
    j = data.draw(st.integers(0, len(p) - 2))
    chord = 0.5 * (p[j] + p[j + 1])
    new_p = data.draw(st.floats(chord, 1))
    k2 = np.insert(k, j + 1, k[j] + 1)
    p2 = np.insert(np.asarray(p), j + 1, new_p)
    assert mt.aukc(KCurve("s", k2, p2, c.n_tiles)) >= mt.aukc(c) - 1e-12


# ---------------------------------------------------------------- diagnostics


def _forced(model, bias):
    m = model.copy()
    for k in ("head.l1.W", "head.l1.b", "head.l2.W"):
        m.params[k].data[:] = 0
    m.params["head.l2.b"].data[:] = bias
    return m


def test_all_ones_gate_diagnostics(model):
    d = mt.diagnostics(_bag(9), _forced(model, 200.0))
    assert d.suff_gap == 0.0 and d.mean_z == 1.0


def test_all_zero_gate_diagnostics(model):
    bag = _bag(9)
    m = _forced(model, -200.0)
    d = mt.diagnostics(bag, m)
    zero_bag = softmax_np(m.masked_logits(bag.features, bag.coords, np.zeros(9, np.float32)).data)[bag.label]
    assert abs(d.suff_gap - (d.p_full - zero_bag)) <= 1e-6
    assert d.contig == 0.0 and d.contig_degenerate and d.mean_z == 0.0


def test_contiguity_function():
    v, deg = mt.contiguity(np.array([1.0, 1.0]), np.array([[0.0, 0], [2, 0]]))
    assert (v, deg) == (1.0, False)
    assert mt.contiguity(np.zeros(3), np.zeros((3, 2))) == (0.0, True)


def test_diagnostics_match_exported_selection(model, tmp_path):
    bag = _bag(15, 7)
    d = mt.diagnostics(bag, model)
    mt.write_selection(d, bag.coords, tmp_path / "s.selection.tsv")
    sel = mt.read_selection(tmp_path / "s.selection.tsv")
    assert np.all(np.diff(sel["logit"]) <= 0)
    assert sorted(sel["index"]) == list(range(15))
    z = np.empty(15)
    z[sel["index"]] = sel["gate"]
    assert abs(z.mean() - d.mean_z) <= 1e-6
    coords = np.empty((15, 2))
    coords[sel["index"]] = sel["coords"]
    assert abs(mt.contiguity(z, normalize_coords(coords))[0] - d.contig) <= 1e-4


def test_selector_precision():
    logits = np.array([0.1, 3.0, 2.0, -1.0, 2.5])
    assert mt.selector_precision(logits, np.array([1, 4])) == 1.0
    assert mt.selector_precision(logits, np.array([1, 3])) == 0.5
    assert mt.selector_precision(logits, np.array([0, 3]), k=3) == 0.0


def test_report_summary_counts_reaching_slides():
    rows = [mt.SlideEvidence("a", 2, 0.9, 0.0, 0.1, 0.0, 0.1), mt.SlideEvidence("b", None, 0.5, 0.1, 0.6, 0.0, 0.2)]
    s = mt.EvidenceReport(rows, 0.9).summary()
    assert s["msk_mean"] == 2 and s["sufficient_rate"] == 0.5 and abs(s["p_drop_mean"] - 0.35) < 1e-12


def test_mean_curve_uses_last_point_for_short_bags():
    a = KCurve("a", np.array([1, 2]), np.array([0.2, 0.4]), 2)
    b = KCurve("b", np.array([1, 2, 3]), np.array([0.0, 0.6, 1.0]), 3)
    grid, mean, std = mt.mean_curve([a, b])
    np.testing.assert_array_equal(grid, [1, 2, 3])
    np.testing.assert_allclose(mean, [0.1, 0.5, 0.7])


# ---------------------------------------------------------------- classification


def pairwise_auc(scores, pos):
    pp, nn = scores[pos], scores[~pos]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pp, nn))
    return wins / (len(pp) * len(nn))


def test_auc_examples():
    assert mt.auc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    r = np.random.default_rng(0)
    labels = np.arange(1000) % 2 == 0
    assert abs(mt.auc_binary(r.uniform(size=1000), labels) - 0.5) <= 0.05
    with pytest.raises(ValueError):
        mt.auc_binary([0.1, 0.2], [1, 1])


@given(st.integers(0, 10_000), st.integers(2, 40))
def test_auc_equals_pairwise_definition(seed, n):
    r = np.random.default_rng(seed)
    scores = r.integers(0, 6, size=n).astype(np.float64)  # many ties
    pos = r.uniform(size=n) < 0.5
    if pos.all() or (~pos).all():
        return
    assert mt.auc_binary(scores, pos) == pairwise_auc(scores, pos)


def test_classification_metrics():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    m = mt.classification_metrics(probs, [0, 1, 1, 1])
    assert m["auc"] == 1.0 and m["accuracy"] == 0.75
    assert abs(m["macro_f1"] - 0.5 * (2 / 3 + 0.8)) < 1e-12
    with pytest.raises(ValueError):
        mt.classification_metrics(probs, [1, 1, 1, 1])
    three = np.eye(3)[[0, 1, 2, 0]] * 0.8 + 0.2 / 3
    assert mt.classification_metrics(three, [0, 1, 2, 0])["auc"] == 1.0


def test_csv_writers(tmp_path):
    rows = [mt.SlideEvidence("a", 2, 0.9, 0.0, 0.1, 0.0, 0.1), mt.SlideEvidence("b", None, 0.5, 0.1, 0.6, 0.0, 0.2)]
    rep = mt.EvidenceReport(rows, 0.9)
    mt.write_slide_csv(rep, tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "slide_id,msk,aukc,suff_gap,p_drop,contig,mean_z"
    assert lines[2].startswith("b,,")
    mt.write_kcurve_csv(curve([0.5, 1.0]), tmp_path / "k.csv")
    assert (tmp_path / "k.csv").read_text().splitlines()[-1] == "2,1.000000,1.000000"

import hashlib
import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reamil.data import (BAG_MAGIC, BagFormatError, BagRecord, DatasetManifest, SynthConfig, check_patient_disjoint,
                         decode_bag, encode_bag, gen_synthetic, generate_bags, read_bag, read_evidence,
                         read_manifest, split_patients, write_bag, write_manifest)


def _bag(n, d, label=1, sid="s", pid="p", seed=0):
    r = np.random.default_rng(seed)
    return BagRecord(sid, r.normal(size=(n, d)), r.uniform(0, 1e4, size=(n, 2)), label, pid)


def _same(a: BagRecord, b: BagRecord):
    assert (a.slide_id, a.patient_id, a.label) == (b.slide_id, b.patient_id, b.label)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.coords, b.coords)


ident = st.text(st.characters(blacklist_categories=("Cs",)), max_size=12)


@given(st.integers(1, 20), st.integers(1, 9), st.integers(0, 5), ident, ident, st.integers(0, 99))
def test_bag_round_trip(n, d, label, sid, pid, seed):
    b = _bag(n, d, label, sid, pid, seed)
    _same(decode_bag(encode_bag(b)), b)


def test_one_tile_round_trip(tmp_path):
    b = _bag(1, 3)
    write_bag(b, tmp_path / "one.rmb")
    _same(read_bag(tmp_path / "one.rmb"), b)


def test_corrupted_magic_is_format_error():
    buf = bytearray(encode_bag(_bag(3, 2)))
    buf[0:4] = b"XXXX"
    with pytest.raises(BagFormatError) as exc:
        decode_bag(bytes(buf))
    assert exc.value.offset == 0


def test_truncation_and_dim_mismatch_report_offsets():
    buf = encode_bag(_bag(4, 3))
    assert buf[:4] == BAG_MAGIC
    for cut in (2, 10, len(buf) - 1):
        with pytest.raises(BagFormatError):
            decode_bag(buf[:cut])
    with pytest.raises(BagFormatError, match="dim"):
        decode_bag(buf, expected_dim=5)
    with pytest.raises(BagFormatError):
        decode_bag(buf + b"\0")


def test_record_validation():
    with pytest.raises(ValueError):
        BagRecord("s", np.zeros((0, 3)), np.zeros((0, 2)), 0, "p")
    with pytest.raises(ValueError):
        BagRecord("s", np.zeros((2, 3)), np.zeros((3, 2)), 0, "p")
    with pytest.raises(ValueError):
        BagRecord("s", np.full((1, 3), np.nan), np.zeros((1, 2)), 0, "p")


# ---------------------------------------------------------------- synthetic generator


def test_null_class_has_no_evidence():
    bags, _ = generate_bags(SynthConfig(n_train=30, n_val=5, n_test=5))
    for b in bags:
        assert (len(b.evidence) == 0) == (b.record.label == 0)


def test_evidence_signal_norm_within_three_stderr():
    cfg = SynthConfig(n_train=500, n_val=0, n_test=0, seed=3)
    bags, _ = generate_bags(cfg)
    pos = [b for b in bags if b.record.label == 1]
    ev = np.concatenate([b.record.features[b.evidence] for b in pos])
    bg = np.concatenate([np.delete(b.record.features, b.evidence, axis=0) for b in pos])
    ev = ev[:1000]
    assert len(ev) == 1000
    diff = ev.mean(axis=0) - bg.mean(axis=0)
    stderr = cfg.noise * np.sqrt(1 / len(ev) + 1 / len(bg))
    assert abs(np.linalg.norm(diff) - cfg.signal) <= 3 * stderr


def test_signal_exceeds_three_noise_scales():
    cfg = SynthConfig()
    assert cfg.signal > 3 * cfg.noise


def test_evidence_tiles_lie_in_a_disc():
    cfg = SynthConfig(n_train=80, n_val=10, n_test=10, seed=8)
    bags, _ = generate_bags(cfg)
    for b in bags:
        c = b.record.coords[b.evidence].astype(np.float64)
        if len(c) > 1:
            dmax = max(np.linalg.norm(p - q) for p, q in itertools.combinations(c, 2))
            assert dmax <= 2 * cfg.radius + 1e-3


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_gen_synthetic_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_train=20, n_val=6, n_test=6, tiles=8, feature_dim=4)
    gen_synthetic(cfg, tmp_path / "a")
    gen_synthetic(cfg, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    gen_synthetic(replace(cfg, seed=cfg.seed + 1), tmp_path / "c")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def test_manifest_round_trip_and_sidecars(tiny_data):
    root, manifest = tiny_data
    again = read_manifest(root / "manifest.tsv")
    assert again.entries == manifest.entries
    assert (again.num_classes, again.feature_dim) == (manifest.num_classes, manifest.feature_dim)
    counts = {s: len(again.split(s)) for s in ("train", "val", "test")}
    assert sum(counts.values()) == len(again.entries) and min(counts.values()) > 0
    e = again.split("test")[0]
    ev = read_evidence(again.evidence_path(e))
    assert (len(ev) == 0) == (e.label == 0)
    again.validate()


def test_manifest_write_read(tmp_path):
    from reamil.data import ManifestEntry
    m = DatasetManifest([ManifestEntry("a", "pa", 1, "train", "bags/a.rmb")], num_classes=2, feature_dim=3)
    write_manifest(m, tmp_path / "manifest.tsv")
    assert read_manifest(tmp_path / "manifest.tsv").entries == m.entries


# ---------------------------------------------------------------- splits


def test_ten_patients_split_8_1_1():
    recs = [(f"s{i}", f"p{i}", 0) for i in range(10)]
    split = split_patients(recs, (0.8, 0.1, 0.1), seed=0)
    counts = {k: list(split.values()).count(k) for k in ("train", "val", "test")}
    assert counts == {"train": 8, "val": 1, "test": 1}


@given(st.integers(0, 10_000), st.integers(6, 40), st.integers(1, 3))
def test_split_is_pure_and_patient_disjoint(seed, n_slides, per_patient):
    recs = [(f"s{i:03d}", f"p{i // per_patient:03d}", (i // per_patient) % 2) for i in range(n_slides)]
    n_pat_per_class = min(sum(1 for p in {r[1]: r[2] for r in recs}.values() if p == c) for c in (0, 1))
    if n_pat_per_class < 3:
        with pytest.raises(ValueError):
            split_patients(recs, seed=seed)
        return
    a = split_patients(recs, seed=seed)
    assert a == split_patients(list(reversed(recs)), seed=seed)
    patients = {s: p for s, p, _ in recs}
    check_patient_disjoint(a, patients)
    for (s1, p1, _), (s2, p2, _) in itertools.combinations(recs, 2):
        if p1 == p2:
            assert a[s1] == a[s2]


def test_class_with_too_few_patients_is_an_error():
    recs = [("a", "p1", 0), ("b", "p2", 0), ("c", "p3", 0), ("d", "p4", 1)]
    with pytest.raises(ValueError, match="class 1"):
        split_patients(recs)


def test_disjointness_check_catches_leak():
    with pytest.raises(ValueError):
        check_patient_disjoint({"a": "train", "b": "test"}, {"a": "p", "b": "p"})

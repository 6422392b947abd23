import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from reamil import checkpoint as ck
from reamil.backbone import BackboneConfig
from reamil.model import ReaMIL

names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=10)
tensors = st.dictionaries(names, arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4),
                                        elements=st.floats(-1e3, 1e3, width=32)), max_size=5)


@given(tensors)
def test_round_trip(t):
    back = ck.decode_tensors(ck.encode_tensors(t))
    assert list(back) == list(t)
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])
        assert back[k].shape == t[k].shape


def test_corruption_detected():
    buf = ck.encode_tensors({"a": np.ones((2, 3), np.float32)})
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.decode_tensors(b"XXXX" + buf[4:])
    with pytest.raises(ck.CheckpointError):
        ck.decode_tensors(buf[:-2])
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.decode_tensors(buf + b"\0\0\0\0")


def test_model_round_trip_preserves_config_and_phase(tmp_path, rng):
    cfg = BackboneConfig(d_in=8, d_model=16, heads=4, layers=2, num_classes=3, use_positional=False)
    m = ReaMIL.create(cfg, seed=2, with_head=True)
    m.temperature = 0.25
    ck.save_model(tmp_path / "m.ckpt", m, "evidence")
    back, phase = ck.load_model(tmp_path / "m.ckpt")
    assert back.config == cfg and phase == "evidence" and back.temperature == 0.25 and back.has_head
    X, c = rng.normal(size=(5, 8)), rng.uniform(size=(5, 2))
    np.testing.assert_array_equal(back.full_logits(X, c).data, m.full_logits(X, c).data)


def test_incompatible_backbone_lists_tensors():
    a = ReaMIL.create(BackboneConfig(d_in=8, d_model=16, heads=2, layers=2), seed=0)
    b = ReaMIL.create(BackboneConfig(d_in=8, d_model=16, heads=2, layers=1), seed=0)
    with pytest.raises(ck.CheckpointError, match="layer1"):
        ck.check_compatible(b, a)

import time

import numpy as np
import pytest

from reamil import autodiff as ad
from reamil import head as hd
from reamil.autodiff import Tensor
from reamil.backbone import BackboneConfig, attention, init_backbone
from reamil.gradcheck import NondeterminismError, gradcheck, toy_suite
from reamil.model import ReaMIL


def test_linear_layer_below_1e6(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    p = {"W": Tensor(rng.normal(size=(4, 3)), requires_grad=True),
         "b": Tensor(rng.normal(size=3), requires_grad=True)}
    target = Tensor(rng.normal(size=(5, 3)))
    rep = gradcheck(lambda: ad.sum_(ad.mul(ad.add(ad.matmul(x, p["W"]), p["b"]), target)), p, tolerance=1e-6)
    assert rep.passed and rep.max_rel_error < 1e-6


def test_single_transformer_layer_below_1e3(rng):
    cfg = BackboneConfig(d_in=16, d_model=16, heads=2, layers=1)
    params = init_backbone(cfg, rng, np.float64)
    layer = {k: v for k, v in params.items() if k.startswith("backbone.layer0.")}
    for k in layer:
        if ".ln" in k:
            layer[k].data = layer[k].data + rng.normal(0, 0.1, layer[k].shape)
    seq = Tensor(rng.normal(size=(7, 16)))
    probe = Tensor(rng.normal(size=(7, 16)))

    def closure():
        h = ad.layer_norm(seq, layer["backbone.layer0.ln1.g"], layer["backbone.layer0.ln1.b"])
        return ad.sum_(ad.mul(attention(h, params, "backbone.layer0", 2), probe))

    rep = gradcheck(closure, {k: v for k, v in layer.items() if ".ln2" not in k and ".ff" not in k})
    assert rep.passed, rep.lines()


def test_head_gradients(rng):
    p = hd.init_head(16, rng, np.float64)
    tokens = Tensor(rng.normal(size=(6, 16)))
    noise = rng.uniform(0.1, 0.9, 6)
    probe = Tensor(rng.normal(size=6))

    def closure():
        sel = hd.concrete_gate(hd.select_logits(tokens, p), 0.7, noise=noise)
        return ad.sum_(ad.mul(sel.gates, probe))

    assert gradcheck(closure, p).passed


def test_hinge_kink_is_excluded_not_failed():
    tau = 0.9
    x = Tensor(np.array([tau]), requires_grad=True)

    def closure():
        margin = ad.shift(ad.neg(ad.sum_(x)), tau)
        return ad.relu(margin), [margin]

    rep = gradcheck(closure, {"x": x})
    assert rep.excluded_points == [("x", 0)]
    assert rep.params[0].checked == 0 and rep.passed


def test_nondeterministic_closure_is_an_error(rng):
    x = Tensor(np.ones(3), requires_grad=True)
    stream = np.random.default_rng(0)
    with pytest.raises(NondeterminismError):
        gradcheck(lambda: ad.sum_(ad.mul(x, Tensor(stream.normal(size=3)))), {"x": x})


def test_classify_encode_gradients_at_toy_dims(rng):
    cfg = BackboneConfig(d_in=8, d_model=8, heads=2, layers=2, num_classes=3)
    model = ReaMIL.create(cfg, seed=4, dtype=np.float64)
    X, coords = rng.normal(size=(5, 8)), rng.uniform(0, 100, (5, 2))
    params = {k: v for k, v in model.params.items() if "layer1" in k or k.startswith("backbone.cls")}
    assert gradcheck(lambda: ad.cross_entropy(model.full_logits(X, coords), 2), params).passed


def test_full_toy_suite_passes_quickly():
    t0 = time.perf_counter()
    reports = toy_suite()
    assert time.perf_counter() - t0 < 120
    for name, rep in reports.items():
        assert rep.passed, (name, rep.lines())

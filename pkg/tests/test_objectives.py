from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reamil import autodiff as ad
from reamil import objectives as ob
from reamil.autodiff import Tape, Tensor
from reamil.backbone import BackboneConfig, normalize_coords
from reamil.model import ReaMIL
from reamil.objectives import LossConfig
from reamil.trainer import OptimizerState, adamw_step


def logits_for(p):
    """Two-class logits whose class-0 probability is ``p``."""
    return Tensor(np.array([np.log(p), np.log(1 - p)]))


def test_loss_full_examples(rng):
    assert abs(ob.loss_full(Tensor([0.0, 0.0]), 1).item() - np.log(2)) < 1e-12
    assert ob.loss_full(Tensor([0.0, 30.0]), 1).item() < 1e-12
    x = rng.normal(size=5)
    ref = -(x[3] - np.log(np.sum(np.exp(x))))
    assert abs(ob.loss_full(Tensor(x), 3).item() - ref) < 1e-12


def test_suff_hinge_examples():
    ce = -np.log(0.95)
    assert abs(ob.loss_suff(logits_for(0.95), 0, 0.9).item() - ce) < 1e-12
    assert abs(ob.loss_suff(logits_for(0.60), 0, 0.9).item() - (-np.log(0.6) + 0.30)) < 1e-12


def test_excl_hinge_examples():
    assert ob.loss_excl(logits_for(0.05), 0, 0.1).item() == 0
    assert abs(ob.loss_excl(logits_for(0.30), 0, 0.1).item() - 0.20) < 1e-12


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.05, 0.95))
def test_excl_nonnegative(a, b, beta):
    assert ob.loss_excl(Tensor(np.array([a, b])), 0, beta).item() >= 0


def test_suff_hinge_gradient_away_from_kink(rng):
    from reamil.gradcheck import gradcheck
    for p in (0.3, 0.97):
        logit = Tensor(np.array([np.log(p), np.log(1 - p)]) + rng.normal(0, 1e-3, 2), requires_grad=True)
        rep = gradcheck(lambda: ob.loss_suff(logit, 0, 0.9), {"l": logit})
        assert rep.passed


def test_contig_examples(caplog):
    c = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert abs(ob.loss_contig(Tensor(np.array([0.5, 0.5])), c).item() - 1.0) < 1e-12
    assert ob.loss_contig(Tensor(np.array([0.0, 1.0, 0.0])), np.random.default_rng(0).normal(size=(3, 2))).item() == 0
    ob._warned = False
    with caplog.at_level("WARNING", logger="reamil.objectives"):
        assert ob.loss_contig(Tensor(np.zeros(3)), np.zeros((3, 2))).item() == 0
    assert "below floor" in caplog.text


@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 10))
def test_contig_invariances(seed, s, tx, ty, dil):
    r = np.random.default_rng(seed)
    z, c = r.uniform(0.05, 1, 6), r.uniform(0, 1, (6, 2))
    base = ob.loss_contig(Tensor(z), c).item()
    assert abs(ob.loss_contig(Tensor(z * s), c).item() - base) <= 1e-6
    assert abs(ob.loss_contig(Tensor(z), c + [tx, ty]).item() - base) <= 1e-6
    assert abs(ob.loss_contig(Tensor(z), c * dil).item() - dil**2 * base) <= 1e-6 * max(1, dil**2)


def test_budget_examples():
    assert ob.loss_budget(Tensor(np.ones(4))).item() == 1
    assert ob.loss_budget(Tensor(np.zeros(4))).item() == 0
    assert ob.loss_budget(Tensor(np.array([1.0, 1, 0, 0]))).item() == 0.5


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=1.0)
    with pytest.raises(ValueError):
        LossConfig(lambda_excl=-1)


def _random_breakdown(seed, config):
    r = np.random.default_rng(seed)
    lf, lk, ld = (Tensor(r.normal(size=2)) for _ in range(3))
    z = Tensor(r.uniform(size=5))
    return ob.total_loss(lf, lk, ld, z, r.uniform(size=(5, 2)), int(r.integers(2)), config)


@given(st.integers(0, 10_000))
def test_breakdown_sums_and_terms_nonnegative(seed):
    cfg = LossConfig()
    br = _random_breakdown(seed, cfg)
    parts = (br.l_full.item() + cfg.lambda_suff * br.l_suff.item() + cfg.lambda_excl * br.l_excl.item()
             + cfg.lambda_contig * br.l_contig.item() + cfg.lambda_budget * br.l_budget.item())
    assert abs(parts - br.total.item()) <= 1e-6
    assert min(br.l_full.item(), br.l_suff.item(), br.l_excl.item(), br.l_contig.item(), br.l_budget.item()) >= 0


def test_all_lambda_zero_reduces_to_full():
    zero = LossConfig(lambda_suff=0, lambda_excl=0, lambda_contig=0, lambda_budget=0)
    br = _random_breakdown(3, zero)
    assert br.total.item() == br.l_full.item()


@pytest.mark.parametrize("term", ["suff", "excl", "contig", "budget"])
def test_each_ablation_changes_only_its_own_term(term):
    full = _random_breakdown(11, LossConfig())
    cfg = replace(LossConfig(), **{f"lambda_{term}": 0.0})
    abl = _random_breakdown(11, cfg)
    for name in ("l_full", "l_suff", "l_excl", "l_contig", "l_budget"):
        assert getattr(full, name).item() == getattr(abl, name).item()
    w = getattr(LossConfig(), f"lambda_{term}")
    assert abs(full.total.item() - abl.total.item() - w * getattr(full, f"l_{term}").item()) <= 1e-9


def test_all_ones_gate_is_the_degenerate_regime(rng):
    model = ReaMIL.create(BackboneConfig(d_in=8, d_model=8, heads=2), seed=0, with_head=True)
    X, c = rng.normal(size=(5, 8)).astype(np.float32), rng.uniform(0, 100, (5, 2))
    w = np.stack([np.ones(5), np.ones(5), np.zeros(5)]).astype(np.float32)
    lg = model.masked_logits(X, c, w)
    lf, lk, ld = (ad.slice_(lg, i) for i in range(3))
    br = ob.total_loss(lf, lk, ld, Tensor(np.ones(5, np.float32)), normalize_coords(c), 1, LossConfig())
    assert ob.loss_full(lk, 1).item() == br.l_full.item()
    assert br.l_budget.item() == 1.0


def test_large_budget_drives_gates_to_zero():
    r = np.random.default_rng(0)
    model = ReaMIL.create(BackboneConfig(d_in=4, d_model=8, heads=2), seed=2, with_head=True)
    model.params["head.l2.b"].data[:] = 2.0  # start with both tiles mostly kept
    X, c = r.normal(size=(2, 4)).astype(np.float32), np.array([[0.0, 0.0], [1.0, 1.0]])
    cfg = LossConfig(lambda_budget=50.0)
    start = model.selection(X, c, mode="eval", temperature=1.0).gates.data.mean()
    opt = OptimizerState.zeros(model.params)
    for step in range(200):
        with Tape():
            fwd = model.views_forward(X, c, temperature=1.0, rng=np.random.default_rng([0, step]))
            br = ob.total_loss(fwd.full, fwd.keep, fwd.drop, fwd.selection.gates, normalize_coords(c), 1, cfg)
            ad.backward(br.total)
        adamw_step(model.params, {k: p.grad for k, p in model.params.items()}, opt, 1e-2, 0.0)
        model.zero_grad()
    end = model.selection(X, c, mode="eval", temperature=1.0).gates.data.mean()
    assert start > 0.8 and end < 0.05

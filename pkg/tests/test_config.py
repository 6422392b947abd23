import pytest
from hypothesis import given
from hypothesis import strategies as st

from reamil import config as cf


def test_dump_parse_round_trip():
    cfg = cf.RunConfig()
    assert cf.parse_text(cf.dump(cfg)) == cfg


def test_sections_and_types():
    text = "# comment\n[reamil]\nlr = 0.005\nepochs=3\n[backbone]\nuse_positional = false\n[paths]\ndata = /x/y\n"
    cfg = cf.parse_text(text)
    assert cfg.reamil.lr == 0.005 and cfg.reamil.epochs == 3
    assert cfg.backbone.use_positional is False and cfg.paths.data == "/x/y"
    assert cfg.baseline.lr == 1e-3  # baseline keeps its own defaults


def test_evidence_train_carries_loss_section():
    cfg = cf.apply(cf.RunConfig(), "loss.lambda_budget", "0")
    assert cfg.evidence_train().loss.lambda_budget == 0.0


@pytest.mark.parametrize("text", ["[nope]\n", "[reamil]\nbogus = 1\n", "lr = 1\n", "[reamil]\nlr\n",
                                  "[reamil]\nepochs = 0\n", "[loss]\ntau = 1.5\n", "[backbone]\nheads = two\n"])
def test_invalid_config_rejected(text):
    with pytest.raises(cf.ConfigError):
        cf.parse_text(text)


@given(st.floats(1e-6, 1.0), st.integers(1, 50))
def test_apply_round_trips_values(lr, epochs):
    cfg = cf.apply(cf.apply(cf.RunConfig(), "reamil.lr", repr(lr)), "reamil.epochs", str(epochs))
    assert cfg.reamil.lr == lr and cf.parse_text(cf.dump(cfg)) == cfg

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phiseg import config as C
from phiseg.config import ConfigError, TrainConfig


def test_default_roundtrip():
    cfg = TrainConfig()
    assert C.parse(C.serialize(cfg)) == cfg
    assert C.parse("") == cfg


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0, 10, allow_nan=False), lr=st.floats(1e-8, 1.0), epochs=st.integers(0, 500),
       kind=st.sampled_from(["lowpass", "leaky_lowpass", "highpass", "none"]), weight=st.booleans(),
       scales=st.lists(st.floats(0.1, 4.0), min_size=1, max_size=4))
def test_roundtrip_property(alpha, lr, epochs, kind, weight, scales):
    cfg = TrainConfig(alpha=alpha, lr0=lr, epochs=epochs, filter_kind=kind,
                      gamma_square_weight=weight, scales=tuple(scales), beta=1.0)
    assert C.parse(C.serialize(cfg)) == cfg


def test_every_field_is_serialized():
    text = C.serialize(TrainConfig())
    for section, attrs in C.LAYOUT.items():
        assert f"[{section}]" in text
    assert sum(len(a) for a in C.LAYOUT.values()) == len(TrainConfig.__dataclass_fields__)
    assert "kind = lowpass" in text


def test_comments_and_partial_files():
    cfg = C.parse("# leading comment\n[loss]\nalpha = 1.0  # stronger phase term\n\n[train]\nepochs = 3\n")
    assert cfg.alpha == 1.0 and cfg.epochs == 3 and cfg.beta == 1.0


@pytest.mark.parametrize("text,pattern", [
    ("[loss]\ngamma_ray = 1\n", "unknown key 'gamma_ray' in \\[loss\\]"),
    ("[optim]\nlr0 = 1\n", "unknown section \\[optim\\]"),
    ("[train]\nepochs = many\n", "bad value 'many' for epochs"),
    ("[train]\nlr0 = -1\n", "lr0 must be positive"),
    ("[filter]\nkind = bandpass\n", "bandpass"),
    ("[loss]\nalpha = 0\nbeta = 0\n", "alpha"),
    ("alpha = 1\n", "malformed"),
])
def test_rejections(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        C.parse(text)


def test_overrides_win(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("[loss]\nalpha = 0.5\n[filter]\nkind = highpass\n")
    cfg = C.load(path).with_overrides(["loss.alpha=1.0", "filter.kind=lowpass", "model.channels=4,8"])
    assert (cfg.alpha, cfg.filter_kind, cfg.channels) == (1.0, "lowpass", (4, 8))
    with pytest.raises(ConfigError, match="section.key=value"):
        cfg.with_overrides(["alpha=1"])
    with pytest.raises(ConfigError):
        cfg.with_overrides(["train.nope=1"])


def test_derived_specs():
    cfg = TrainConfig(filter_kind="highpass", gamma=5, gamma_square_weight=False)
    assert cfg.filter_spec().kind == "highpass" and cfg.filter_spec().gamma == 5
    assert cfg.encoder_spec().channels == [16, 32, 64, 128, 256]
    assert cfg.loss_weights().alpha == 0.01

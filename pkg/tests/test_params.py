import numpy as np
import pytest

from react_emg.config import GROUP_DEPTHS, ModelConfig, desk_config, full_config
from react_emg.model import build_params, group_depth, reset_conditioning
from react_emg.params import ParamSet

CONDITIONING_PARAMS_FULL = 925_184
BACKBONE_PARAMS_FULL = 4_281_020


def _toy():
    ps = ParamSet()
    ps.add("encoder.a", np.ones(3), "encoder.conv")
    ps.add("encoder.b", np.ones((2, 2)), "encoder.tds1")
    ps.add("cond.c", np.zeros(5), "conditioning")
    return ps


def test_groups_and_prefix_freeze():
    ps = _toy()
    assert ps.groups() == ["conditioning", "encoder.conv", "encoder.tds1"]
    ps.freeze("encoder")
    assert [n for n, _ in ps.trainable()] == ["cond.c"]
    assert ps.is_frozen("encoder.conv") and ps.is_frozen("encoder.tds1")
    ps.unfreeze("encoder.tds1")
    assert [n for n, _ in ps.trainable()] == ["encoder.b", "cond.c"]


def test_duplicate_name_rejected():
    ps = _toy()
    with pytest.raises(KeyError):
        ps.add("cond.c", np.zeros(1), "conditioning")


def test_count_checksum_and_state_round_trip():
    ps = _toy()
    assert ps.count() == 12
    assert ps.count("encoder") == 7
    before = ps.checksum("encoder")
    ps["cond.c"].data += 1.0
    assert ps.checksum("encoder") == before
    assert ps.checksum() != _toy().checksum()
    other = _toy()
    other.load_state_dict(ps.state_dict())
    assert other.checksum() == ps.checksum()


def test_load_state_dict_validates():
    ps = _toy()
    with pytest.raises(KeyError):
        ps.load_state_dict({"encoder.a": np.ones(3)})
    state = ps.state_dict()
    state["encoder.a"] = np.ones(4)
    with pytest.raises(ValueError):
        ps.load_state_dict(state)


def test_copy_is_independent():
    ps = _toy()
    ps.freeze("conditioning")
    cp = ps.copy()
    cp["encoder.a"].data[0] = 9.0
    assert ps["encoder.a"].data[0] == 1.0
    assert cp.is_frozen("conditioning")


def test_group_depths_cover_every_parameter():
    ps = build_params(desk_config())
    for n in ps:
        assert group_depth(ps.group_of(n)) in GROUP_DEPTHS.values()
    with pytest.raises(KeyError):
        group_depth("nowhere")


def test_reset_conditioning_leaves_backbone():
    cfg = desk_config()
    ps = build_params(cfg, seed=0)
    enc = ps.checksum(["encoder", "decoder"])
    for n in ps.names("conditioning"):
        ps[n].data = ps[n].data + 1.0
    reset_conditioning(ps, cfg, seed=0)
    assert ps.checksum(["encoder", "decoder"]) == enc
    assert ps.checksum("conditioning") == build_params(cfg, seed=0).checksum("conditioning")


def test_conditioning_seed_is_independent_stream():
    cfg = desk_config()
    a = build_params(cfg, seed=0)
    b = build_params(cfg, seed=0, conditioning_seed=9)
    assert a.checksum(["encoder", "decoder"]) == b.checksum(["encoder", "decoder"])
    assert a.checksum("conditioning") != b.checksum("conditioning")


def test_conditioning_parameter_count_pinned():
    assert build_params(full_config()).count("conditioning") == CONDITIONING_PARAMS_FULL


def test_backbone_parameter_count_pinned():
    assert build_params(full_config()).count(["encoder", "decoder"]) == BACKBONE_PARAMS_FULL


@pytest.mark.xfail(strict=True, reason="the stated layer widths give about 4.3M backbone "
                                       "parameters, below the quoted 5.9M")
def test_backbone_parameter_count_quoted_total():
    n = build_params(full_config()).count(["encoder", "decoder"])
    assert abs(n - 5.9e6) <= 0.15 * 5.9e6


def test_config_round_trip_and_validation():
    cfg = desk_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        full_config().replace(conv2_channels=100)
    with pytest.raises(ValueError):
        full_config().replace(content_samples=10001)

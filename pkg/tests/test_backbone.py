import numpy as np
import pytest

from react_emg import backbone
from react_emg.config import desk_config, full_config
from react_emg.model import build_params
from react_emg.ndcore import Tensor, conv1d, finite_diff_check_params, no_grad


def test_full_window_lengths():
    cfg = full_config()
    assert backbone.encoder_lengths(cfg, 11790) == (2356, 1176, 294)
    assert cfg.content_frames == 250
    assert cfg.decoder_input == 84


def test_align_frames():
    f = np.arange(294.0).reshape(1, 1, 294)
    out = backbone.align_frames(f, 10000)
    assert out.shape[-1] == 250
    assert out[0, 0, 0] == 44.0
    assert backbone.align_frames(f, 40).shape[-1] == 1
    with pytest.raises(ValueError):
        backbone.align_frames(f[..., :100], 10000)
    with pytest.raises(ValueError):
        backbone.align_frames(f, 1001)


def test_encode_shapes_and_minimum(tiny_cfg, tiny_ps, rng):
    x = rng.normal(size=(2, tiny_cfg.emg_channels, tiny_cfg.window_samples))
    f = backbone.encode(tiny_ps, tiny_cfg, x)
    assert f.shape == (2, 64, backbone.encoder_lengths(tiny_cfg, tiny_cfg.window_samples)[2])
    need = backbone.min_input_length(tiny_cfg)
    assert backbone.encode(tiny_ps, tiny_cfg, x[:, :, :need]).shape[-1] == 1
    with pytest.raises(ValueError, match=str(need)):
        backbone.encode(tiny_ps, tiny_cfg, x[:, :, :need - 1])
    with pytest.raises(ValueError, match="channels"):
        backbone.encode(tiny_ps, tiny_cfg, x[:, :2])


def test_encode_zero_input_finite(tiny_cfg, tiny_ps):
    f = backbone.encode(tiny_ps, tiny_cfg, np.zeros((1, tiny_cfg.emg_channels, 2190)))
    assert np.all(np.isfinite(f.data))


def test_receptive_field_within_context():
    cfg = desk_config()
    ps = build_params(cfg)
    context, earliest, latest = backbone.receptive_field_probe(ps, cfg)
    assert context <= cfg.context_samples == 1790
    # the first retained frame depends on nothing before the window's context
    assert earliest >= 0 and latest < cfg.window_samples


def test_early_samples_do_not_reach_retained_frames(rng):
    cfg = desk_config()
    ps = build_params(cfg)
    x = rng.normal(size=(1, 16, cfg.window_samples))
    _, earliest, _ = backbone.receptive_field_probe(ps, cfg)
    y = x.copy()
    y[:, :, :earliest] += 50.0 * rng.normal(size=(1, 16, earliest))
    with no_grad():
        a = backbone.align_frames(backbone.encode(ps, cfg, x), cfg.content_samples).data
        b = backbone.align_frames(backbone.encode(ps, cfg, y), cfg.content_samples).data
    assert np.max(np.abs(a - b)) <= 1e-9


def _conv_context(layers, length=400):
    """Input span feeding the last output of a stack of (K, stride, causal) convs."""
    r = np.random.default_rng(0)
    ws = [r.normal(size=(1, 1, k)) for k, _, _ in layers]

    def run(x):
        for w, (_, s, causal) in zip(ws, layers):
            x = conv1d(x, w, stride=s, padding="causal" if causal else "valid").data
        return x[0, 0, -1]

    base = r.normal(size=(1, 1, length))
    ref = run(base)
    touched = []
    for i in range(length):
        x = base.copy()
        x[0, 0, i] += 1.0
        if run(x) != ref:
            touched.append(i)
    return touched[-1] - touched[0]


def test_context_arithmetic():
    assert _conv_context([(11, 5, False)], 41) == 10
    two = _conv_context([(11, 5, False), (5, 2, False)], 401)
    three = _conv_context([(11, 5, False), (5, 2, False), (9, 1, True)], 401)
    assert three - two == 80


# ---------------------------------------------------------------- decoder


def _features(cfg, rng, b=2, t=20):
    return rng.normal(size=(b, cfg.feature_dim, t))


@pytest.mark.parametrize("mode", backbone.MODES)
def test_fused_decoder_matches_unfused(tiny_cfg, tiny_ps, rng, mode):
    f = _features(tiny_cfg, rng)
    init = rng.normal(size=(2, 20))
    a = backbone.decode(tiny_ps, tiny_cfg, f, mode, init).data
    b = backbone.decode_unfused(tiny_ps, tiny_cfg, f, mode, init).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("mode", backbone.MODES)
@pytest.mark.parametrize("seed", range(2))
def test_decoder_gradient(tiny_cfg, mode, seed):
    r = np.random.default_rng(seed)
    ps = build_params(tiny_cfg, seed=seed)
    f = Tensor(r.normal(size=(2, 64, 16)))
    init = Tensor(0.1 * r.normal(size=(2, 20)))
    names = [n for n in ps.names("decoder")]
    params = [f, init] + [ps[n] for n in names]
    proj = r.normal(size=(2, 16, 20))

    # a linear read-out keeps the loss O(1), so central differences stay accurate
    def loss():
        return (backbone.decode(ps, tiny_cfg, f, mode, init) * proj).sum()

    assert finite_diff_check_params(loss, params, max_coords=25) < 1e-4


def _zero_head(ps, mode):
    head = "decoder.head_regression" if mode == backbone.REGRESSION else "decoder.head_tracking"
    ps[f"{head}.w"].data[:] = 0.0
    ps[f"{head}.b"].data[:] = 0.0


def test_regression_zero_head_is_zero_pose(tiny_cfg, tiny_ps, rng):
    _zero_head(tiny_ps, backbone.REGRESSION)
    out = backbone.decode(tiny_ps, tiny_cfg, _features(tiny_cfg, rng, t=30))
    np.testing.assert_array_equal(out.data, 0.0)


def test_regression_ignores_velocity_before_switch(tiny_cfg, tiny_ps, rng):
    f = _features(tiny_cfg, rng, t=30)
    dof = tiny_cfg.num_dof
    ref = backbone.decode_unfused(tiny_ps, tiny_cfg, f).data

    def bump(at):
        def override(t, y):
            if t != at:
                return y
            delta = np.zeros(y.shape)
            delta[:, dof:] = 1.0
            return y + delta
        return override

    for t in range(tiny_cfg.direct_position_steps):
        out = backbone.decode_unfused(tiny_ps, tiny_cfg, f, head_override=bump(t)).data
        np.testing.assert_array_equal(out, ref)
    out = backbone.decode_unfused(tiny_ps, tiny_cfg, f,
                                  head_override=bump(tiny_cfg.direct_position_steps)).data
    assert not np.array_equal(out, ref)
    assert tiny_cfg.direct_position_steps == 12


def test_tracking_requires_finite_initial_pose(tiny_cfg, tiny_ps, rng):
    f = _features(tiny_cfg, rng)
    with pytest.raises(ValueError):
        backbone.decode(tiny_ps, tiny_cfg, f, backbone.TRACKING)
    bad = np.full((2, 20), np.nan)
    with pytest.raises(ValueError):
        backbone.decode(tiny_ps, tiny_cfg, f, backbone.TRACKING, bad)
    with pytest.raises(ValueError):
        backbone.decode(tiny_ps, tiny_cfg, f, "other")


def test_tracking_starts_at_initial_pose(tiny_cfg, tiny_ps, rng):
    init = rng.normal(size=(2, 20))
    out = backbone.decode(tiny_ps, tiny_cfg, _features(tiny_cfg, rng), backbone.TRACKING, init)
    np.testing.assert_array_equal(out.data[:, 0], init)


def test_decoder_rejects_wrong_feature_width(tiny_cfg, tiny_ps):
    with pytest.raises(ValueError, match="64"):
        backbone.decode(tiny_ps, tiny_cfg, np.zeros((1, 32, 5)))

"""TDS convolutional encoder and the two-mode autoregressive LSTM decoder.

Shapes: EMG is (B, 16, L) at 2 kHz, encoder features are (B, 64, F) at
50 Hz, poses are (B, T, 20) in radians.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .layers import (apply_layer_norm, apply_linear, init_layer_norm,
                     init_linear, init_lstm, lstm_step, uniform)
from .ndcore import conv1d, ops
from .ndcore.conv import conv_output_length
from .ndcore.tensor import Tensor, as_tensor, make_node, no_grad

REGRESSION = "regression"
TRACKING = "tracking"
MODES = (REGRESSION, TRACKING)


# ---------------------------------------------------------------- init


def init_encoder(ps, cfg, rng):
    c1, c2 = cfg.conv1_channels, cfg.conv2_channels
    ps.add("encoder.conv1.w", uniform(rng, (c1, cfg.emg_channels, cfg.conv1_kernel),
                                      cfg.emg_channels * cfg.conv1_kernel), "encoder.conv")
    ps.add("encoder.conv1.b", np.zeros(c1), "encoder.conv")
    init_layer_norm(ps, "encoder.conv1.ln", c1, "encoder.conv")
    ps.add("encoder.conv2.w", uniform(rng, (c2, c1, cfg.conv2_kernel), c1 * cfg.conv2_kernel),
           "encoder.conv")
    ps.add("encoder.conv2.b", np.zeros(c2), "encoder.conv")
    init_layer_norm(ps, "encoder.conv2.ln", c2, "encoder.conv")
    c, w = cfg.tds_channels, cfg.tds_width
    for s, k in enumerate(cfg.tds_kernels):
        group = f"encoder.tds{s + 1}"
        for blk in range(cfg.tds_blocks):
            name = f"encoder.tds{s + 1}.b{blk}"
            ps.add(f"{name}.conv.w", uniform(rng, (c, c, k), c * k), group)
            ps.add(f"{name}.conv.b", np.zeros(c), group)
            init_layer_norm(ps, f"{name}.ln1", c * w, group)
            init_linear(ps, f"{name}.fc1", c * w, c * w, rng, group)
            init_linear(ps, f"{name}.fc2", c * w, c * w, rng, group)
            init_layer_norm(ps, f"{name}.ln2", c * w, group)
    last = len(cfg.tds_kernels)
    init_linear(ps, f"encoder.tds{last}.out", c * w, cfg.feature_dim, rng, f"encoder.tds{last}")


def init_decoder(ps, cfg, rng):
    hid = cfg.decoder_hidden
    init_lstm(ps, "decoder.lstm", cfg.decoder_input, hid, 2, rng, "decoder.lstm")
    init_linear(ps, "decoder.head_regression", hid, 2 * cfg.num_dof, rng, "decoder.head")
    init_linear(ps, "decoder.head_tracking", hid, cfg.num_dof, rng, "decoder.head")


# ---------------------------------------------------------------- encoder


def min_input_length(cfg):
    """Shortest EMG input that yields one encoder frame."""
    l2 = cfg.conv2_kernel + cfg.conv2_stride * (cfg.decimation - 1)
    return cfg.conv1_kernel + cfg.conv1_stride * (l2 - 1)


def encoder_lengths(cfg, length):
    l1 = conv_output_length(length, cfg.conv1_kernel, cfg.conv1_stride)
    l2 = conv_output_length(l1, cfg.conv2_kernel, cfg.conv2_stride)
    return l1, l2, l2 // cfg.decimation


def _tds_conv_block(ps, name, x, c, w):
    b, t, _ = x.shape
    y = x.reshape(b, t, c, w).transpose(0, 3, 2, 1).reshape(b * w, c, t)
    y = conv1d(y, ps[f"{name}.conv.w"], stride=1, padding="causal", bias=ps[f"{name}.conv.b"])
    y = ops.relu(y).reshape(b, w, c, t).transpose(0, 3, 2, 1).reshape(b, t, c * w)
    return apply_layer_norm(ps, f"{name}.ln1", x + y)


def _tds_fc_block(ps, name, x):
    y = apply_linear(ps, f"{name}.fc2", ops.relu(apply_linear(ps, f"{name}.fc1", x)))
    return apply_layer_norm(ps, f"{name}.ln2", x + y)


def encode(ps, cfg, emg):
    """Map instance-normalised EMG (B, C, L) to features (B, feature_dim, F).

    Conv blocks are valid and strided; TDS blocks are causal and
    length-preserving; the result is decimated to 50 Hz by keeping every
    ``decimation``-th step (the last of each group).
    """
    x = as_tensor(emg)
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape(1, *x.shape)
    if x.shape[1] != cfg.emg_channels:
        raise ValueError(f"expected {cfg.emg_channels} EMG channels, got {x.shape[1]}")
    need = min_input_length(cfg)
    if x.shape[2] < need:
        raise ValueError(f"EMG length {x.shape[2]} is below the encoder minimum of {need} samples")
    x = conv1d(x, ps["encoder.conv1.w"], stride=cfg.conv1_stride, bias=ps["encoder.conv1.b"])
    x = apply_layer_norm(ps, "encoder.conv1.ln", ops.relu(x), axis=1)
    x = conv1d(x, ps["encoder.conv2.w"], stride=cfg.conv2_stride, bias=ps["encoder.conv2.b"])
    x = apply_layer_norm(ps, "encoder.conv2.ln", ops.relu(x), axis=1)
    x = x.transpose(0, 2, 1)
    c, w = cfg.tds_channels, cfg.tds_width
    for s in range(len(cfg.tds_kernels)):
        for blk in range(cfg.tds_blocks):
            name = f"encoder.tds{s + 1}.b{blk}"
            x = _tds_conv_block(ps, name, x, c, w)
            x = _tds_fc_block(ps, name, x)
    x = apply_linear(ps, f"encoder.tds{len(cfg.tds_kernels)}.out", x)
    d = cfg.decimation
    x = x[:, d - 1::d, :].transpose(0, 2, 1)
    return x[0] if unbatched else x


def align_frames(features, content_samples, samples_per_frame=40):
    """Keep the last ``content_samples / samples_per_frame`` frames."""
    if content_samples % samples_per_frame:
        raise ValueError(f"content_samples={content_samples} is not a multiple of "
                         f"{samples_per_frame}")
    n = content_samples // samples_per_frame
    f = features.shape[-1]
    if f < n:
        raise ValueError(f"only {f} encoder frames, need {n} for {content_samples} content samples")
    return features[..., f - n:]


def receptive_field_probe(ps, cfg, length=None, seed=0):
    """Measure the encoder context by input perturbation.

    Returns ``(context, earliest, latest)`` where ``earliest``/``latest`` are
    the extreme input samples that change the first retained output frame
    and ``context = latest - earliest`` (``K - 1`` for a single conv).
    """
    length = length or cfg.window_samples
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(1, cfg.emg_channels, length))
    frames = encoder_lengths(cfg, length)[2]
    target = frames - cfg.content_frames if length == cfg.window_samples else 0

    def frame(x):
        with no_grad():
            return encode(ps, cfg, x).data[0, :, target]

    ref = frame(base)
    noise = 10.0 * rng.normal(size=base.shape)

    def changed(lo, hi):
        x = base.copy()
        x[:, :, lo:hi] += noise[:, :, lo:hi]
        return not np.array_equal(frame(x), ref)

    lo, hi = 1, length
    while lo < hi:
        mid = (lo + hi) // 2
        if changed(0, mid):
            hi = mid
        else:
            lo = mid + 1
    earliest = lo - 1
    lo, hi = 0, length - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if changed(mid, length):
            lo = mid
        else:
            hi = mid - 1
    latest = lo
    return latest - earliest, earliest, latest


# ---------------------------------------------------------------- decoder


def decoder_scan(fproj, wp, u1, w2, u2, b2, wh, bh, pose0, tracking, switch, scale):
    """Fused autodiff node for the full autoregressive decoder recurrence."""
    fp = np.ascontiguousarray(fproj.data.transpose(1, 0, 2))
    arrays = [np.ascontiguousarray(t.data) for t in (wp, u1, w2, u2, b2, wh, bh, pose0)]
    wpd, u1d, w2d, u2d, b2d, whd, bhd, p0d = arrays
    poses, cache = kernels.decoder_scan_forward(fp, wpd, u1d, w2d, u2d, b2d, whd, bhd, p0d,
                                                tracking, switch, scale)

    def bw(g):
        dposes = np.ascontiguousarray(g.transpose(1, 0, 2))
        dfp, *rest = kernels.decoder_scan_backward(dposes, wpd, u1d, w2d, u2d, whd, cache,
                                                   tracking, switch, scale)
        return (dfp.transpose(1, 0, 2), *rest)

    parents = (fproj, wp, u1, w2, u2, b2, wh, bh, pose0)
    return make_node(poses.transpose(1, 0, 2), parents, bw, "decoder_scan")


def _decoder_inputs(ps, cfg, features, mode):
    f = as_tensor(features)
    if f.ndim == 2:
        f = f.reshape(1, *f.shape)
    if f.shape[1] != cfg.feature_dim:
        raise ValueError(f"decoder expects {cfg.feature_dim} feature channels, got {f.shape[1]}")
    w1 = ps["decoder.lstm.l0.W"]
    head = "decoder.head_regression" if mode == REGRESSION else "decoder.head_tracking"
    return f, w1, head


def decode(ps, cfg, features, mode=REGRESSION, initial_pose=None):
    """Decode (B, 64, T) features to poses (B, T, 20).

    ``mode="regression"``: LSTM input is ``[feature_t; pose_{t-1}]`` with a
    zero initial pose; head output times ``output_scale`` is split into
    (position, velocity); positions are used for the first
    ``direct_position_steps`` frames, then velocities are integrated.

    ``mode="tracking"``: ``pose_0 = initial_pose`` and
    ``pose_t = pose_{t-1} + output_scale * head_t`` for ``t >= 1``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    f, w1, head = _decoder_inputs(ps, cfg, features, mode)
    b = f.shape[0]
    fdim = cfg.feature_dim
    fproj = ops.linear(f.transpose(0, 2, 1), w1[:fdim], ps["decoder.lstm.l0.b"])
    if mode == TRACKING:
        if initial_pose is None:
            raise ValueError("tracking mode needs an initial pose")
        pose0 = as_tensor(np.broadcast_to(np.asarray(getattr(initial_pose, "data", initial_pose),
                                                     dtype=np.float64), (b, cfg.num_dof)))
        if isinstance(initial_pose, Tensor) and initial_pose.requires_grad:
            pose0 = initial_pose
    else:
        pose0 = Tensor(np.zeros((b, cfg.num_dof)))
    if not np.all(np.isfinite(pose0.data)):
        raise ValueError("initial pose must be finite")
    return decoder_scan(fproj, w1[fdim:], ps["decoder.lstm.l0.U"], ps["decoder.lstm.l1.W"],
                        ps["decoder.lstm.l1.U"], ps["decoder.lstm.l1.b"], ps[f"{head}.w"],
                        ps[f"{head}.b"], pose0, mode == TRACKING, cfg.direct_position_steps,
                        cfg.output_scale)


def decode_regression(ps, cfg, features):
    return decode(ps, cfg, features, REGRESSION)


def decode_tracking(ps, cfg, features, initial_pose):
    return decode(ps, cfg, features, TRACKING, initial_pose)


def decode_unfused(ps, cfg, features, mode=REGRESSION, initial_pose=None, head_override=None):
    """Step-by-step decoder assembled from :func:`lstm_step`.

    Slow; kept as an independent route to check the fused kernel.
    ``head_override(t, y)`` may replace the scaled head output at step t.
    """
    f, w1, head = _decoder_inputs(ps, cfg, features, mode)
    b, _, t_len = f.shape
    hid = cfg.decoder_hidden
    dof = cfg.num_dof
    ft = f.transpose(0, 2, 1)
    h = [Tensor(np.zeros((b, hid))), Tensor(np.zeros((b, hid)))]
    c = [Tensor(np.zeros((b, hid))), Tensor(np.zeros((b, hid)))]
    if mode == TRACKING:
        pose0 = as_tensor(np.broadcast_to(np.asarray(getattr(initial_pose, "data", initial_pose),
                                                     dtype=np.float64), (b, dof)))
        prev = pose0
    else:
        prev = Tensor(np.zeros((b, dof)))
    poses = []
    for t in range(t_len):
        x = ops.concat([ft[:, t, :], prev], axis=1)
        h[0], c[0] = lstm_step(x, h[0], c[0], w1, ps["decoder.lstm.l0.U"], ps["decoder.lstm.l0.b"])
        h[1], c[1] = lstm_step(h[0], h[1], c[1], ps["decoder.lstm.l1.W"],
                               ps["decoder.lstm.l1.U"], ps["decoder.lstm.l1.b"])
        y = apply_linear(ps, head, h[1]) * cfg.output_scale
        if head_override is not None:
            y = head_override(t, y)
        if mode == TRACKING:
            pose = pose0 if t == 0 else prev + y
        elif t < cfg.direct_position_steps:
            pose = y[:, :dof]
        else:
            pose = prev + y[:, dof:]
        poses.append(pose)
        prev = pose
    return ops.stack(poses, axis=1)

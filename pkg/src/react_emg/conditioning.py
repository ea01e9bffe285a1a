"""User-adaptive conditioning: characteristic CNN, BiGRU pooling, group
transformer and FiLM projection.

Every parameter here lives in the ``"conditioning"`` group.  The final
FiLM layer starts at zero, so a fresh pathway yields ``gamma = 1`` and
``beta = 0`` and leaves the backbone's output untouched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import backbone
from .layers import (apply_layer_norm, apply_linear, bigru_pool, init_gru,
                     init_layer_norm, init_linear, init_transformer_layer,
                     sin_pe, transformer_layer, uniform)
from .ndcore import conv1d, ops
from .ndcore.random import EVAL
from .ndcore.tensor import Tensor, as_tensor

GROUP = "conditioning"


@dataclass
class CalibrationSet:
    """k calibration clips of one user, as raw EMG and/or encoder features."""

    user_id: int
    emg: np.ndarray | None = None          # (k, C, L), instance-normalised
    features: np.ndarray | None = None     # (k, feature_dim, F)
    sessions: list = field(default_factory=list)
    sources: list = field(default_factory=list)

    @property
    def k(self):
        arr = self.features if self.features is not None else self.emg
        return 0 if arr is None else int(arr.shape[0])

    def key(self):
        h = hashlib.sha1(repr((self.user_id, self.sources)).encode()).hexdigest()[:16]
        return (self.user_id, h)

    def prefix(self, k):
        return CalibrationSet(
            user_id=self.user_id,
            emg=None if self.emg is None else self.emg[:k],
            features=None if self.features is None else self.features[:k],
            sessions=self.sessions[:k],
            sources=self.sources[:k],
        )


@dataclass
class UserEmbedding:
    z: Tensor
    source: str   # "aggregated" or "fallback"
    k: int


@dataclass
class FilmParams:
    gamma: Tensor
    beta: Tensor


def init_conditioning(ps, cfg, rng):
    ch, kk = cfg.char_channels, cfg.char_kernel
    c_in = cfg.feature_dim
    for layer in range(cfg.char_layers):
        ps.add(f"cond.char{layer}.w", uniform(rng, (ch, c_in, kk), c_in * kk), GROUP)
        ps.add(f"cond.char{layer}.b", np.zeros(ch), GROUP)
        init_layer_norm(ps, f"cond.char{layer}.ln", ch, GROUP)
        c_in = ch
    init_gru(ps, "cond.gru", ch, cfg.gru_hidden, cfg.gru_layers, rng, GROUP)
    d = cfg.embed_dim
    ps.add("cond.query", rng.normal(scale=0.02, size=d), GROUP)
    ps.add("cond.fallback", rng.normal(scale=0.02, size=d), GROUP)
    for layer in range(cfg.attn_layers):
        init_transformer_layer(ps, f"cond.attn{layer}", d, cfg.attn_ff_mult * d, rng, GROUP)
    init_layer_norm(ps, "cond.film.ln", d, GROUP)
    init_linear(ps, "cond.film.fc1", d, cfg.film_hidden, rng, GROUP)
    init_linear(ps, "cond.film.fc2", cfg.film_hidden, 2 * cfg.feature_dim, rng, GROUP, zero=True)


def characterize(ps, cfg, features, ctx=EVAL):
    """(B, feature_dim, F) -> (B, char_channels, F) with causal K=3 convs,
    each followed by channel layer norm, GELU and dropout."""
    x = as_tensor(features)
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape(1, *x.shape)
    for layer in range(cfg.char_layers):
        name = f"cond.char{layer}"
        x = conv1d(x, ps[f"{name}.w"], padding="causal", bias=ps[f"{name}.b"])
        x = ops.gelu(apply_layer_norm(ps, f"{name}.ln", x, axis=1))
        if ctx.train:
            x = ops.dropout(x, cfg.char_dropout, True, ctx.rng(f"{name}.drop"))
    return x[0] if unbatched else x


def embed_features(ps, cfg, features, ctx=EVAL):
    """Encoder features of k clips (k, feature_dim, F) -> vectors (k, embed_dim)."""
    x = characterize(ps, cfg, features, ctx).transpose(0, 2, 1)
    return bigru_pool(ps, "cond.gru", x, cfg.gru_layers, cfg.gru_dropout, ctx)


def embed_recording(ps, cfg, emg, ctx=EVAL):
    """Raw calibration EMG (C, L) or (k, C, L) -> embedding(s)."""
    feats = backbone.encode(ps, cfg, emg)
    return embed_features(ps, cfg, feats, ctx)


def aggregate(ps, cfg, vectors):
    """Fold k per-recording vectors into one user embedding.

    ``k = 0`` returns the learnable fallback.  Otherwise the tokens are
    ``[query; v_1 + pe(0); ...; v_k + pe(k-1)]`` and ``z`` is the query token
    after the transformer layers.
    """
    k = 0 if vectors is None else vectors.shape[0]
    if k > cfg.max_calibration:
        raise ValueError(f"k={k} calibration recordings exceeds the supported maximum "
                         f"of {cfg.max_calibration}")
    if k == 0:
        return UserEmbedding(ps["cond.fallback"], "fallback", 0)
    d = cfg.embed_dim
    pe = np.stack([sin_pe(i, d) for i in range(k)])
    tokens = ops.concat([ps["cond.query"].reshape(1, d), vectors + pe], axis=0).reshape(1, k + 1, d)
    for layer in range(cfg.attn_layers):
        tokens = transformer_layer(ps, f"cond.attn{layer}", tokens, cfg.attn_heads)
    return UserEmbedding(tokens[0, 0, :], "aggregated", k)


def film_project(ps, cfg, z):
    """LayerNorm -> linear -> GELU -> linear, split into (1 + d_gamma, beta)."""
    z = as_tensor(z)
    h = ops.gelu(apply_linear(ps, "cond.film.fc1", apply_layer_norm(ps, "cond.film.ln", z)))
    out = apply_linear(ps, "cond.film.fc2", h)
    c = cfg.feature_dim
    return FilmParams(gamma=out[..., :c] + 1.0, beta=out[..., c:])


def modulate(features, film):
    """``gamma[c] * features[..., c, t] + beta[c]``.

    ``gamma`` and ``beta`` are (C,) for one user or (B, C) for a batch.
    """
    f = as_tensor(features)
    c = film.gamma.shape[-1]
    if f.shape[-2] != c:
        raise ValueError(f"FiLM has {c} channels but features have {f.shape[-2]}")
    shape = (*film.gamma.shape, 1)
    return f * film.gamma.reshape(shape) + film.beta.reshape(shape)


def user_film(ps, cfg, calib_features, ctx=EVAL):
    """Calibration features (k, feature_dim, F) or None -> FiLM parameters."""
    if calib_features is None or len(calib_features) == 0:
        vectors = None
    else:
        vectors = embed_features(ps, cfg, calib_features, ctx)
    emb = aggregate(ps, cfg, vectors)
    return film_project(ps, cfg, emb.z), emb


def batch_film(ps, cfg, feature_sets, ctx=EVAL):
    """FiLM parameters (B, C) for a batch of calibration sets.

    ``feature_sets[i]`` is a (k_i, feature_dim, F) array or None.  Clips of
    equal length from all sets go through the recording encoder together.
    """
    sizes = [0 if fs is None else len(fs) for fs in feature_sets]
    vectors = {}
    by_len = {}
    for i, fs in enumerate(feature_sets):
        if sizes[i]:
            by_len.setdefault(fs.shape[-1], []).append(i)
    for members in by_len.values():
        stacked = np.concatenate([feature_sets[i] for i in members], axis=0)
        emb = embed_features(ps, cfg, stacked, ctx)
        off = 0
        for i in members:
            vectors[i] = emb[off:off + sizes[i]]
            off += sizes[i]
    zs = [aggregate(ps, cfg, vectors.get(i)).z for i in range(len(feature_sets))]
    return film_project(ps, cfg, ops.stack(zs, axis=0))


def react_forward(ps, cfg, emg, calib, mode=backbone.REGRESSION, initial_pose=None,
                  ctx=EVAL, film=None):
    """Pose for an EMG window given a user's calibration set.

    ``calib`` is a :class:`CalibrationSet` (features are encoded on the fly
    if only EMG is present), an array of pre-encoded features, or None for
    the fallback path.  ``film`` short-circuits the conditioning pathway
    with precomputed FiLM parameters.
    """
    feats = backbone.encode(ps, cfg, emg)
    if film is None:
        film, _ = user_film(ps, cfg, calibration_features(ps, cfg, calib), ctx)
    feats = modulate(feats, film)
    feats = backbone.align_frames(feats, cfg.content_samples, cfg.samples_per_frame)
    return backbone.decode(ps, cfg, feats, mode, initial_pose)


def calibration_features(ps, cfg, calib):
    if calib is None:
        return None
    if isinstance(calib, CalibrationSet):
        if calib.k == 0:
            return None
        if calib.features is not None:
            return calib.features
        from .ndcore.tensor import no_grad
        with no_grad():
            return backbone.encode(ps, cfg, calib.emg).data
    return calib


def backbone_forward(ps, cfg, emg, mode=backbone.REGRESSION, initial_pose=None):
    """The bare encoder -> decoder path, without any conditioning."""
    feats = backbone.encode(ps, cfg, emg)
    feats = backbone.align_frames(feats, cfg.content_samples, cfg.samples_per_frame)
    return backbone.decode(ps, cfg, feats, mode, initial_pose)

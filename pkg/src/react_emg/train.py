"""Loss, AdamW, learning-rate schedules and the three training phases.

``pretrain`` fits the encoder and decoder without conditioning.
``phase1`` trains only the conditioning pathway on a frozen backbone.
``phase2`` unfreezes everything with layer-wise learning-rate decay.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone, conditioning
from .config import BACKBONE_GROUPS
from .data.corpus import sample_calibration
from .data.transforms import rotate_channels, window_starts
from .hand import fingertip_loss_term
from .model import group_depth
from .ndcore import ops
from .ndcore.random import DropoutContext
from .ndcore.tensor import Tensor, as_tensor, no_grad

log = logging.getLogger(__name__)

PHASES = ("pretrain", "phase1", "phase2")
FK_WEIGHT = 0.01
NUM_SHIFTS = 16


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient."""


# ---------------------------------------------------------------- loss


def pose_loss(pred, gt, mask=None, fk_weight=FK_WEIGHT, hand=None):
    """Joint-angle MAE (rad) plus ``fk_weight`` times mean fingertip distance (mm).

    Only frames with ``mask`` true contribute.  Returns ``(loss, parts)``
    where ``parts`` holds the two unweighted terms as floats.
    """
    pred = as_tensor(pred)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    m = np.ones(pred.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        log.warning("batch has no valid label frames; loss is 0")
        return Tensor(0.0), {"mae": 0.0, "fk": 0.0, "valid": 0}
    mae = ops.abs(pred[m] - gt[m]).mean()
    fk = fingertip_loss_term(pred, gt, m, hand)
    loss = mae + fk * fk_weight if fk_weight else mae
    return loss, {"mae": mae.item(), "fk": fk.item(), "valid": int(m.sum())}


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(theta, grad, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update; returns (theta, m, v)."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return theta, m, v


def adamw_step(ps, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
    """Update every trainable parameter of ``ps`` from its ``.grad``.

    ``lr`` is a float or a callable ``name -> lr``.  Frozen parameters are
    never touched.  A non-finite gradient aborts before any parameter moves.
    """
    live = [(n, t) for n, t in ps.trainable() if t.grad is not None]
    for n, t in live:
        if not np.all(np.isfinite(t.grad)):
            raise NumericalError(f"non-finite gradient in {n}; step rejected")
    state.step += 1
    for n, t in live:
        rate = lr(n) if callable(lr) else lr
        m = state.m.get(n, np.zeros_like(t.data))
        v = state.v.get(n, np.zeros_like(t.data))
        t.data, state.m[n], state.v[n] = adamw_update(t.data, t.grad, m, v, state.step, rate,
                                                      betas, eps, weight_decay)
    return state


def lr_schedule(step, total_steps, base_lr, warmup=500):
    """Linear warmup then cosine annealing to zero at ``total_steps``."""
    if total_steps <= warmup:
        raise ValueError(f"total_steps={total_steps} must exceed warmup={warmup}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return 0.5 * base_lr * (1 + math.cos(math.pi * (step - warmup) / (total_steps - warmup)))


def layerwise_lr(depth, base_lr, factor=0.5):
    if depth < 0:
        raise ValueError("depth must be non-negative")
    return base_lr * factor ** depth


# ---------------------------------------------------------------- augmentation


def draw_shift(rng, max_shift=None):
    """Uniform over 0..15, or over -max_shift..max_shift (mod 16)."""
    if max_shift is None:
        return int(rng.integers(0, NUM_SHIFTS))
    return int(rng.integers(-max_shift, max_shift + 1)) % NUM_SHIFTS


def augment(emg, rng, max_shift=None):
    """Rotate the channels by a random shift; returns ``(emg, shift)``."""
    shift = draw_shift(rng, max_shift)
    return rotate_channels(emg, shift), shift


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "phase1"
    epochs: float = 2.0
    batch_size: int = 8
    accumulate: int = 1
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup: int = 500
    warmup_fraction: float | None = None
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    layer_decay: float = 0.5
    fk_weight: float = FK_WEIGHT
    k_max: int = 30
    augment: bool = True
    augment_max_shift: int | None = None
    window_stride: int | None = None
    modes: tuple = backbone.MODES
    seed: int = 0
    max_steps: int | None = None
    clip_seconds: float = 3.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.batch_size < 1 or self.accumulate < 1:
            raise ValueError("batch_size and accumulate must be positive")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        for m in self.modes:
            if m not in backbone.MODES:
                raise ValueError(f"unknown mode {m!r}")
        if self.k_max < 0:
            raise ValueError("k_max must be non-negative")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["modes"] = list(self.modes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("betas", "modes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def phase_defaults(phase):
    """Published settings per phase (full batch of 128 is left to the caller)."""
    if phase == "pretrain":
        return TrainConfig(phase="pretrain", epochs=10, base_lr=1e-3)
    if phase == "phase1":
        return TrainConfig(phase="phase1", epochs=2, base_lr=1e-3)
    if phase == "phase2":
        return TrainConfig(phase="phase2", epochs=2, base_lr=1e-4, warmup=100)
    raise ValueError(f"unknown phase {phase!r}")


def set_phase_trainable(ps, phase):
    if phase == "pretrain":
        ps.unfreeze(*BACKBONE_GROUPS)
        ps.freeze(conditioning.GROUP)
    elif phase == "phase1":
        ps.freeze(*BACKBONE_GROUPS)
        ps.unfreeze(conditioning.GROUP)
    else:
        ps.unfreeze(*BACKBONE_GROUPS, conditioning.GROUP)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    emg: np.ndarray          # (B, C, win) float64
    pose: np.ndarray         # (B, T, D)
    mask: np.ndarray         # (B, T)
    initial_pose: np.ndarray  # (B, D)
    users: list
    sessions: list
    shifts: list


def first_valid_pose(pose, mask):
    """Ground truth at the first valid frame (frame 0 if none is valid)."""
    idx = int(np.argmax(mask)) if mask.any() else 0
    return pose[idx]


class WindowIndex:
    """All (recording, start) training windows of a split."""

    def __init__(self, corpus, entries, cfg, stride=None):
        self.corpus = corpus
        self.cfg = cfg
        self.stride = stride or cfg.window_stride
        self.items = []
        for e in entries:
            rec = corpus.recording(e)
            for s in window_starts(rec.num_samples, cfg.window_samples, self.stride):
                first = -(-(s + cfg.context_samples) // cfg.samples_per_frame)
                if first + cfg.content_frames <= rec.num_frames:
                    self.items.append((e, s, first))
        if not self.items:
            raise ValueError("no training windows: recordings are shorter than the window")

    def __len__(self):
        return len(self.items)

    def batch(self, indices, rng=None, rotate=False, max_shift=None):
        cfg = self.cfg
        n = cfg.content_frames
        emg, pose, mask, init, users, sessions, shifts = [], [], [], [], [], [], []
        for i in indices:
            e, s, first = self.items[i]
            rec = self.corpus.recording(e)
            x = rec.emg[:, s:s + cfg.window_samples].astype(np.float64)
            shift = 0
            if rotate:
                x, shift = augment(x, rng, max_shift)
            y = rec.pose[first:first + n].astype(np.float64)
            m = rec.mask[first:first + n]
            emg.append(x)
            pose.append(y)
            mask.append(m)
            init.append(first_valid_pose(y, m))
            users.append(e.user)
            sessions.append(e.session)
            shifts.append(shift)
        return Batch(np.stack(emg), np.stack(pose), np.stack(mask), np.stack(init),
                     users, sessions, shifts)



class CalibrationCache:
    """Encoder features of calibration clips, keyed by (clip, channel shift).

    Features are computed without gradient; ``clear`` must be called
    whenever the encoder weights change.
    """

    def __init__(self, ps, cfg, corpus, clip_seconds=3.0):
        self.ps = ps
        self.cfg = cfg
        self.corpus = corpus
        self.clip_seconds = clip_seconds
        self._pools = {}
        self._feats = {}
        self.encoded = 0

    def pool(self, user):
        if user not in self._pools:
            self._pools[user] = self.corpus.calibration_pool(user, self.clip_seconds)
        return self._pools[user]

    def clear(self):
        self._feats.clear()

    def features(self, clips, shift=0):
        missing = [c for c in clips if (c.source, shift) not in self._feats]
        for i in range(0, len(missing), 32):
            chunk = missing[i:i + 32]
            x = np.stack([rotate_channels(self.corpus.clip_emg(c), shift) for c in chunk])
            with no_grad():
                f = backbone.encode(self.ps, self.cfg, x).data
            for c, fc in zip(chunk, f):
                self._feats[(c.source, shift)] = fc
            self.encoded += len(chunk)
        if not clips:
            return None
        return np.stack([self._feats[(c.source, shift)] for c in clips])


# ---------------------------------------------------------------- forward


def forward_losses(ps, cfg, batch, calib_features=None, modes=backbone.MODES,
                   fk_weight=FK_WEIGHT, ctx=None, conditioned=True):
    """Mean loss over ``modes`` for a batch; returns ``(loss, parts)``.

    ``calib_features`` is a list (one entry per sample) of (k, 64, F)
    arrays or None.  With ``conditioned=False`` the conditioning pathway is
    skipped entirely (the bare backbone).
    """
    feats = backbone.encode(ps, cfg, batch.emg)
    if conditioned:
        sets = calib_features if calib_features is not None else [None] * len(batch.users)
        film = conditioning.batch_film(ps, cfg, sets, ctx or DropoutContext())
        feats = conditioning.modulate(feats, film)
    feats = backbone.align_frames(feats, cfg.content_samples, cfg.samples_per_frame)
    total = None
    parts = {}
    for mode in modes:
        pred = backbone.decode(ps, cfg, feats, mode, batch.initial_pose)
        loss, p = pose_loss(pred, batch.pose, batch.mask, fk_weight)
        total = loss if total is None else total + loss
        parts[f"{mode}_mae"] = p["mae"]
        parts[f"{mode}_fk"] = p["fk"]
    total = total * (1.0 / len(modes))
    return total, parts


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    history: list
    steps: int
    state: OptimizerState


def _lr_function(ps, phase, lr_t, layer_decay):
    if phase != "phase2":
        return lambda name: lr_t
    depths = {n: group_depth(ps.group_of(n)) for n in ps}
    return lambda name: layerwise_lr(depths[name], lr_t, layer_decay)


def plan_steps(n_windows, tcfg):
    per_step = tcfg.batch_size * tcfg.accumulate
    steps = max(1, int(tcfg.epochs * n_windows) // per_step)
    if tcfg.max_steps is not None:
        steps = min(steps, tcfg.max_steps)
    warmup = tcfg.warmup
    if tcfg.warmup_fraction is not None:
        warmup = max(1, int(round(tcfg.warmup_fraction * steps)))
    return steps, warmup


def sample_order(n_windows, total, seed):
    """Concatenated per-epoch permutations, cut to ``total`` indices."""
    out = []
    epoch = 0
    while len(out) < total:
        out.extend(np.random.default_rng([seed, 11, epoch]).permutation(n_windows).tolist())
        epoch += 1
    return out[:total]


def train(ps, cfg, corpus, tcfg, split="train", on_step=None, state=None):
    """Run one training phase in place on ``ps``.

    Returns a :class:`TrainResult` whose history has one record per
    optimizer step.
    """
    set_phase_trainable(ps, tcfg.phase)
    index = WindowIndex(corpus, corpus.split(split), cfg, tcfg.window_stride)
    steps, warmup = plan_steps(len(index), tcfg)
    per_step = tcfg.batch_size * tcfg.accumulate
    order = sample_order(len(index), steps * per_step, tcfg.seed)
    steps_per_epoch = max(1, len(index) // per_step)
    conditioned = tcfg.phase != "pretrain"
    cache = CalibrationCache(ps, cfg, corpus, tcfg.clip_seconds) if conditioned else None
    state = state or OptimizerState()
    history = []
    warned_empty = set()
    for step in range(steps):
        if cache is not None and tcfg.phase == "phase2" and step % steps_per_epoch == 0:
            cache.clear()
        lr_t = lr_schedule(step, steps, tcfg.base_lr, warmup)
        ps.zero_grad()
        loss_sum = 0.0
        parts_sum = {}
        ks = []
        for micro in range(tcfg.accumulate):
            lo = (step * tcfg.accumulate + micro) * tcfg.batch_size
            rng = np.random.default_rng([tcfg.seed, 13, step, micro])
            batch = index.batch(order[lo:lo + tcfg.batch_size], rng, tcfg.augment,
                                tcfg.augment_max_shift)
            calib = None
            if conditioned:
                calib = []
                for user, session, shift in zip(batch.users, batch.sessions, batch.shifts):
                    pool = cache.pool(user)
                    _, clips = sample_calibration(pool, session, tcfg.k_max, rng, user)
                    if not clips and user not in warned_empty and not any(
                            c.session != session for c in pool):
                        log.warning("user %d has no calibration clips from other sessions; "
                                    "using the fallback embedding", user)
                        warned_empty.add(user)
                    ks.append(len(clips))
                    calib.append(cache.features(clips, shift))
            ctx = DropoutContext(train=True, seed=tcfg.seed, step=step * tcfg.accumulate + micro)
            loss, parts = forward_losses(ps, cfg, batch, calib, tcfg.modes, tcfg.fk_weight,
                                         ctx, conditioned)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at step {step}")
            (loss * (1.0 / tcfg.accumulate)).backward()
            loss_sum += loss.item()
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v
        adamw_step(ps, state, _lr_function(ps, tcfg.phase, lr_t, tcfg.layer_decay),
                   tcfg.betas, tcfg.eps, tcfg.weight_decay)
        rec = {"step": step, "phase": tcfg.phase, "lr": lr_t,
               "loss": loss_sum / tcfg.accumulate}
        rec.update({k: v / tcfg.accumulate for k, v in parts_sum.items()})
        if ks:
            rec["k_mean"] = float(np.mean(ks))
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    ps.zero_grad()
    return TrainResult(history, steps, state)


def write_history(path, history):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_history(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]

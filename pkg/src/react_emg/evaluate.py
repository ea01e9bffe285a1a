"""Split-wise evaluation: metrics reports, calibration sweeps and comparisons."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import backbone, conditioning
from .data.corpus import evaluation_calibration, resolve_split
from .data.transforms import window
from .hand import FINGERS, angular_mae, finger_dofs, forward_kinematics
from .ndcore.tensor import no_grad
from .train import CalibrationCache, first_valid_pose

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    split: str = "user"
    modes: tuple = backbone.MODES
    ks: tuple = (15,)
    seed: int = 0
    batch_size: int = 16
    augment: bool = False

    def __post_init__(self):
        if self.augment:
            raise ValueError("evaluation never augments; augment must be false")
        resolve_split(self.split)
        for m in self.modes:
            if m not in backbone.MODES:
                raise ValueError(f"unknown mode {m!r}; valid modes: {backbone.MODES}")
        for k in self.ks:
            if not 0 <= k <= 32:
                raise ValueError(f"k={k} outside 0..32")


@dataclass
class MetricsReport:
    split: str
    mode: str
    k: int | None
    mae_deg: float | None
    landmark_mm: float | None
    per_finger_deg: list
    windows: int
    frames: int
    valid_frames: int
    label: str = "react"
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class _Accumulator:
    abs_err: np.ndarray = field(default_factory=lambda: np.zeros(20))
    tip_err: float = 0.0
    windows: int = 0
    frames: int = 0
    valid: int = 0

    def add(self, pred, gt, mask):
        """pred, gt: (B, T, 20) radians; mask: (B, T)."""
        self.windows += pred.shape[0]
        self.frames += mask.size
        self.valid += int(mask.sum())
        if mask.any():
            p, g = pred[mask], gt[mask]
            self.abs_err += np.abs(p - g).sum(axis=0)
            self.tip_err += float(np.linalg.norm(forward_kinematics(p) - forward_kinematics(g),
                                                 axis=-1).sum())

    def report(self, split, mode, k, label, seed):
        if self.valid == 0:
            mae = landmark = None
            fingers = [None] * len(FINGERS)
        else:
            mae = float(np.degrees(self.abs_err.sum() / (20 * self.valid)))
            landmark = self.tip_err / (len(FINGERS) * self.valid)
            fingers = [float(np.degrees(self.abs_err[finger_dofs(i)].sum() / (4 * self.valid)))
                       for i in range(len(FINGERS))]
        return MetricsReport(split, mode, k, mae, landmark, fingers, self.windows, self.frames,
                             self.valid, label, seed)


def per_finger(pred, gt, mask=None):
    """Angular MAE (deg) restricted to each finger's 4 joints."""
    return [angular_mae(pred, gt, mask, finger_dofs(i)) for i in range(len(FINGERS))]


def compare(baseline, react):
    """Relative improvement ``(baseline - react) / baseline`` per metric."""
    if baseline.split != react.split or baseline.mode != react.mode:
        raise ValueError("compare needs reports of the same split and mode")

    def rel(b, r):
        if b is None or r is None or b == 0:
            return None
        return (b - r) / b

    return {
        "split": react.split,
        "mode": react.mode,
        "k": react.k,
        "mae": rel(baseline.mae_deg, react.mae_deg),
        "landmark": rel(baseline.landmark_mm, react.landmark_mm),
        "per_finger": [rel(b, r) for b, r in zip(baseline.per_finger_deg, react.per_finger_deg)],
    }


def relative_improvement(baseline_value, react_value):
    if baseline_value == 0:
        return None
    return (baseline_value - react_value) / baseline_value


# ---------------------------------------------------------------- evaluation


class _FilmCache:
    def __init__(self, ps, cfg, corpus):
        self.ps = ps
        self.cfg = cfg
        self.clips = CalibrationCache(ps, cfg, corpus)
        self._film = {}
        self.pools = {}

    def pool(self, user):
        if user not in self.pools:
            self.pools[user] = self.clips.pool(user)
        return self.pools[user]

    def film(self, calib, clips):
        key = calib.key()
        if key not in self._film:
            feats = self.clips.features(clips)
            with no_grad():
                film, _ = conditioning.user_film(self.ps, self.cfg, feats)
            self._film[key] = film
        return self._film[key]


def evaluate_grid(ps, cfg, corpus, split, modes=backbone.MODES, ks=(15,), seed=0,
                  conditioned=True, batch_size=16, label=None):
    """Reports for every (mode, k) on one split, sharing encoder passes.

    Each recording gets one seeded calibration permutation; the set for a
    given k is its first k clips, so sets are nested across ``ks``.  With
    ``conditioned=False`` the bare backbone is evaluated and ``ks`` is
    ignored (reports carry ``k=None``).
    """
    cfg_eval = EvalConfig(split=split, modes=tuple(modes), ks=tuple(ks) if conditioned else (),
                          seed=seed, batch_size=batch_size)
    tag = resolve_split(cfg_eval.split)
    ks = list(ks) if conditioned else [None]
    label = label or ("react" if conditioned else "baseline")
    acc = {(m, k): _Accumulator() for m in modes for k in ks}
    films = _FilmCache(ps, cfg, corpus) if conditioned else None
    for entry in corpus.split(tag):
        rec = corpus.recording(entry)
        wins = window(rec, cfg.window_samples, cfg.window_stride, cfg.content_samples)
        if not wins:
            continue
        film_by_k = {}
        if conditioned:
            pool = films.pool(entry.user)
            if not any(c.session != entry.session for c in pool):
                log.warning("user %d has no calibration clips outside session %d; k forced "
                            "to 0", entry.user, entry.session)
            for k in ks:
                calib, clips = evaluation_calibration(pool, entry.session, k, seed, entry.key)
                film_by_k[k] = films.film(calib, clips)
        for lo in range(0, len(wins), batch_size):
            chunk = wins[lo:lo + batch_size]
            emg = np.stack([w.emg for w in chunk]).astype(np.float64)
            gt = np.stack([w.pose for w in chunk]).astype(np.float64)
            mask = np.stack([w.mask for w in chunk])
            init = np.stack([first_valid_pose(g, m) for g, m in zip(gt, mask)])
            with no_grad():
                feats = backbone.encode(ps, cfg, emg)
                for k in ks:
                    f = feats if k is None else conditioning.modulate(feats, film_by_k[k])
                    f = backbone.align_frames(f, cfg.content_samples, cfg.samples_per_frame)
                    for m in modes:
                        pred = backbone.decode(ps, cfg, f, m, init).data
                        acc[(m, k)].add(pred, gt, mask)
    return {key: a.report(tag, key[0], key[1], label, seed) for key, a in acc.items()}


def evaluate(ps, cfg, corpus, split, mode, k=15, seed=0, conditioned=True):
    """One :class:`MetricsReport` for a split, decoder mode and calibration size."""
    grid = evaluate_grid(ps, cfg, corpus, split, (mode,), (k,), seed, conditioned)
    return next(iter(grid.values()))


def sweep_k(ps, cfg, corpus, split, mode, ks, seed=0):
    grid = evaluate_grid(ps, cfg, corpus, split, (mode,), tuple(ks), seed)
    return [grid[(mode, k)] for k in ks]


# ---------------------------------------------------------------- output


def format_table(reports):
    head = (f"{'label':<9} {'split':<16} {'mode':<10} {'k':>3} {'MAE deg':>8} {'tip mm':>8} "
            + " ".join(f"{f[:5]:>6}" for f in FINGERS) + f" {'windows':>8} {'valid':>8}")
    lines = [head, "-" * len(head)]

    def num(v, w=8, p=3):
        return f"{'n/a':>{w}}" if v is None else f"{v:>{w}.{p}f}"

    for r in reports:
        k = "-" if r.k is None else str(r.k)
        lines.append(f"{r.label:<9} {r.split:<16} {r.mode:<10} {k:>3} {num(r.mae_deg)} "
                     f"{num(r.landmark_mm)} "
                     + " ".join(num(v, 6, 2) for v in r.per_finger_deg)
                     + f" {r.windows:>8} {r.valid_frames:>8}")
    return "\n".join(lines)


def write_reports(path, reports):
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path):
    with open(path) as fh:
        return [MetricsReport.from_dict(json.loads(line)) for line in fh if line.strip()]

"""Corpus layout: generation, manifest, split construction and calibration pools."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..conditioning import CalibrationSet
from .recording import DataError, read_recording, write_recording
from .synth import recording_seed, stage_profile, synth_recording, user_profile
from .transforms import instance_normalize

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test_user", "test_stage", "test_user_stage")
EVAL_SPLITS = {"user": "test_user", "stage": "test_stage", "user_stage": "test_user_stage"}
MANIFEST = "manifest.tsv"
CORPUS_INFO = "corpus.json"
CLIP_SECONDS = 3.0


def resolve_split(name):
    """Accept either a manifest tag or a short split name (user, stage, user_stage)."""
    if name in SPLITS:
        return name
    if name in EVAL_SPLITS:
        return EVAL_SPLITS[name]
    valid = sorted(set(SPLITS) | set(EVAL_SPLITS))
    raise ValueError(f"unknown split {name!r}; valid splits: {', '.join(valid)}")


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitPlan:
    train_users: tuple
    val_users: tuple
    test_users: tuple
    seen_stages: tuple
    held_out_stages: tuple

    def tag(self, user, stage):
        seen = stage in self.seen_stages
        if user in self.train_users:
            return "train" if seen else "test_stage"
        if user in self.val_users:
            return "val"
        if user in self.test_users:
            return "test_user" if seen else "test_user_stage"
        raise KeyError(f"user {user} is not part of the plan")


def plan_splits(num_users, num_stages):
    """Assign users to train / val / test and stages to seen / held-out.

    About a sixth of the users go to each of val and test and a third of
    the stages are held out; 12 users and 6 stages give 8/2/2 and 4/2.
    """
    if num_users < 4:
        raise ValueError(f"need at least 4 users to populate train, val and test splits, "
                         f"got {num_users}")
    if num_stages < 2:
        raise ValueError(f"need at least 2 stages to hold one out, got {num_stages}")
    n_eval = max(1, round(num_users / 6))
    n_held = max(1, round(num_stages / 3))
    users = tuple(range(num_users))
    stages = tuple(range(num_stages))
    return SplitPlan(
        train_users=users[:num_users - 2 * n_eval],
        val_users=users[num_users - 2 * n_eval:num_users - n_eval],
        test_users=users[num_users - n_eval:],
        seen_stages=stages[:num_stages - n_held],
        held_out_stages=stages[num_stages - n_held:],
    )


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class Entry:
    path: str
    user: int
    stage: int
    session: int
    split: str

    @property
    def key(self):
        return (self.user, self.stage, self.session)


def write_manifest(path, entries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for e in entries:
            w.writerow([e.path, e.user, e.stage, e.session, e.split])


def read_manifest(path):
    entries = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(row)}")
            try:
                user, stage, session = (int(v) for v in row[1:4])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer id ({exc})") from None
            if row[4] not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split tag {row[4]!r}")
            entries.append(Entry(row[0], user, stage, session, row[4]))
    return entries


def check_split_hygiene(entries):
    """Raise if any held-out user or stage also appears in training data."""
    train_users = {e.user for e in entries if e.split == "train"}
    train_stages = {e.stage for e in entries if e.split == "train"}
    for e in entries:
        bad_user = e.split in ("test_user", "test_user_stage", "val") and e.user in train_users
        bad_stage = e.split in ("test_stage", "test_user_stage") and e.stage in train_stages
        if bad_user or bad_stage:
            raise DataError(f"split leak: {e.path} ({e.split}) shares its "
                            f"{'user' if bad_user else 'stage'} with the train split")


# ---------------------------------------------------------------- generation


def recording_name(user, stage, session):
    return f"u{user:03d}_g{stage:02d}_s{session:02d}.reb"


def generate_corpus(out_dir, users=12, stages=6, sessions=3, seconds=20.0, seed=0):
    """Write REB1 files, ``manifest.tsv`` and ``corpus.json`` into ``out_dir``."""
    plan = plan_splits(users, stages)
    if sessions < 1:
        raise ValueError("need at least one session per user and stage")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    stage_profiles = [stage_profile(seed, g) for g in range(stages)]
    for u in range(users):
        profile = user_profile(seed, u)
        for g in range(stages):
            for s in range(sessions):
                rec = synth_recording(profile, stage_profiles[g], seconds,
                                      recording_seed(seed, u, g, s), session_id=s)
                name = recording_name(u, g, s)
                write_recording(out / name, rec)
                entries.append(Entry(name, u, g, s, plan.tag(u, g)))
    check_split_hygiene(entries)
    write_manifest(out / MANIFEST, entries)
    info = {"users": users, "stages": stages, "sessions": sessions, "seconds": seconds,
            "seed": seed, "plan": {k: list(v) for k, v in plan.__dict__.items()}}
    (out / CORPUS_INFO).write_text(json.dumps(info, indent=2) + "\n")
    return entries


# ---------------------------------------------------------------- loading


@dataclass(frozen=True)
class ClipRef:
    """A fixed-length calibration clip cut from one recording."""

    user: int
    stage: int
    session: int
    start: int
    length: int

    @property
    def source(self):
        return (self.user, self.stage, self.session, self.start)


class Corpus:
    """A generated corpus on disk with lazily loaded, normalized recordings."""

    def __init__(self, root, entries=None):
        self.root = Path(root)
        manifest = self.root / MANIFEST
        if entries is None:
            if not manifest.exists():
                raise DataError(f"no {MANIFEST} in {self.root}")
            entries = read_manifest(manifest)
        if not entries:
            raise DataError(f"empty manifest in {self.root}")
        check_split_hygiene(entries)
        self.entries = list(entries)
        self._by_key = {e.key: e for e in self.entries}
        self._cache = {}

    def __len__(self):
        return len(self.entries)

    @property
    def splits(self):
        return sorted({e.split for e in self.entries})

    def split(self, name):
        tag = resolve_split(name)
        out = [e for e in self.entries if e.split == tag]
        if not out:
            raise DataError(f"split {tag!r} has no recordings in {self.root}")
        return out

    def recording(self, entry):
        """The recording with its EMG replaced by the instance-normalized copy (f32)."""
        if isinstance(entry, tuple):
            entry = self._by_key[entry]
        rec = self._cache.get(entry.key)
        if rec is None:
            rec = read_recording(self.root / entry.path)
            if rec.key != entry.key:
                raise DataError(f"{entry.path}: header ids {rec.key} disagree with manifest "
                                f"{entry.key}")
            rec.emg = instance_normalize(rec.emg).astype(np.float32)
            self._cache[entry.key] = rec
        return rec

    def drop_cache(self):
        self._cache.clear()

    # ------------------------------------------------------------ calibration

    def home_split(self, user):
        """The split holding the user's seen-stage recordings."""
        tags = {e.split for e in self.entries if e.user == user}
        for t in ("train", "val", "test_user"):
            if t in tags:
                return t
        return None

    def calibration_pool(self, user, clip_seconds=CLIP_SECONDS):
        """All calibration clips of a user, cut from their seen-stage recordings."""
        home = self.home_split(user)
        pool = []
        for e in self.entries:
            if e.user != user or e.split != home:
                continue
            rec = self.recording(e)
            n = int(round(clip_seconds * rec.sample_rate))
            for start in range(0, rec.num_samples - n + 1, n):
                pool.append(ClipRef(e.user, e.stage, e.session, start, n))
        return pool

    def clip_emg(self, clip):
        rec = self.recording((clip.user, clip.stage, clip.session))
        return instance_normalize(rec.emg[:, clip.start:clip.start + clip.length])


def available_clips(pool, exclude_session):
    return [c for c in pool if c.session != exclude_session]


def _calibration_set(user, clips):
    return CalibrationSet(user_id=user, sessions=[c.session for c in clips],
                          sources=[c.source for c in clips])


def sample_calibration(pool, exclude_session, k_max=30, rng=None, user=None):
    """Training-time draw: k ~ Uniform{0..min(k_max, available)} without replacement.

    Returns ``(CalibrationSet, clips)``; the set carries no EMG yet.
    """
    rng = rng if rng is not None else np.random.default_rng()
    avail = available_clips(pool, exclude_session)
    k = int(rng.integers(0, min(k_max, len(avail)) + 1))
    idx = rng.choice(len(avail), size=k, replace=False) if k else []
    clips = [avail[i] for i in idx]
    uid = user if user is not None else (clips[0].user if clips else -1)
    return _calibration_set(uid, clips), clips


def evaluation_calibration(pool, exclude_session, k, seed, key):
    """Evaluation draw for one recording: a seeded permutation of the
    available clips truncated to k, so smaller k gives a prefix."""
    avail = available_clips(pool, exclude_session)
    if k > len(avail):
        log.warning("recording %s: only %d calibration clips available, k reduced from %d",
                    key, len(avail), k)
        k = len(avail)
    rng = np.random.default_rng([seed, 7, *key])
    order = rng.permutation(len(avail))
    clips = [avail[i] for i in order[:k]]
    for c in clips:
        if c.session == exclude_session:
            raise AssertionError("calibration clip shares the evaluated session")
    return _calibration_set(key[0], clips), clips

"""Synthetic multi-user EMG and hand-pose generator.

Poses are per-joint raised cosines.  Each joint drives a non-negative
activation ``|dy/dt| + 0.05`` that amplitude-modulates band-limited noise
carriers, mixed onto 16 electrodes through a user-specific matrix.  Users
differ in cross-talk (mixing), per-electrode gain, noise floor and a
small rotation of the electrode band.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..hand import NUM_DOF
from .recording import Recording

NUM_CHANNELS = 16
SAMPLE_RATE = 2000
POSE_RATE = 50
TONIC = 0.05
INVALID_FRACTION = 0.02
CARRIER_BAND = (20.0, 450.0)

# Per-joint motion range in radians, slot order abduction, MCP, PIP, DIP.
_SLOT_RANGE = np.array([0.35, 1.4, 1.6, 1.2])
JOINT_RANGE = np.tile(_SLOT_RANGE, 5)
JOINT_RANGE[:4] = [0.6, 0.9, 1.0, 1.2]  # thumb

# Fraction of joints a stage moves; the others hold still at zero.
ACTIVE_FRACTION = 0.4
NOISE_RANGE = (0.1, 1.0)
# Log-normal spread of each user's mixing entries around the template.
MIXING_SPREAD = 0.35
# Range of the Gaussian coupling widths, in electrode spacings.
MIXING_WIDTH = (0.7, 1.3)

# Band rotations seen across users, with their probabilities.
ROTATIONS = (15, 0, 1)
ROTATION_PROBS = (0.25, 0.5, 0.25)


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    mixing: np.ndarray    # (16, 20), non-negative
    gain: np.ndarray      # (16,), in [0.5, 2]
    rotation: int         # electrode band shift in 0..15
    noise: float          # white-noise std

    def __post_init__(self):
        if np.any(self.mixing < 0):
            raise ValueError("mixing entries must be non-negative")
        if np.any((self.gain < 0.5) | (self.gain > 2.0)):
            raise ValueError("gains must lie in [0.5, 2]")
        if not 0 <= self.rotation < NUM_CHANNELS:
            raise ValueError("rotation must be in 0..15")


@dataclass(frozen=True)
class StageProfile:
    stage_id: int
    amplitude: np.ndarray  # (20,) rad, in [0, JOINT_RANGE]
    frequency: np.ndarray  # (20,) Hz, in [0.25, 1.5]
    phase: np.ndarray      # (20,) rad


def mixing_template(corpus_seed):
    """Population-average electrode-to-joint coupling.

    Each joint's muscle sits at a position around the band and couples to
    nearby electrodes with a Gaussian falloff.
    """
    rng = np.random.default_rng([corpus_seed, 0])
    centers = (np.arange(NUM_DOF) * NUM_CHANNELS / NUM_DOF
               + rng.uniform(-0.5, 0.5, NUM_DOF)) % NUM_CHANNELS
    widths = rng.uniform(*MIXING_WIDTH, NUM_DOF)
    c = np.arange(NUM_CHANNELS)[:, None]
    d = np.abs(c - centers[None, :])
    d = np.minimum(d, NUM_CHANNELS - d)
    return np.exp(-0.5 * (d / widths) ** 2)


def user_profile(corpus_seed, user_id):
    rng = np.random.default_rng([corpus_seed, 1, user_id])
    template = mixing_template(corpus_seed)
    mixing = template * np.exp(MIXING_SPREAD * rng.standard_normal(template.shape))
    gain = np.exp(rng.uniform(np.log(0.5), np.log(2.0), NUM_CHANNELS))
    rotation = int(rng.choice(ROTATIONS, p=ROTATION_PROBS))
    noise = float(np.exp(rng.uniform(*np.log(NOISE_RANGE))))
    return UserProfile(user_id, mixing, gain, rotation, noise)


def stage_profile(corpus_seed, stage_id, active_fraction=None):
    """A gesture stage moving a random subset of joints."""
    rng = np.random.default_rng([corpus_seed, 2, stage_id])
    frac = ACTIVE_FRACTION if active_fraction is None else active_fraction
    active = rng.random(NUM_DOF) < frac
    return StageProfile(
        stage_id=stage_id,
        amplitude=np.where(active, rng.uniform(0.4, 1.0, NUM_DOF), 0.0) * JOINT_RANGE,
        frequency=rng.uniform(0.25, 1.5, NUM_DOF),
        phase=rng.uniform(0.0, 2 * np.pi, NUM_DOF),
    )


def rotate_index(c, shift):
    return (np.asarray(c) + shift) % NUM_CHANNELS


def band_limited_noise(rng, channels, length, band=CARRIER_BAND, rate=SAMPLE_RATE):
    """Unit-variance Gaussian noise restricted to ``band`` Hz (FFT mask)."""
    white = rng.standard_normal((channels, length))
    spec = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(length, 1.0 / rate)
    spec[:, (freqs < band[0]) | (freqs > band[1])] = 0.0
    out = np.fft.irfft(spec, n=length, axis=1)
    std = out.std(axis=1, keepdims=True)
    return out / np.where(std > 0, std, 1.0)


def pose_trajectory(stage, t):
    """(len(t), 20) raised-cosine joint angles at times ``t`` seconds."""
    arg = 2 * np.pi * stage.frequency * np.asarray(t)[:, None] + stage.phase
    return stage.amplitude * (0.5 - 0.5 * np.cos(arg))


def activation(stage, t):
    """``|dy/dt| + 0.05`` per joint at times ``t``."""
    arg = 2 * np.pi * stage.frequency * np.asarray(t)[:, None] + stage.phase
    speed = np.abs(stage.amplitude * np.pi * stage.frequency * np.sin(arg))
    return speed + TONIC


def synth_recording(user, stage, duration_s, seed, session_id=0,
                    invalid_fraction=INVALID_FRACTION):
    """Generate one synchronized EMG / pose recording.

    The movement starts at a seed-dependent offset into the stage's cycle,
    so sessions of the same stage are not copies of each other.
    """
    if duration_s < 2:
        raise ValueError(f"duration must be at least 2 s, got {duration_s}")
    rng = np.random.default_rng(seed)
    frames = int(round(duration_s * POSE_RATE))
    spf = SAMPLE_RATE // POSE_RATE
    samples = frames * spf
    t0 = rng.uniform(0.0, 20.0)
    pose = pose_trajectory(stage, t0 + np.arange(frames) / POSE_RATE)
    act = activation(stage, t0 + np.arange(samples) / SAMPLE_RATE)  # (L, 20)
    rows = rotate_index(np.arange(NUM_CHANNELS), user.rotation)
    drive = act @ user.mixing[rows].T                               # (L, 16)
    carrier = band_limited_noise(rng, NUM_CHANNELS, samples)
    emg = user.gain[:, None] * drive.T * carrier
    emg += user.noise * rng.standard_normal(emg.shape)
    mask = rng.random(frames) >= invalid_fraction
    return Recording(emg=emg, pose=pose, mask=mask, user_id=user.user_id,
                     stage_id=stage.stage_id, session_id=session_id,
                     sample_rate=SAMPLE_RATE, pose_rate=POSE_RATE)


def recording_seed(corpus_seed, user_id, stage_id, session_id):
    return np.random.SeedSequence([corpus_seed, 3, user_id, stage_id, session_id])

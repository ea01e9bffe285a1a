"""Per-recording normalization, channel rotation and windowing."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NORM_EPS = 1e-8


def instance_normalize(emg):
    """Zero mean, unit population std per channel; constant channels -> 0."""
    x = np.asarray(emg, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("instance normalization needs at least 2 samples")
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / (sd + NORM_EPS)


def rotate_channels(emg, shift):
    """``out[c] = in[(c + shift) mod C]`` along the channel axis (-2)."""
    x = np.asarray(emg)
    c = x.shape[-2]
    return x[..., (np.arange(c) + shift) % c, :]


@dataclass
class Window:
    emg: np.ndarray        # (C, win)
    pose: np.ndarray       # (frames, D)
    mask: np.ndarray       # (frames,)
    start: int             # first EMG sample
    first_frame: int       # first label frame


def window_starts(length, win, stride):
    if length < win:
        return []
    return list(range(0, (length - win) // stride * stride + 1, stride))


def label_frames(start, win, content, samples_per_frame=40):
    """Pose frames whose sampling instant lies in the content region.

    Frame m is sampled at EMG sample ``m * samples_per_frame``; the content
    region is ``[start + win - content, start + win)``.
    """
    first = -(-(start + win - content) // samples_per_frame)
    return first, content // samples_per_frame


def window(rec, win=11790, stride=2000, content=10000, emg=None):
    """Slice a recording into strided windows with aligned labels.

    ``emg`` substitutes a (normalized) copy of the recording's EMG.
    """
    x = rec.emg if emg is None else emg
    spf = rec.samples_per_frame
    starts = window_starts(x.shape[1], win, stride)
    if not starts:
        log.warning("recording %s has %d samples, shorter than the %d-sample window; "
                    "no windows produced", rec.key, x.shape[1], win)
        return []
    out = []
    for s in starts:
        first, n = label_frames(s, win, content, spf)
        if first + n > rec.num_frames:
            break
        out.append(Window(x[:, s:s + win], rec.pose[first:first + n],
                          rec.mask[first:first + n], s, first))
    return out

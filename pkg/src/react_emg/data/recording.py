"""In-memory recordings and the REB1 binary file format.

Layout (little-endian)::

    magic         4s   b"REB1"
    format_version u32
    num_channels   u32
    sample_rate_hz u32
    num_samples    u64
    pose_rate_hz   u32
    num_pose_frames u64
    num_dof        u32
    user_id        u32
    stage_id       u32
    session_id     u32
    EMG            f32[num_channels * num_samples]   channel-major
    pose           f32[num_pose_frames * num_dof]    frame-major
    mask           u8[num_pose_frames]               0 / 1
    crc32          u32                               of the payload bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"REB1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIQIQIIII")
_FIELDS = ("magic", "format_version", "num_channels", "sample_rate_hz", "num_samples",
           "pose_rate_hz", "num_pose_frames", "num_dof", "user_id", "stage_id", "session_id")
_OFFSETS = dict(zip(_FIELDS, (0, 4, 8, 12, 16, 24, 28, 36, 40, 44, 48)))
HEADER_SIZE = _HEADER.size


class DataError(ValueError):
    """Problem with corpus contents: files, manifest or splits."""


class RecordingFormatError(DataError):
    """A REB1 file failed validation; ``offset`` and ``field`` locate the problem."""

    def __init__(self, message, offset, field_name, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (field {field_name!r} at byte offset {offset})")
        self.offset = offset
        self.field = field_name
        self.path = path


@dataclass
class Recording:
    """One session: EMG (C, L) at ``sample_rate``, pose (T, D) at ``pose_rate``."""

    emg: np.ndarray
    pose: np.ndarray
    mask: np.ndarray
    user_id: int = 0
    stage_id: int = 0
    session_id: int = 0
    sample_rate: int = 2000
    pose_rate: int = 50
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.emg = np.asarray(self.emg, dtype=np.float32)
        self.pose = np.asarray(self.pose, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.emg.ndim != 2 or self.pose.ndim != 2:
            raise ValueError("emg must be (channels, samples) and pose (frames, dof)")
        if self.mask.shape != (self.pose.shape[0],):
            raise ValueError("mask needs one entry per pose frame")

    @property
    def num_channels(self):
        return self.emg.shape[0]

    @property
    def num_samples(self):
        return self.emg.shape[1]

    @property
    def num_frames(self):
        return self.pose.shape[0]

    @property
    def samples_per_frame(self):
        return self.sample_rate // self.pose_rate

    @property
    def key(self):
        return (self.user_id, self.stage_id, self.session_id)


def _payload(rec):
    return b"".join((
        np.ascontiguousarray(rec.emg, dtype="<f4").tobytes(),
        np.ascontiguousarray(rec.pose, dtype="<f4").tobytes(),
        rec.mask.astype(np.uint8).tobytes(),
    ))


def encode_recording(rec):
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, rec.emg.shape[0], rec.sample_rate,
                          rec.emg.shape[1], rec.pose_rate, rec.pose.shape[0], rec.pose.shape[1],
                          rec.user_id, rec.stage_id, rec.session_id)
    payload = _payload(rec)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def write_recording(path, rec):
    if rec.pose.shape[0] == 0:
        raise ValueError("refusing to write a recording without pose frames")
    Path(path).write_bytes(encode_recording(rec))


def decode_recording(buf, path=None):
    def fail(msg, fld, offset=None):
        raise RecordingFormatError(msg, _OFFSETS.get(fld, 0) if offset is None else offset,
                                   fld, path)

    if len(buf) < HEADER_SIZE:
        fail(f"file truncated: {len(buf)} bytes, header needs {HEADER_SIZE}", "header", len(buf))
    h = dict(zip(_FIELDS, _HEADER.unpack_from(buf, 0)))
    if h["magic"] != MAGIC:
        fail(f"bad magic {h['magic']!r}, expected {MAGIC!r}", "magic")
    if h["format_version"] != FORMAT_VERSION:
        fail(f"unsupported format_version {h['format_version']}", "format_version")
    if h["num_pose_frames"] == 0:
        fail("empty pose section", "num_pose_frames")
    if h["num_dof"] == 0:
        fail("num_dof is 0", "num_dof")
    if h["pose_rate_hz"] == 0 or h["sample_rate_hz"] == 0:
        fail("zero sampling rate", "pose_rate_hz" if h["pose_rate_hz"] == 0 else "sample_rate_hz")
    if h["sample_rate_hz"] % h["pose_rate_hz"]:
        fail(f"sample rate {h['sample_rate_hz']} is not a multiple of pose rate "
             f"{h['pose_rate_hz']}", "sample_rate_hz")
    if (h["num_channels"] == 0) != (h["num_samples"] == 0):
        fail("num_channels and num_samples must both be zero for pose-only files",
             "num_channels" if h["num_channels"] == 0 else "num_samples")
    if h["num_channels"] and (h["num_samples"]
                              != h["num_pose_frames"] * (h["sample_rate_hz"] // h["pose_rate_hz"])):
        fail(f"num_samples {h['num_samples']} inconsistent with {h['num_pose_frames']} pose "
             f"frames at {h['sample_rate_hz']}/{h['pose_rate_hz']} Hz", "num_samples")
    n_emg = h["num_channels"] * h["num_samples"]
    n_pose = h["num_pose_frames"] * h["num_dof"]
    n_payload = 4 * n_emg + 4 * n_pose + h["num_pose_frames"]
    expected = HEADER_SIZE + n_payload + 4
    if len(buf) < expected:
        fail(f"file truncated: {len(buf)} bytes, expected {expected}", "payload", len(buf))
    if len(buf) > expected:
        fail(f"{len(buf) - expected} trailing bytes after checksum", "crc32", expected)
    payload = buf[HEADER_SIZE:HEADER_SIZE + n_payload]
    (crc,) = struct.unpack_from("<I", buf, HEADER_SIZE + n_payload)
    if crc != zlib.crc32(payload):
        fail(f"payload checksum mismatch (stored {crc:#010x})", "crc32", HEADER_SIZE + n_payload)
    off = 0
    emg = np.frombuffer(payload, dtype="<f4", count=n_emg, offset=off)
    off += 4 * n_emg
    pose = np.frombuffer(payload, dtype="<f4", count=n_pose, offset=off)
    off += 4 * n_pose
    mask = np.frombuffer(payload, dtype=np.uint8, count=h["num_pose_frames"], offset=off)
    if np.any(mask > 1):
        bad = int(np.argmax(mask > 1))
        fail(f"mask byte {mask[bad]} is not 0/1", "mask", HEADER_SIZE + off + bad)
    return Recording(
        emg=emg.reshape(h["num_channels"], h["num_samples"]).astype(np.float32),
        pose=pose.reshape(h["num_pose_frames"], h["num_dof"]).astype(np.float32),
        mask=mask.astype(bool),
        user_id=h["user_id"], stage_id=h["stage_id"], session_id=h["session_id"],
        sample_rate=h["sample_rate_hz"], pose_rate=h["pose_rate_hz"],
    )


def read_recording(path):
    return decode_recording(Path(path).read_bytes(), path=str(path))


def pose_only(pose, mask=None, user_id=0, stage_id=0, session_id=0, sample_rate=2000,
              pose_rate=50):
    """A Recording with no EMG, used for predicted-pose output files."""
    pose = np.asarray(pose, dtype=np.float32)
    if mask is None:
        mask = np.ones(pose.shape[0], dtype=bool)
    return Recording(emg=np.zeros((0, 0), dtype=np.float32), pose=pose, mask=mask,
                     user_id=user_id, stage_id=stage_id, session_id=session_id,
                     sample_rate=sample_rate, pose_rate=pose_rate)

"""Model checkpoints: float32 parameter arrays plus a JSON metadata block.

Training runs in float64; values are rounded to float32 on save, so a
load after save reproduces the float32 values exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

from . import __version__
from .config import ModelConfig
from .hand import HandModel, default_hand
from .model import build_params

FORMAT_VERSION = 1
_META = "__meta__"


class CheckpointError(ValueError):
    """Missing, corrupt or incompatible checkpoint."""


def payload_checksum(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, ps, cfg, provenance=None, hand=None):
    arrays = {n: t.data.astype(np.float32) for n, t in ps.items()}
    meta = {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "model": cfg.to_dict(),
        "hand": (hand or default_hand()).to_dict(),
        "groups": {n: ps.group_of(n) for n in ps},
        "provenance": provenance or {},
        "checksum": payload_checksum(arrays),
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays, **{_META: np.array(json.dumps(meta, sort_keys=True))})
    Path(path).write_bytes(buf.getvalue())
    return meta


def load_checkpoint(path, expect_config=None):
    """Return ``(params, config, meta)``; parameters come back as float64."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z[_META]))
            arrays = {k: z[k] for k in z.files if k != _META}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {meta.get('format_version')}")
    if payload_checksum(arrays) != meta.get("checksum"):
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    cfg = ModelConfig.from_dict(meta["model"])
    if expect_config is not None and expect_config.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in cfg.to_dict().items() if expect_config.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: model hyperparameters differ from the run config: {diff}")
    ps = build_params(cfg)
    try:
        ps.load_state_dict({k: v.astype(np.float64) for k, v in arrays.items()})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return ps, cfg, meta


def checkpoint_hand(meta):
    return HandModel.from_dict(meta["hand"])

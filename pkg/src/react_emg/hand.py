"""20-DOF forward-kinematics hand and the pose metrics built on it.

DOF layout, 4 per finger in the order thumb, index, middle, ring, pinky:
``[MCP abduction, MCP flexion, PIP flexion, DIP flexion]``, so joint
``4 * finger + slot``.  Positive flexion curls toward ``-normal`` (the palm
side); positive abduction rotates the finger direction about ``normal``
(right-handed).  Lengths are in mm, angles in radians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndcore import ops
from .ndcore.tensor import Tensor, as_tensor

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
JOINTS = ("mcp_abduction", "mcp_flexion", "pip_flexion", "dip_flexion")
DOF_NAMES = tuple(f"{f}.{j}" for f in FINGERS for j in JOINTS)
NUM_DOF = 20


def dof_index(finger, joint):
    return 4 * FINGERS.index(finger) + JOINTS.index(joint)


def finger_dofs(finger):
    i = FINGERS.index(finger) if isinstance(finger, str) else finger
    return list(range(4 * i, 4 * i + 4))


@dataclass(frozen=True)
class HandModel:
    base_points: np.ndarray      # (5, 3) mm, MCP joint positions
    base_directions: np.ndarray  # (5, 3) unit, finger direction at rest
    normal: np.ndarray           # (3,) unit palm normal
    bone_lengths: np.ndarray     # (5, 3) mm, proximal / middle / distal

    def __post_init__(self):
        for name in ("base_points", "base_directions", "bone_lengths"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != ((5, 3)):
                raise ValueError(f"{name} must have shape (5, 3), got {arr.shape}")
            object.__setattr__(self, name, arr)
        n = np.asarray(self.normal, dtype=np.float64)
        object.__setattr__(self, "normal", n)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("palm normal must be unit length")
        if np.any(np.abs(np.linalg.norm(self.base_directions, axis=1) - 1.0) > 1e-9):
            raise ValueError("base directions must be unit length")
        if np.any(np.abs(self.base_directions @ n) > 1e-9):
            raise ValueError("base directions must lie in the palm plane")
        if np.any(self.bone_lengths <= 0):
            raise ValueError("bone lengths must be positive")

    @property
    def lateral_directions(self):
        """``normal x direction`` per finger: where positive abduction points."""
        return np.cross(self.normal, self.base_directions)

    def to_dict(self):
        return {
            "base_points": self.base_points.tolist(),
            "base_directions": self.base_directions.tolist(),
            "normal": self.normal.tolist(),
            "bone_lengths": self.bone_lengths.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def default_hand():
    """Average adult right hand, palm in the x-y plane, fingers along +y."""
    return HandModel(
        base_points=np.array([
            [-32.0, 30.0, 0.0],
            [-22.0, 88.0, 0.0],
            [-2.0, 92.0, 0.0],
            [17.0, 88.0, 0.0],
            [34.0, 80.0, 0.0],
        ]),
        base_directions=np.array([
            _unit([-0.8, 1.0, 0.0]),
            _unit([-0.08, 1.0, 0.0]),
            [0.0, 1.0, 0.0],
            _unit([0.08, 1.0, 0.0]),
            _unit([0.18, 1.0, 0.0]),
        ]),
        normal=np.array([0.0, 0.0, 1.0]),
        bone_lengths=np.array([
            [46.0, 32.0, 27.0],
            [40.0, 23.0, 19.0],
            [45.0, 27.0, 20.0],
            [42.0, 26.0, 20.0],
            [33.0, 19.0, 18.0],
        ]),
    )


# ---------------------------------------------------------------- kinematics


def forward_kinematics(angles, hand=None):
    """Fingertip positions (..., 5, 3) in mm for joint angles (..., 20).

    Works on Tensors (differentiable) or arrays.
    """
    hand = hand or default_hand()
    a = as_tensor(angles)
    if a.shape[-1] != NUM_DOF:
        raise ValueError(f"expected {NUM_DOF} joint angles, got {a.shape[-1]}")
    lead = a.shape[:-1]
    q = a.reshape(-1, 5, 4)
    abd = q[:, :, 0]
    phi1 = q[:, :, 1]
    phi2 = phi1 + q[:, :, 2]
    phi3 = phi2 + q[:, :, 3]
    lens = hand.bone_lengths
    reach = (ops.cos(phi1) * lens[:, 0] + ops.cos(phi2) * lens[:, 1]
             + ops.cos(phi3) * lens[:, 2])
    lift = (ops.sin(phi1) * lens[:, 0] + ops.sin(phi2) * lens[:, 1]
            + ops.sin(phi3) * lens[:, 2])
    d = hand.base_directions
    e = hand.lateral_directions
    u = ops.cos(abd).reshape(-1, 5, 1) * d + ops.sin(abd).reshape(-1, 5, 1) * e
    tips = u * reach.reshape(-1, 5, 1) - lift.reshape(-1, 5, 1) * hand.normal + hand.base_points
    out = tips.reshape(*lead, 5, 3)
    return out if isinstance(angles, Tensor) else out.data


def joint_positions(angles, hand=None):
    """All 4 points per finger (MCP, PIP, DIP, tip) as (..., 5, 4, 3); arrays only."""
    hand = hand or default_hand()
    q = np.asarray(angles, dtype=np.float64).reshape(-1, 5, 4)
    u = (np.cos(q[..., 0])[..., None] * hand.base_directions
         + np.sin(q[..., 0])[..., None] * hand.lateral_directions)
    phis = np.cumsum(q[..., 1:], axis=-1)
    pts = [np.broadcast_to(hand.base_points, u.shape)]
    for s in range(3):
        step = (u * np.cos(phis[..., s])[..., None]
                - np.sin(phis[..., s])[..., None] * hand.normal) * hand.bone_lengths[:, s, None]
        pts.append(pts[-1] + step)
    return np.stack(pts, axis=-2).reshape(*np.shape(angles)[:-1], 5, 4, 3)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Metric:
    """A metric value with its unit; ``value`` is None when no label was valid."""

    value: float | None
    unit: str
    count: int

    @property
    def valid(self):
        return self.value is not None

    def __float__(self):
        if self.value is None:
            raise ValueError("no-valid-labels: metric undefined")
        return float(self.value)

    def __str__(self):
        return "no-valid-labels" if self.value is None else f"{self.value:.4f} {self.unit}"


def _frame_mask(pred, mask):
    pred = np.asarray(pred)
    if mask is None:
        return np.ones(pred.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match frames {pred.shape[:-1]}")
    return mask


def _check_shapes(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"prediction shape {np.shape(pred)} != ground truth {np.shape(gt)}")


def angular_mae(pred, gt, mask=None, joints=None):
    """Mean |pred - gt| over valid frames (and selected joints), in degrees."""
    _check_shapes(pred, gt)
    m = _frame_mask(pred, mask)
    p = np.asarray(pred)[m]
    g = np.asarray(gt)[m]
    if joints is not None:
        p = p[:, joints]
        g = g[:, joints]
    if p.size == 0:
        return Metric(None, "deg", 0)
    return Metric(float(np.degrees(np.abs(p - g).mean())), "deg", int(p.size))


def landmark_distance(pred, gt, mask=None, hand=None):
    """Mean fingertip Euclidean distance over valid frames, in mm."""
    _check_shapes(pred, gt)
    m = _frame_mask(pred, mask)
    p = np.asarray(pred)[m]
    g = np.asarray(gt)[m]
    if p.shape[0] == 0:
        return Metric(None, "mm", 0)
    d = np.linalg.norm(forward_kinematics(p, hand) - forward_kinematics(g, hand), axis=-1)
    return Metric(float(d.mean()), "mm", int(d.size))


def fingertip_loss_term(pred, gt, mask=None, hand=None):
    """Differentiable mean fingertip distance (mm) over valid frames.

    With no valid frames the term is a constant 0.
    """
    pred = as_tensor(pred)
    gtd = np.asarray(getattr(gt, "data", gt))
    m = _frame_mask(pred.data, mask)
    if not m.any():
        return Tensor(0.0)
    tips = forward_kinematics(pred[m], hand)
    ref = forward_kinematics(gtd[m], hand)
    return ops.norm(tips - ref, axis=-1).mean()

"""Small shared types: poses, effector tags, actions and grid rounding."""

from __future__ import annotations

import enum
import math
from typing import NamedTuple

import numpy as np


class Effector(enum.IntEnum):
    PICK = 0
    PLACE = 1
    # reserved tag for blank history entries, never executable
    NONE = 2


EFFECTOR_ACTIONS = (Effector.PICK, Effector.PLACE)


class Pose(NamedTuple):
    """Discretized SE(2) target: cell indices plus an orientation index.

    Orientation ``o`` of a grid with ``n`` orientations means an angle of
    ``o * 180 / n`` degrees (the gripper is symmetric under half turns).
    Indices outside ``[0, n)`` are allowed for bookkeeping under grid
    symmetries; :func:`orientation_angle` handles them.
    """

    x: int
    y: int
    orientation: int = 0


class Action(NamedTuple):
    pose: Pose
    effector: Effector


def orientation_angle(orientation: int, num_orientations: int) -> float:
    """Angle in radians of an orientation index."""
    return orientation * math.pi / num_orientations


def round_half_away(values):
    """Nearest-integer rounding with ties away from zero.

    Values are snapped to 1e-9 first so that trigonometric noise cannot flip
    a tie. The rule is odd-symmetric, which keeps 90 degree grid rotations
    exact.
    """
    v = np.round(np.asarray(values, dtype=np.float64), 9)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def rotate(u, v, angle: float):
    """Rotate offsets ``(u, v)`` by ``angle`` in (x=column, y=row) coordinates."""
    c, s = math.cos(angle), math.sin(angle)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return u * c - v * s, u * s + v * c


def circular_distance(a: int, b: int, n: int) -> int:
    d = (a - b) % n
    return min(d, n - d)

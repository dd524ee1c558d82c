"""Deictic image mapping: pose-aligned crops and the abstract state/action maps.

A motion target is described by what the world looks like around it. The
crop is a ``window x window`` patch centred on the pose and rotated into the
pose frame; cells outside the image read as ``padding_value``. Rotation uses
nearest-neighbour sampling from patch-cell centres, so multiples of 90
degrees are exact.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .core import Action, Effector, Pose, orientation_angle, rotate, round_half_away

Patch = np.ndarray


@dataclass(frozen=True)
class CropSpec:
    window: int = 3
    padding_value: float = 0.0
    interpolation: Literal["nearest", "bilinear"] = "nearest"

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"crop window must be odd and >= 1, got {self.window}")
        if self.interpolation not in ("nearest", "bilinear"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    @property
    def half(self) -> int:
        return self.window // 2


@dataclass(frozen=True)
class DeicticConfig:
    k: int = 2
    crop: CropSpec = field(default_factory=CropSpec)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("history length k must be >= 1")


@functools.lru_cache(maxsize=None)
def _patch_coords(window: int, orientation: int, num_orientations: int) -> tuple[np.ndarray, np.ndarray]:
    """Real-valued source offsets (dx, dy) of every patch cell, row-major."""
    h = window // 2
    v, u = np.mgrid[-h:h + 1, -h:h + 1]
    dx, dy = rotate(u.ravel(), v.ravel(), orientation_angle(orientation, num_orientations))
    dx.setflags(write=False)
    dy.setflags(write=False)
    return dx, dy


@functools.lru_cache(maxsize=None)
def crop_offsets(window: int, orientation: int, num_orientations: int) -> np.ndarray:
    """Nearest-neighbour integer source offsets, shape ``(window*window, 2)``."""
    dx, dy = _patch_coords(window, orientation, num_orientations)
    out = np.stack([round_half_away(dx), round_half_away(dy)], axis=1)
    out.setflags(write=False)
    return out


def _gather(image: np.ndarray, xs: np.ndarray, ys: np.ndarray, pad: float) -> np.ndarray:
    h, w = image.shape
    valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    vals = image[np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)]
    return np.where(valid, vals, pad)


def crop_many(image: np.ndarray, poses, num_orientations: int, spec: CropSpec) -> np.ndarray:
    """Crop every pose in ``poses`` (sequence of Pose or ``(n, 3)`` ints).

    Returns an ``(n, window, window)`` float64 array (a fresh copy).
    """
    image = np.asarray(image, dtype=np.float64)
    poses = np.asarray(poses, dtype=np.int64).reshape(-1, 3)
    n, wdw = len(poses), spec.window
    out = np.empty((n, wdw * wdw))
    if n == 0:
        return out.reshape(0, wdw, wdw)
    for o in np.unique(poses[:, 2]):
        rows = np.nonzero(poses[:, 2] == o)[0]
        px = poses[rows, 0][:, None]
        py = poses[rows, 1][:, None]
        if spec.interpolation == "nearest":
            offs = crop_offsets(wdw, int(o), num_orientations)
            out[rows] = _gather(image, px + offs[:, 0], py + offs[:, 1], spec.padding_value)
        else:
            dx, dy = _patch_coords(wdw, int(o), num_orientations)
            fx, fy = px + dx, py + dy
            x0, y0 = np.floor(fx).astype(np.int64), np.floor(fy).astype(np.int64)
            ax, ay = fx - x0, fy - y0
            pad = spec.padding_value
            out[rows] = ((1 - ax) * (1 - ay) * _gather(image, x0, y0, pad)
                         + ax * (1 - ay) * _gather(image, x0 + 1, y0, pad)
                         + (1 - ax) * ay * _gather(image, x0, y0 + 1, pad)
                         + ax * ay * _gather(image, x0 + 1, y0 + 1, pad))
    return out.reshape(n, wdw, wdw)


def crop(image: np.ndarray, pose: Pose, spec: CropSpec, num_orientations: int = 1) -> Patch:
    """Patch of ``image`` centred on ``pose`` and aligned with its axes."""
    patch = crop_many(image, [tuple(pose)], num_orientations, spec)[0]
    patch.setflags(write=False)
    return patch


def paste(image: np.ndarray, patch: Patch, pose: Pose, num_orientations: int = 1) -> np.ndarray:
    """Write ``patch`` into a copy of ``image`` through the nearest-neighbour map.

    This is the scatter counterpart of :func:`crop`; when the rotated window
    maps its cells to distinct image cells, ``crop(paste(I, P, p), p) == P``.
    """
    out = np.array(image, dtype=np.float64, copy=True)
    offs = crop_offsets(patch.shape[0], pose.orientation, num_orientations)
    xs = pose.x + offs[:, 0]
    ys = pose.y + offs[:, 1]
    h, w = out.shape
    flat = np.asarray(patch, dtype=np.float64).ravel()
    for x, y, v in zip(xs, ys, flat):
        if 0 <= x < w and 0 <= y < h:
            out[y, x] = v
    return out


def window_is_injective(window: int, orientation: int, num_orientations: int) -> bool:
    offs = crop_offsets(window, orientation, num_orientations)
    return len({tuple(r) for r in offs}) == len(offs)


# -- abstract actions and states ---------------------------------------------------


class AbstractAction:
    """``<crop(I, a_m), a_e>``: an immutable patch snapshot plus effector tag."""

    __slots__ = ("patch", "effector", "_key")

    def __init__(self, patch, effector: Effector):
        arr = np.array(patch, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self.patch = arr
        self.effector = Effector(effector)
        self._key = _action_key(arr, self.effector)

    def to_bytes(self) -> bytes:
        return self._key

    def __eq__(self, other):
        return isinstance(other, AbstractAction) and self._key == other._key

    def __hash__(self):
        return hash(self._key)

    def __repr__(self):
        return f"AbstractAction({self.effector.name}, {self.patch.tolist()})"


def _action_key(patch: np.ndarray, effector: Effector) -> bytes:
    header = struct.pack("<BHH", int(effector), *patch.shape)
    return header + np.ascontiguousarray(patch, dtype="<f8").tobytes()


def blank_action(window: int) -> AbstractAction:
    """Episode-start history filler: zero patch and the reserved NONE tag."""
    return AbstractAction(np.zeros((window, window)), Effector.NONE)


@dataclass(frozen=True)
class AbstractState:
    """The k-1 most recent abstract actions (oldest first) plus the effector bit."""

    history: tuple[AbstractAction, ...]
    theta: int

    def to_bytes(self) -> bytes:
        return struct.pack("<BH", self.theta, len(self.history)) + b"".join(a.to_bytes() for a in self.history)


def action_map(image: np.ndarray, action: Action, spec: CropSpec, num_orientations: int = 1) -> AbstractAction:
    """``g_s(a)``: crop around the motion target paired with the effector tag."""
    return AbstractAction(crop(image, action.pose, spec, num_orientations), action.effector)


def action_map_many(image: np.ndarray, actions: Sequence[Action], spec: CropSpec,
                    num_orientations: int = 1) -> list[AbstractAction]:
    if not actions:
        return []
    patches = crop_many(image, [tuple(a.pose) for a in actions], num_orientations, spec)
    return [AbstractAction(p, a.effector) for p, a in zip(patches, actions)]


def state_map(history: Sequence[tuple[np.ndarray, Action]], theta: int, cfg: DeicticConfig,
              num_orientations: int = 1) -> AbstractState:
    """``f_k(s)`` from the executed (image, action) pairs, oldest first.

    Only the last ``k-1`` pairs matter; shorter histories are padded at the
    front with blank entries.
    """
    keep = cfg.k - 1
    recent = list(history)[-keep:] if keep > 0 else []
    entries = [action_map(img, a, cfg.crop, num_orientations) for img, a in recent]
    pad = [blank_action(cfg.crop.window)] * (keep - len(entries))
    return AbstractState(tuple(pad + entries), int(theta))


def extend_state(state: AbstractState, new_action: AbstractAction, theta: int) -> AbstractState:
    """Shift-append recurrence ``<tail(history), g_s(a), theta'>``."""
    if not state.history:
        return AbstractState((), int(theta))
    return AbstractState(state.history[1:] + (new_action,), int(theta))


# -- orientation projection ---------------------------------------------------------


def fix(pose: Pose) -> Pose:
    """Same position, orientation pinned to the base frame."""
    return Pose(pose.x, pose.y, 0)


def fix_inverse(pose: Pose, num_orientations: int) -> list[Pose]:
    """Every fully specified pose that ``fix`` maps onto ``pose``."""
    if pose.orientation != 0:
        raise ValueError(f"fix_inverse expects a fixed pose, got orientation {pose.orientation}")
    return [Pose(pose.x, pose.y, o) for o in range(num_orientations)]


# -- pruning --------------------------------------------------------------------------


def positive_mask(image: np.ndarray, actions: Sequence[Action], spec: CropSpec, num_orientations: int = 1) -> np.ndarray:
    if not actions:
        return np.zeros(0, dtype=bool)
    patches = crop_many(image, [tuple(a.pose) for a in actions], num_orientations, spec)
    return (patches > 0).reshape(len(actions), -1).any(axis=1)


def prune(actions: Sequence[Action], image: np.ndarray, spec: CropSpec, num_orientations: int = 1) -> list[Action]:
    """Keep the actions whose crop shows something above the table plane."""
    mask = positive_mask(image, actions, spec, num_orientations)
    return [a for a, keep in zip(actions, mask) if keep]


# -- grid symmetries ---------------------------------------------------------------


@dataclass(frozen=True)
class GridTransform:
    """Translation by ``(dx, dy)`` after ``quarter_turns`` rotations about the grid centre.

    Rotation needs a square grid and an even orientation count; a quarter turn
    adds ``num_orientations / 2`` to pose orientations without wrapping so that
    crops stay exactly equal.
    """

    dx: int = 0
    dy: int = 0
    quarter_turns: int = 0

    def image(self, image: np.ndarray) -> np.ndarray:
        out = np.asarray(image)
        r = self.quarter_turns % 4
        if r:
            if out.shape[0] != out.shape[1]:
                raise ValueError("rotations need a square grid")
            out = np.rot90(out, -r)
        if self.dx or self.dy:
            h, w = out.shape
            shifted = np.zeros_like(out)
            xs0, xs1 = max(0, self.dx), min(w, w + self.dx)
            ys0, ys1 = max(0, self.dy), min(h, h + self.dy)
            if xs0 < xs1 and ys0 < ys1:
                shifted[ys0:ys1, xs0:xs1] = out[ys0 - self.dy:ys1 - self.dy, xs0 - self.dx:xs1 - self.dx]
            out = shifted
        return np.array(out)

    def point(self, x: int, y: int, size: int) -> tuple[int, int]:
        for _ in range(self.quarter_turns % 4):
            x, y = size - 1 - y, x
        return x + self.dx, y + self.dy

    def pose(self, pose: Pose, num_orientations: int, size: int) -> Pose:
        x, y = self.point(pose.x, pose.y, size)
        turns = self.quarter_turns % 4
        if turns and num_orientations % 2:
            raise ValueError("quarter turns need an even number of orientations")
        return Pose(x, y, pose.orientation + turns * num_orientations // 2)


def iter_patch_flat(patch: Patch) -> Iterable[float]:
    """Row-major flat serialization of a patch."""
    return np.asarray(patch, dtype=np.float64).ravel().tolist()


def patch_from_flat(values: Sequence[float], window: int) -> Patch:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != window * window:
        raise ValueError(f"expected {window * window} values, got {arr.size}")
    return arr.reshape(window, window)

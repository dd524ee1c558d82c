"""Deterministic 2-D grid simulators of move-effect systems.

Two tasks share one simulator:

* ``disk``: 1x1 disks. The agent picks one disk and places it next to the
  other one (4-neighbourhood on the stage lattice by default).
* ``block``: 1xL oriented blocks. The agent picks one block and places it
  parallel to and beside the other one.

Every step is a base motion to a lattice pose followed by a pick or place.
Pick/place either succeeds or leaves the world untouched; a step is consumed
either way. Rewards are sparse: 1 on the place that first satisfies the goal,
0 otherwise. Episodes end on reward or after ``horizon`` steps.

The image is a heightmap indexed ``image[y, x]`` with 1.0 on occupied cells.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .core import (
    EFFECTOR_ACTIONS,
    Action,
    Effector,
    Pose,
    circular_distance,
    orientation_angle,
    rotate,
    round_half_away,
)

ObjectType = Literal["disk", "block"]

OBJECT_HEIGHT = 1.0


class EnvError(Exception):
    pass


class PlacementError(EnvError):
    """Objects could not be placed without overlap (stage/grid mismatch)."""


class InvalidActionError(EnvError, ValueError):
    pass


class StateBoundError(EnvError):
    pass


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    num_orientations: int = 1
    cell_size: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if self.num_orientations < 1:
            raise ValueError("num_orientations must be >= 1")

    @property
    def orientation_step(self) -> float:
        """Orientation step in degrees."""
        return 180.0 / self.num_orientations


@dataclass(frozen=True)
class CurriculumStage:
    """One discretization of the motion set.

    ``positions`` is the lattice size per side; ``None`` means every cell.
    Lattice coordinates are spread evenly over the grid.
    """

    object_type: ObjectType = "disk"
    positions: int | None = None
    num_orientations: int = 1
    name: str = ""

    def __post_init__(self):
        if self.object_type not in ("disk", "block"):
            raise ValueError(f"unknown object type {self.object_type!r}")
        if self.positions is not None and self.positions < 1:
            raise ValueError("positions per side must be >= 1")
        if self.num_orientations < 1:
            raise ValueError("num_orientations must be >= 1")


@dataclass(frozen=True)
class EnvConfig:
    width: int = 3
    height: int = 3
    num_objects: int = 2
    horizon: int = 10
    # "four": horizontal or vertical neighbours, "horizontal": left/right only
    adjacency: Literal["four", "horizontal"] = "four"
    block_length: int = 3
    align_max_distance: float | None = None  # None -> block_length + 1
    align_max_along: float = 1.0
    grasp_tolerance: int = 1  # orientation steps
    max_reset_retries: int = 1000

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.num_objects < 0:
            raise ValueError("num_objects must be >= 0")
        if self.block_length < 1:
            raise ValueError("block_length must be >= 1")
        if self.adjacency not in ("four", "horizontal"):
            raise ValueError(f"unknown adjacency {self.adjacency!r}")

    @property
    def max_align_distance(self) -> float:
        if self.align_max_distance is None:
            return float(self.block_length + 1)
        return float(self.align_max_distance)


@dataclass(frozen=True)
class WorldObject:
    """An object on the table or in the hand.

    On the table ``position`` is the centre cell. In the hand ``position`` is
    the centre offset expressed in the gripper frame and ``orientation`` the
    orientation relative to the gripper. ``id`` is a label only and takes no
    part in equality.
    """

    kind: ObjectType
    position: tuple
    orientation: int = 0
    on_table: bool = True
    id: int = field(default=0, compare=False)


@dataclass(frozen=True)
class EffectorState:
    holding: bool = False
    held: WorldObject | None = None

    def __post_init__(self):
        if self.holding != (self.held is not None):
            raise ValueError("held object must be present iff the gripper is holding")

    @property
    def theta(self) -> int:
        """Agent-visible effector bit: 0 open/empty, 1 closed/holding."""
        return int(self.holding)


@dataclass(frozen=True)
class EnvState:
    objects: tuple[WorldObject, ...] = ()
    effector: EffectorState = EffectorState()
    step_count: int = 0

    def config(self) -> "EnvState":
        """The state with the step counter zeroed (used as a Markov key)."""
        if self.step_count == 0:
            return self
        return dataclasses.replace(self, step_count=0)


@dataclass(frozen=True)
class Observation:
    image: np.ndarray
    theta: int

    def key(self) -> tuple:
        return (self.image.shape, self.image.tobytes(), self.theta)


def lattice_coords(size: int, count: int | None) -> np.ndarray:
    """Evenly spread ``count`` integer coordinates over ``[0, size)``."""
    if count is None or count >= size:
        return np.arange(size)
    if count == 1:
        return np.array([(size - 1) // 2])
    raw = np.arange(count) * (size - 1) / (count - 1)
    return round_half_away(raw)


@functools.lru_cache(maxsize=None)
def block_footprint(length: int, orientation: int, num_orientations: int) -> tuple[tuple[int, int], ...]:
    """Cells whose centres lie strictly inside a rotated ``length x 1`` bar."""
    angle = orientation_angle(orientation, num_orientations)
    ux, uy = math.cos(angle), math.sin(angle)
    r = length // 2 + 2
    cells = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            along = dx * ux + dy * uy
            perp = -dx * uy + dy * ux
            if abs(along) < length / 2 - 1e-9 and abs(perp) < 0.5 - 1e-9:
                cells.append((dx, dy))
    if (0, 0) not in cells:
        cells.append((0, 0))
    return tuple(sorted(cells, key=lambda c: (c[1], c[0])))


class MoveEffectEnv:
    """Grid simulator for one curriculum stage.

    >>> env = MoveEffectEnv(EnvConfig(width=3, height=3), CurriculumStage("disk"))
    >>> obs = env.reset(0)
    >>> int(obs.image.sum()), obs.theta
    (2, 0)
    """

    def __init__(self, config: EnvConfig, stage: CurriculumStage | None = None):
        self.config = config
        self.state = EnvState()
        self._done = False
        self.set_stage(stage or CurriculumStage())

    # -- stage / discretization -------------------------------------------------

    def set_stage(self, stage: CurriculumStage) -> None:
        self.stage = stage
        self.grid = GridSpec(self.config.width, self.config.height, stage.num_orientations)
        self.xs = lattice_coords(self.config.width, stage.positions)
        self.ys = lattice_coords(self.config.height, stage.positions)
        self.positions = [(int(x), int(y)) for y in self.ys for x in self.xs]
        self._lattice_index = {}
        for iy, y in enumerate(self.ys):
            for ix, x in enumerate(self.xs):
                self._lattice_index[(int(x), int(y))] = (ix, iy)
        self._actions = action_space(stage, self.config)
        self._action_set = set(self._actions)

    def action_space(self) -> list[Action]:
        return list(self._actions)

    @property
    def num_actions(self) -> int:
        return len(self._actions)

    def action_index(self, action: Action) -> int:
        return self._actions.index(action)

    # -- geometry ----------------------------------------------------------------

    def footprint(self, obj: WorldObject, position=None, orientation=None) -> list[tuple[int, int]]:
        x, y = obj.position if position is None else position
        o = obj.orientation if orientation is None else orientation
        if obj.kind == "disk":
            return [(x, y)]
        offs = block_footprint(self.config.block_length, o % self.grid.num_orientations, self.grid.num_orientations)
        return [(x + dx, y + dy) for dx, dy in offs]

    def _inside(self, cells) -> bool:
        w, h = self.config.width, self.config.height
        return all(0 <= x < w and 0 <= y < h for x, y in cells)

    def occupied(self, state: EnvState) -> set[tuple[int, int]]:
        cells = set()
        for obj in state.objects:
            cells.update(self.footprint(obj))
        return cells

    # -- observation -------------------------------------------------------------

    def render_image(self, state: EnvState) -> np.ndarray:
        image = np.zeros((self.config.height, self.config.width))
        for x, y in self.occupied(state):
            image[y, x] = OBJECT_HEIGHT
        image.setflags(write=False)
        return image

    def observe(self, state: EnvState | None = None) -> Observation:
        state = self.state if state is None else state
        return Observation(self.render_image(state), state.effector.theta)

    def render(self, state: EnvState | None = None) -> str:
        """ASCII heightmap, rows top to bottom."""
        state = self.state if state is None else state
        image = self.render_image(state)
        rows = ["".join("#" if v > 0 else "." for v in row) for row in image]
        rows.append("hand: " + ("holding" if state.effector.holding else "open"))
        return "\n".join(rows)

    # -- reset -------------------------------------------------------------------

    def _random_object(self, rng: np.random.Generator, idx: int) -> WorldObject:
        x = int(self.xs[rng.integers(len(self.xs))])
        y = int(self.ys[rng.integers(len(self.ys))])
        o = int(rng.integers(self.grid.num_orientations))
        return WorldObject(self.stage.object_type, (x, y), o, True, id=idx)

    def reset(self, seed=None, stage: CurriculumStage | None = None) -> Observation:
        """Place the objects at random non-overlapping lattice poses."""
        if stage is not None:
            self.set_stage(stage)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        for _ in range(self.config.max_reset_retries):
            objects: list[WorldObject] = []
            taken: set[tuple[int, int]] = set()
            ok = True
            for i in range(self.config.num_objects):
                obj = self._random_object(rng, i)
                cells = self.footprint(obj)
                if not self._inside(cells) or taken.intersection(cells):
                    ok = False
                    break
                taken.update(cells)
                objects.append(obj)
            if ok:
                self.state = EnvState(tuple(objects), EffectorState(), 0)
                self._done = False
                return self.observe()
        raise PlacementError(
            f"could not place {self.config.num_objects} {self.stage.object_type}s on a "
            f"{self.config.width}x{self.config.height} grid after {self.config.max_reset_retries} tries"
        )

    def set_state(self, state: EnvState) -> None:
        self.state = state
        self._done = False

    # -- dynamics ----------------------------------------------------------------

    def check_action(self, action: Action) -> None:
        if action not in self._action_set:
            raise InvalidActionError(f"{action} is outside the current discretization")

    def _grasp_ok(self, obj: WorldObject, pose: Pose) -> bool:
        if obj.kind == "disk":
            return True
        n = self.grid.num_orientations
        steps = circular_distance(pose.orientation, obj.orientation, n)
        # never accept perpendicular grasps on elongated objects
        return steps <= self.config.grasp_tolerance and steps * 180.0 / n < 90.0 - 1e-9

    def _pick(self, state: EnvState, pose: Pose) -> EnvState | None:
        if state.effector.holding:
            return None
        for i, obj in enumerate(state.objects):
            if (pose.x, pose.y) in self.footprint(obj) and self._grasp_ok(obj, pose):
                n = self.grid.num_orientations
                turn = (obj.orientation - pose.orientation) % n
                if turn > n // 2:
                    turn -= n
                gx, gy = rotate(obj.position[0] - pose.x, obj.position[1] - pose.y,
                                -orientation_angle(pose.orientation, n))
                rel = (round(float(gx), 9) + 0.0, round(float(gy), 9) + 0.0)
                held = WorldObject(obj.kind, rel, turn, False, id=obj.id)
                rest = state.objects[:i] + state.objects[i + 1:]
                return EnvState(rest, EffectorState(True, held), state.step_count)
        return None

    def placed_object(self, held: WorldObject, pose: Pose) -> WorldObject:
        """Table pose a held object would get if released at ``pose``."""
        n = self.grid.num_orientations
        ox, oy = rotate(held.position[0], held.position[1], orientation_angle(pose.orientation, n))
        cx, cy = (int(v) for v in round_half_away([pose.x + ox, pose.y + oy]))
        return WorldObject(held.kind, (cx, cy), (pose.orientation + held.orientation) % n, True, id=held.id)

    def _place(self, state: EnvState, pose: Pose) -> EnvState | None:
        if not state.effector.holding:
            return None
        obj = self.placed_object(state.effector.held, pose)
        cells = self.footprint(obj)
        if not self._inside(cells) or self.occupied(state).intersection(cells):
            return None
        return EnvState(state.objects + (obj,), EffectorState(), state.step_count)

    def goal(self, state: EnvState) -> bool:
        objs = state.objects
        if len(objs) < 2 or state.effector.holding:
            return False
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                if self._goal_pair(objs[i], objs[j]):
                    return True
        return False

    def _goal_pair(self, a: WorldObject, b: WorldObject) -> bool:
        if a.kind == "disk" and b.kind == "disk":
            ia = self._lattice_index.get(a.position, a.position)
            ib = self._lattice_index.get(b.position, b.position)
            dx, dy = abs(ia[0] - ib[0]), abs(ia[1] - ib[1])
            if self.config.adjacency == "horizontal":
                return dx == 1 and dy == 0
            return dx + dy == 1
        if a.kind == "block" and b.kind == "block":
            n = self.grid.num_orientations
            if a.orientation % n != b.orientation % n:
                return False
            dx = b.position[0] - a.position[0]
            dy = b.position[1] - a.position[1]
            angle = orientation_angle(a.orientation, n)
            along = dx * math.cos(angle) + dy * math.sin(angle)
            dist = math.hypot(dx, dy)
            return (dist <= self.config.max_align_distance + 1e-9
                    and abs(along) <= self.config.align_max_along + 1e-9)
        return False

    def transition(self, state: EnvState, action: Action) -> tuple[EnvState, float, bool]:
        """Pure dynamics: ``(next_state, reward, goal_reached)``; step_count untouched."""
        pose, effector = action
        if effector == Effector.PICK:
            nxt = self._pick(state, pose)
            return (state, 0.0, False) if nxt is None else (nxt, 0.0, False)
        if effector == Effector.PLACE:
            nxt = self._place(state, pose)
            if nxt is None:
                return state, 0.0, False
            reached = self.goal(nxt)
            return nxt, (1.0 if reached else 0.0), reached
        raise InvalidActionError(f"effector {effector!r} is not executable")

    def step(self, action: Action) -> tuple[Observation, float, bool]:
        if self._done or self.state.step_count >= self.config.horizon:
            raise EnvError("episode is over; call reset()")
        self.check_action(action)
        nxt, reward, reached = self.transition(self.state, action)
        count = self.state.step_count + 1
        self.state = dataclasses.replace(nxt, step_count=count)
        self._done = reached or count >= self.config.horizon
        return self.observe(), reward, self._done

    @property
    def done(self) -> bool:
        return self._done

    # -- enumeration -------------------------------------------------------------

    def placements(self) -> list[WorldObject]:
        """Every in-grid lattice pose of a single stage object."""
        out = []
        for y in self.ys:
            for x in self.xs:
                for o in range(self.grid.num_orientations):
                    obj = WorldObject(self.stage.object_type, (int(x), int(y)), o, True)
                    if self._inside(self.footprint(obj)):
                        out.append(obj)
        return out

    def initial_states(self) -> list[EnvState]:
        """Support of the reset distribution (ordered object tuples)."""
        singles = self.placements()
        states: list[EnvState] = []

        def extend(prefix: tuple, taken: frozenset):
            if len(prefix) == self.config.num_objects:
                states.append(EnvState(prefix, EffectorState(), 0))
                return
            for obj in singles:
                cells = self.footprint(obj)
                if taken.intersection(cells):
                    continue
                extend(prefix + (dataclasses.replace(obj, id=len(prefix)),), taken | frozenset(cells))

        extend((), frozenset())
        return states

    def enumerate_states(self, max_states: int = 1_000_000) -> list[EnvState]:
        """Exhaustive, duplicate-free list of reachable configurations.

        Breadth-first search from the reset support over every action,
        ignoring the step counter. Goal configurations are included.
        """
        seen: dict[EnvState, None] = {}
        queue: deque[EnvState] = deque()
        for s in self.initial_states():
            if s not in seen:
                seen[s] = None
                queue.append(s)
                if len(seen) > max_states:
                    raise StateBoundError(f"more than {max_states} states")
        while queue:
            s = queue.popleft()
            for a in self._actions:
                nxt, _, _ = self.transition(s, a)
                if nxt not in seen:
                    seen[nxt] = None
                    queue.append(nxt)
                    if len(seen) > max_states:
                        raise StateBoundError(f"more than {max_states} states")
        return list(seen)


def action_space(stage: CurriculumStage, config: EnvConfig) -> list[Action]:
    """All lattice poses x orientations x {pick, place}, row-major."""
    xs = lattice_coords(config.width, stage.positions)
    ys = lattice_coords(config.height, stage.positions)
    return [
        Action(Pose(int(x), int(y), o), e)
        for y in ys
        for x in xs
        for o in range(stage.num_orientations)
        for e in EFFECTOR_ACTIONS
    ]


def stage_action_count(positions: int, num_orientations: int) -> int:
    """Size of the action set for ``positions`` lattice points in total."""
    return positions * num_orientations * len(EFFECTOR_ACTIONS)


def rollout(env: MoveEffectEnv, actions: Iterable[Action], seed=None) -> list[tuple[Observation, float, bool]]:
    """Reset with ``seed`` and replay ``actions`` until the episode ends."""
    out = [(env.reset(seed), 0.0, False)]
    for a in actions:
        if env.done:
            break
        out.append(env.step(a))
    return out


def objects_overlap(env: MoveEffectEnv, objects: Sequence[WorldObject]) -> bool:
    seen: set = set()
    for obj in objects:
        cells = env.footprint(obj)
        if seen.intersection(cells):
            return True
        seen.update(cells)
    return False

"""Q-learning in the abstract space plus the flat image DQN used for comparison.

Transitions are stored in underlying form (recent images, poses and effector
bits); abstract views are cropped when a minibatch is trained on. Both agents
share the episode loop in :func:`train_stage`.

Random draws all come from the single ``numpy.random.Generator`` of a run, in
this order: network initialization when the agent is built, then per episode
the reset placement, and per step the exploration coin, the random action or
tie-break index, and the minibatch sample.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .core import Action, Effector, Pose
from .env import CurriculumStage, EnvConfig, MoveEffectEnv
from .mapping import DeicticConfig, crop_many
from .nn import Adam, Network, NetworkSpec, backward, forward, load_params, save_params, squared_td_grad
from .replay import PrioritizedReplayBuffer, ReplayBuffer

CURVE_COLUMNS = ("stage", "episode", "steps", "reward", "epsilon", "mean_loss")


# -- configuration --------------------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``decay_steps`` env steps, then flat."""

    start: float = 0.5
    end: float = 0.1
    decay_steps: int = 10_000

    def __post_init__(self):
        if not (0.0 <= self.end <= 1.0 and 0.0 <= self.start <= 1.0):
            raise ValueError("epsilon values must lie in [0, 1]")
        if self.decay_steps < 0:
            raise ValueError("decay_steps must be >= 0")

    def value(self, step: int) -> float:
        if self.decay_steps == 0 or step >= self.decay_steps:
            return self.end
        return self.start + (self.end - self.start) * (step / self.decay_steps)


@dataclass(frozen=True)
class HierarchyConfig:
    enabled: bool = False
    eta: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")


@dataclass(frozen=True)
class ReplayConfig:
    capacity: int = 10_000
    mode: Literal["uniform", "prioritized"] = "uniform"
    alpha: float = 0.6
    beta: float = 0.4
    eps: float = 1e-6

    def build(self) -> ReplayBuffer:
        if self.mode == "uniform":
            return ReplayBuffer(self.capacity)
        if self.mode == "prioritized":
            return PrioritizedReplayBuffer(self.capacity, self.alpha, self.beta, self.eps)
        raise ValueError(f"unknown replay mode {self.mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.9
    batch_size: int = 10
    lr: float = 3e-4
    target_sync: int = 100
    use_v: bool = True
    use_pruning: bool = True
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    conv: tuple[tuple[int, int, int], ...] = ((16, 3, 1), (32, 3, 1))
    fc: tuple[int, ...] = (48,)
    learning_starts: int = 10
    window: int = 100
    threshold: float = 0.8
    max_episodes: int = 2000
    stop_on_solve: bool = True
    abort_on_fail: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.batch_size < 1 or self.target_sync < 1 or self.window < 1 or self.max_episodes < 0:
            raise ValueError("batch_size, target_sync and window must be positive")


# -- transitions ------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroundHistory:
    """Current image and effector bit plus the most recent (image, action) pairs, oldest first."""

    past: tuple[tuple[np.ndarray, Action], ...]
    image: np.ndarray
    theta: int


@dataclass(frozen=True, eq=False)
class Transition:
    state: GroundHistory
    action: Action
    reward: float
    next_state: GroundHistory
    done: bool


def _one_hot(index: int, size: int) -> list[float]:
    out = [0.0] * size
    out[index] = 1.0
    return out


# -- abstract-space agent -----------------------------------------------------------------


class AbstractEncoder:
    """Turns ground histories and candidate crops into network inputs.

    Q inputs stack the action crop and the ``k-1`` history crops as channels;
    auxiliary features are ``theta``, the action tag one-hot and each history
    tag one-hot (pick, place, blank). V inputs drop the action channel and tag.
    """

    def __init__(self, cfg: DeicticConfig, num_orientations: int = 1):
        self.cfg = cfg
        self.num_orientations = num_orientations

    @property
    def window(self) -> int:
        return self.cfg.crop.window

    @property
    def hist_len(self) -> int:
        return self.cfg.k - 1

    def q_spec(self, conv, fc) -> NetworkSpec:
        w = self.window
        return NetworkSpec(in_channels=self.cfg.k, in_height=w, in_width=w, aux_dim=3 + 3 * self.hist_len,
                           conv=conv, fc=fc, out_dim=1)

    def v_spec(self, conv, fc) -> NetworkSpec:
        w = self.window
        return NetworkSpec(in_channels=self.hist_len, in_height=w, in_width=w, aux_dim=1 + 3 * self.hist_len,
                           conv=conv if self.hist_len else (), fc=fc, out_dim=1)

    def crops(self, image: np.ndarray, poses: np.ndarray) -> np.ndarray:
        return crop_many(image, poses, self.num_orientations, self.cfg.crop)

    def state_part(self, gh: GroundHistory) -> tuple[np.ndarray, np.ndarray]:
        """History crops ``(w, w, k-1)`` and features ``[theta, tag one-hots...]``."""
        w, n = self.window, self.hist_len
        patches = np.zeros((w, w, n))
        feats = [float(gh.theta)]
        pad = n - len(gh.past[-n:]) if n else 0
        for i in range(pad):
            feats += _one_hot(int(Effector.NONE), 3)
        for j, (img, a) in enumerate(gh.past[-n:] if n else ()):
            patches[:, :, pad + j] = self.crops(img, np.array([tuple(a.pose)]))[0]
            feats += _one_hot(int(a.effector), 3)
        return patches, np.array(feats)

    def q_inputs(self, parts: Sequence[tuple[np.ndarray, np.ndarray]], patches: np.ndarray,
                 tags: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Inputs pairing ``parts[i]`` with ``patches[i]`` / ``tags[i]`` (one part broadcasts)."""
        n = len(patches)
        if len(parts) == 1 and n != 1:
            parts = [parts[0]] * n
        hist = np.stack([p[0] for p in parts]) if n else np.zeros((0, self.window, self.window, self.hist_len))
        x = np.concatenate([np.asarray(patches)[..., None], hist], axis=3)
        tag_feats = np.zeros((n, 2))
        tag_feats[np.arange(n), np.asarray(tags, dtype=np.int64)] = 1.0
        s_feats = np.stack([p[1] for p in parts]) if n else np.zeros((0, 1 + 3 * self.hist_len))
        aux = np.concatenate([s_feats[:, :1], tag_feats, s_feats[:, 1:]], axis=1)
        return x, aux

    def v_inputs(self, parts: Sequence[tuple[np.ndarray, np.ndarray]]):
        x = np.stack([p[0] for p in parts]) if self.hist_len else None
        aux = np.stack([p[1] for p in parts])
        return x, aux


@dataclass
class Greedy:
    action: Action
    value: float
    index: int


class DeicticAgent:
    """DQN over ``(f(s), g_s(a))`` with optional V', pruning and the Q1'/Q2' cascade."""

    def __init__(self, cfg: TrainConfig, deictic: DeicticConfig, rng: np.random.Generator,
                 num_orientations: int = 1):
        self.cfg = cfg
        self.deictic = deictic
        self.rng = rng
        self.encoder = AbstractEncoder(deictic, num_orientations)
        q_spec = self.encoder.q_spec(cfg.conv, cfg.fc)
        self.q = Network(q_spec, seed=rng)
        self.q_target = self.q.copy()
        self.q_opt = Adam(lr=cfg.lr)
        self.v = Network(self.encoder.v_spec(cfg.conv, cfg.fc), seed=rng) if cfg.use_v else None
        self.v_opt = Adam(lr=cfg.lr)
        self.q1 = Network(q_spec, seed=rng) if cfg.hierarchy.enabled else None
        self.q1_opt = Adam(lr=cfg.lr)
        # Q1' is trained whenever it exists; this flag only controls its use when acting
        self.hierarchy_active = cfg.hierarchy.enabled
        self.buffer = cfg.replay.build()
        self.train_steps = 0
        self.set_actions([])

    @property
    def history_length(self) -> int:
        return self.deictic.k - 1

    # -- stage handling ---------------------------------------------------------------------

    def set_actions(self, actions: Sequence[Action], num_orientations: int | None = None) -> None:
        if num_orientations is not None:
            self.encoder.num_orientations = num_orientations
        self.actions = list(actions)
        self.poses = np.array([tuple(a.pose) for a in self.actions], dtype=np.int64).reshape(-1, 3)
        self.tags = np.array([int(a.effector) for a in self.actions], dtype=np.int64)
        self.fixed_poses = self.poses.copy()
        self.fixed_poses[:, 2] = 0

    def begin_stage(self, env: MoveEffectEnv) -> None:
        self.set_actions(env.action_space(), env.grid.num_orientations)
        self.buffer.clear()

    # -- evaluation ---------------------------------------------------------------------------

    def candidates(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Indices of candidate actions (pruned, with fallback) and crops of all actions."""
        crops = self.encoder.crops(image, self.poses)
        if not self.cfg.use_pruning:
            return np.arange(len(self.actions)), crops
        keep = np.nonzero((crops > 0).reshape(len(crops), -1).any(axis=1))[0]
        if len(keep) == 0:
            keep = np.arange(len(self.actions))
        return keep, crops

    def values(self, net: Network, part, patches: np.ndarray, tags: np.ndarray) -> np.ndarray:
        """Network values for (patch, tag) rows, evaluating each distinct row once."""
        n = len(patches)
        if n == 0:
            return np.zeros(0)
        flat = np.ascontiguousarray(patches.reshape(n, -1))
        _, inverse = np.unique(flat, axis=0, return_inverse=True)
        combo = inverse.reshape(-1) * 2 + tags
        ucombo, pick, inv2 = np.unique(combo, return_index=True, return_inverse=True)
        x, aux = self.encoder.q_inputs([part], patches[pick], tags[pick])
        out = net.predict(x, aux)[:, 0]
        return out[inv2.reshape(-1)]

    def _argmax(self, idx: np.ndarray, vals: np.ndarray) -> Greedy:
        best = vals.max()
        ties = np.nonzero(vals == best)[0]
        j = ties[0] if len(ties) == 1 else ties[self.rng.integers(len(ties))]
        return Greedy(self.actions[idx[j]], float(best), int(idx[j]))

    def exhaustive_argmax(self, gh: GroundHistory, idx: np.ndarray | None = None, crops=None,
                          net: Network | None = None) -> Greedy:
        """Eq. 4: argmax of Q' over the candidates by one batched evaluation."""
        if idx is None:
            idx, crops = self.candidates(gh.image)
        part = self.encoder.state_part(gh)
        vals = self.values(net or self.q, part, crops[idx], self.tags[idx])
        return self._argmax(idx, vals)

    def hierarchical_argmax(self, gh: GroundHistory, idx: np.ndarray | None = None, crops=None,
                            eta: float | None = None) -> Greedy:
        """Score positions with Q1' at the fixed orientation, expand the top ones with Q2'."""
        if idx is None:
            idx, crops = self.candidates(gh.image)
        eta = self.cfg.hierarchy.eta if eta is None else eta
        if not 0.0 < eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {eta}")
        part = self.encoder.state_part(gh)
        xy = self.poses[idx, :2]
        positions, pos_inv = np.unique(xy, axis=0, return_inverse=True)
        pos_inv = pos_inv.reshape(-1)
        fixed = self.encoder.crops(gh.image, np.column_stack([positions, np.zeros(len(positions), np.int64)]))
        q1 = self.values(self.q1 if self.q1 is not None else self.q, part, fixed[pos_inv], self.tags[idx])
        score = np.full(len(positions), -np.inf)
        np.maximum.at(score, pos_inv, q1)
        top = math.ceil(eta * len(positions))
        order = np.argsort(-score, kind="stable")[:top]
        chosen = np.zeros(len(positions), dtype=bool)
        chosen[order] = True
        sub = idx[chosen[pos_inv]]
        vals = self.values(self.q, part, crops[sub], self.tags[sub])
        return self._argmax(sub, vals)

    def greedy(self, gh: GroundHistory, idx=None, crops=None) -> Greedy:
        if self.hierarchy_active:
            return self.hierarchical_argmax(gh, idx, crops)
        return self.exhaustive_argmax(gh, idx, crops)

    # -- acting -------------------------------------------------------------------------------

    def select_action(self, gh: GroundHistory, epsilon: float) -> tuple[Action, float | None]:
        """Epsilon-greedy choice; returns the greedy max as well when one was computed."""
        idx, crops = self.candidates(gh.image)
        if len(idx) == 0:
            raise ValueError("no candidate actions")
        if self.rng.random() < epsilon:
            return self.actions[idx[self.rng.integers(len(idx))]], None
        g = self.greedy(gh, idx, crops)
        return g.action, g.value

    def act(self, gh: GroundHistory, epsilon: float) -> Action:
        action, best = self.select_action(gh, epsilon)
        if best is not None and self.v is not None:
            self.update_v(gh, best)
        return action

    def update_v(self, gh: GroundHistory, target: float) -> float:
        """One regression step of V'(f(s)) toward the just-evaluated greedy max."""
        x, aux = self.encoder.v_inputs([self.encoder.state_part(gh)])
        out, cache = forward(self.v.spec, self.v.params, x, aux)
        loss, dout = squared_td_grad(out, [target])
        self.v_opt.step(self.v.params, backward(self.v.spec, self.v.params, cache, dout))
        return loss

    # -- learning -------------------------------------------------------------------------------

    def _action_patch(self, gh: GroundHistory, action: Action, fixed: bool = False) -> np.ndarray:
        pose = Pose(action.pose.x, action.pose.y, 0) if fixed else action.pose
        return self.encoder.crops(gh.image, np.array([tuple(pose)]))[0]

    def compute_targets(self, batch: Sequence[Transition]) -> np.ndarray:
        y = np.array([t.reward for t in batch], dtype=np.float64)
        live = [i for i, t in enumerate(batch) if not t.done]
        if not live:
            return y
        if self.v is not None:
            x, aux = self.encoder.v_inputs([self.encoder.state_part(batch[i].next_state) for i in live])
            v = self.v.predict(x, aux)[:, 0]
            y[live] += self.cfg.gamma * v
        else:
            for i in live:
                g = self.exhaustive_argmax(batch[i].next_state, net=self.q_target)
                y[i] += self.cfg.gamma * g.value
        return y

    def _regress(self, net: Network, opt: Adam, x, aux, y, weights) -> tuple[float, np.ndarray]:
        out, cache = forward(net.spec, net.params, x, aux)
        loss, dout = squared_td_grad(out, y, weights)
        opt.step(net.params, backward(net.spec, net.params, cache, dout))
        return loss, out[:, 0] - y

    def train_step(self) -> float | None:
        cfg = self.cfg
        if len(self.buffer) < max(cfg.batch_size, cfg.learning_starts):
            return None
        sample = self.buffer.sample(cfg.batch_size, self.rng)
        batch = sample.items
        y = self.compute_targets(batch)
        parts = [self.encoder.state_part(t.state) for t in batch]
        tags = np.array([int(t.action.effector) for t in batch])
        patches = np.stack([self._action_patch(t.state, t.action) for t in batch])
        x, aux = self.encoder.q_inputs(parts, patches, tags)
        loss, td = self._regress(self.q, self.q_opt, x, aux, y, sample.weights)
        self.buffer.update_priorities(sample.indices, td)
        if self.q1 is not None:
            fixed = np.stack([self._action_patch(t.state, t.action, fixed=True) for t in batch])
            x1, aux1 = self.encoder.q_inputs(parts, fixed, tags)
            self._regress(self.q1, self.q1_opt, x1, aux1, y, sample.weights)
        self.train_steps += 1
        if self.train_steps % cfg.target_sync == 0:
            self.q_target.load_params_from(self.q)
        return loss

    def learn(self, transition: Transition) -> float | None:
        self.buffer.add(transition)
        return self.train_step()

    # -- persistence ------------------------------------------------------------------------------

    def networks(self) -> dict[str, Network]:
        nets = {"q": self.q}
        if self.v is not None:
            nets["v"] = self.v
        if self.q1 is not None:
            nets["q1"] = self.q1
        return nets

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, net in self.networks().items():
            path = directory / f"{name}.params"
            save_params(path, net.spec, net.params)
            paths.append(path)
        return paths

    def load(self, directory) -> None:
        directory = Path(directory)
        for name, net in self.networks().items():
            path = directory / f"{name}.params"
            if name != "q" and not path.exists():
                continue
            _, params = load_params(path, net.spec)
            for k, v in params.items():
                net.params[k][...] = v
        self.q_target.load_params_from(self.q)


# -- flat baseline ----------------------------------------------------------------------------


class BaselineAgent:
    """Image + theta in, one dueling-head output per ground action."""

    history_length = 0

    def __init__(self, cfg: TrainConfig, env: MoveEffectEnv, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.actions = env.action_space()
        self.index = {a: i for i, a in enumerate(self.actions)}
        spec = NetworkSpec(in_channels=1, in_height=env.config.height, in_width=env.config.width, aux_dim=1,
                           conv=cfg.conv, fc=cfg.fc, out_dim=len(self.actions), dueling=True)
        self.q = Network(spec, seed=rng)
        self.q_target = self.q.copy()
        self.q_opt = Adam(lr=cfg.lr)
        self.buffer = cfg.replay.build()
        self.train_steps = 0

    def begin_stage(self, env: MoveEffectEnv) -> None:
        if env.action_space() != self.actions:
            raise ValueError("the flat baseline has a fixed action set")
        self.buffer.clear()

    @staticmethod
    def _inputs(states: Sequence[GroundHistory]):
        x = np.stack([s.image for s in states])[..., None]
        aux = np.array([[float(s.theta)] for s in states])
        return x, aux

    def q_values(self, gh: GroundHistory, net: Network | None = None) -> np.ndarray:
        x, aux = self._inputs([gh])
        return (net or self.q).predict(x, aux)[0]

    def act(self, gh: GroundHistory, epsilon: float) -> Action:
        if self.rng.random() < epsilon:
            return self.actions[self.rng.integers(len(self.actions))]
        q = self.q_values(gh)
        ties = np.nonzero(q == q.max())[0]
        j = ties[0] if len(ties) == 1 else ties[self.rng.integers(len(ties))]
        return self.actions[j]

    def train_step(self) -> float | None:
        cfg = self.cfg
        if len(self.buffer) < max(cfg.batch_size, cfg.learning_starts):
            return None
        sample = self.buffer.sample(cfg.batch_size, self.rng)
        batch = sample.items
        y = np.array([t.reward for t in batch])
        live = [i for i, t in enumerate(batch) if not t.done]
        if live:
            x, aux = self._inputs([batch[i].next_state for i in live])
            y[live] += cfg.gamma * self.q_target.predict(x, aux).max(axis=1)
        x, aux = self._inputs([t.state for t in batch])
        out, cache = forward(self.q.spec, self.q.params, x, aux)
        cols = np.array([self.index[t.action] for t in batch])
        rows = np.arange(len(batch))
        loss, dq = squared_td_grad(out[rows, cols], y, sample.weights)
        dout = np.zeros_like(out)
        dout[rows, cols] = dq[:, 0]
        self.q_opt.step(self.q.params, backward(self.q.spec, self.q.params, cache, dout))
        self.buffer.update_priorities(sample.indices, out[rows, cols] - y)
        self.train_steps += 1
        if self.train_steps % cfg.target_sync == 0:
            self.q_target.load_params_from(self.q)
        return loss

    def learn(self, transition: Transition) -> float | None:
        self.buffer.add(transition)
        return self.train_step()

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "baseline.params"
        save_params(path, self.q.spec, self.q.params)
        return [path]

    def load(self, directory) -> None:
        _, params = load_params(Path(directory) / "baseline.params", self.q.spec)
        for k, v in params.items():
            self.q.params[k][...] = v
        self.q_target.load_params_from(self.q)


# -- learning curves ------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveRow:
    stage: int
    episode: int
    steps: int
    reward: float
    epsilon: float
    mean_loss: float


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else f"{v:.10g}"


@dataclass
class LearningCurve:
    rows: list[CurveRow] = field(default_factory=list)

    def append(self, row: CurveRow) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(getattr(r, c)) for c in CURVE_COLUMNS])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "LearningCurve":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
                raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
            rows = [CurveRow(int(d["stage"]), int(d["episode"]), int(d["steps"]), float(d["reward"]),
                             float(d["epsilon"]), float(d["mean_loss"])) for d in reader]
        return cls(rows)

    def rewards(self, stage: int | None = None) -> np.ndarray:
        return np.array([r.reward for r in self.rows if stage is None or r.stage == stage])

    def steps(self, stage: int | None = None) -> np.ndarray:
        return np.array([r.steps for r in self.rows if stage is None or r.stage == stage], dtype=np.int64)


def rolling_mean(rewards: Sequence[float], window: int) -> np.ndarray:
    """Mean over the trailing ``window`` episodes; NaN until the window is full."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.full(len(r), np.nan)
    if len(r) >= window:
        c = np.concatenate([[0.0], np.cumsum(r)])
        out[window - 1:] = (c[window:] - c[:-window]) / window
    return out


def episodes_to_threshold(rewards: Sequence[float], window: int, threshold: float) -> int | None:
    """1-based episode at which the rolling mean first reaches ``threshold``."""
    roll = rolling_mean(rewards, window)
    hits = np.nonzero(roll >= threshold - 1e-12)[0]
    return int(hits[0]) + 1 if len(hits) else None


# -- training loops -------------------------------------------------------------------------


@dataclass
class StageResult:
    stage: int
    name: str
    solved: bool
    episodes: int
    steps: int


@dataclass
class RunResult:
    curve: LearningCurve
    stages: list[StageResult]
    agent: object
    total_steps: int = 0


@dataclass
class _Counters:
    episodes: int = 0
    steps: int = 0


def train_stage(agent, env: MoveEffectEnv, stage: CurriculumStage, cfg: TrainConfig, rng: np.random.Generator,
                curve: LearningCurve, stage_index: int, counters: _Counters, threshold: float | None = None,
                max_steps: int | None = None) -> StageResult:
    """Run episodes on one stage until solved or out of budget."""
    env.set_stage(stage)
    agent.begin_stage(env)
    threshold = cfg.threshold if threshold is None else threshold
    keep = agent.history_length
    recent: deque[float] = deque(maxlen=cfg.window)
    stage_steps, episodes, solved = 0, 0, False
    while episodes < cfg.max_episodes and (max_steps is None or counters.steps < max_steps):
        obs = env.reset(rng)
        gh = GroundHistory((), obs.image, obs.theta)
        epsilon = cfg.epsilon.value(stage_steps)
        total, losses = 0.0, []
        while not env.done:
            action = agent.act(gh, cfg.epsilon.value(stage_steps))
            obs, reward, _ = env.step(action)
            past = (gh.past + ((gh.image, action),))[-keep:] if keep else ()
            nxt = GroundHistory(past, obs.image, obs.theta)
            loss = agent.learn(Transition(gh, action, reward, nxt, env.goal(env.state)))
            if loss is not None:
                losses.append(loss)
            total += reward
            gh = nxt
            stage_steps += 1
            counters.steps += 1
        episodes += 1
        counters.episodes += 1
        recent.append(total)
        curve.append(CurveRow(stage_index, counters.episodes, counters.steps, total, epsilon,
                              float(np.mean(losses)) if losses else math.nan))
        if len(recent) == cfg.window and sum(recent) / cfg.window >= threshold - 1e-12:
            solved = True
            if cfg.stop_on_solve:
                break
    return StageResult(stage_index, stage.name, solved, episodes, stage_steps)


def run_curriculum(stages: Sequence[CurriculumStage], env_config: EnvConfig, deictic: DeicticConfig,
                   cfg: TrainConfig, seed=0, thresholds: Sequence[float | None] | None = None,
                   max_steps: int | None = None, agent: DeicticAgent | None = None,
                   on_stage_end: Callable[[StageResult, DeicticAgent], None] | None = None,
                   hierarchy: Sequence[bool | None] | None = None) -> RunResult:
    """Train through ``stages`` in order, carrying every network between stages.

    ``hierarchy`` optionally switches the Q1'/Q2' cascade on or off per stage
    (``None`` entries keep ``cfg.hierarchy.enabled``).
    """
    if not stages:
        raise ValueError("curriculum needs at least one stage")
    if hierarchy is not None and any(hierarchy) and not cfg.hierarchy.enabled:
        raise ValueError("per-stage hierarchy needs cfg.hierarchy.enabled so that Q1' exists")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    env = MoveEffectEnv(env_config, stages[0])
    if agent is None:
        agent = DeicticAgent(cfg, deictic, rng, stages[0].num_orientations)
    else:
        agent.rng = rng
    curve = LearningCurve()
    counters = _Counters()
    results = []
    for i, stage in enumerate(stages):
        th = thresholds[i] if thresholds is not None else None
        flag = hierarchy[i] if hierarchy is not None else None
        agent.hierarchy_active = cfg.hierarchy.enabled if flag is None else flag
        res = train_stage(agent, env, stage, cfg, rng, curve, i + 1, counters, th, max_steps)
        results.append(res)
        if on_stage_end is not None:
            on_stage_end(res, agent)
        if not res.solved and (cfg.abort_on_fail or (max_steps is not None and counters.steps >= max_steps)):
            break
    return RunResult(curve, results, agent, counters.steps)


def run_baseline(env_config: EnvConfig, stage: CurriculumStage, cfg: TrainConfig, seed=0,
                 max_steps: int | None = None) -> RunResult:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    env = MoveEffectEnv(env_config, stage)
    agent = BaselineAgent(cfg, env, rng)
    curve = LearningCurve()
    counters = _Counters()
    res = train_stage(agent, env, stage, cfg, rng, curve, 1, counters, None, max_steps)
    return RunResult(curve, [res], agent, counters.steps)


def evaluate_policy(agent, env_config: EnvConfig, stage: CurriculumStage, episodes: int, seed=0) -> float:
    """Greedy success rate over ``episodes`` fresh episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    env = MoveEffectEnv(env_config, stage)
    agent.begin_stage(env)
    saved_rng, agent.rng = agent.rng, rng
    keep = agent.history_length
    successes = 0
    try:
        for _ in range(episodes):
            obs = env.reset(rng)
            gh = GroundHistory((), obs.image, obs.theta)
            while not env.done:
                if isinstance(agent, DeicticAgent):
                    action, _ = agent.select_action(gh, 0.0)
                else:
                    action = agent.act(gh, 0.0)
                obs, _, _ = env.step(action)
                past = (gh.past + ((gh.image, action),))[-keep:] if keep else ()
                gh = GroundHistory(past, obs.image, obs.theta)
            successes += int(env.goal(env.state))
    finally:
        agent.rng = saved_rng
    return successes / episodes

"""Brute-force checks that the deictic maps form an MDP homomorphism.

The ground MDP is enumerated exactly: a ground state is the underlying
world configuration plus the last ``k-1`` (observation, action) pairs, and
goal transitions lead to an absorbing zero-reward state. The abstract MDP is
induced by grouping ground state-action pairs on ``(f(s), g_s(a))`` and
aggregating their next-state distributions over ``f``-classes. Optimal values
of both models come from value iteration.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Hashable, Sequence

import numpy as np
import scipy.sparse as sp

from .env import EnvState, MoveEffectEnv, StateBoundError
from .mapping import DeicticConfig, action_map_many, state_map


class ConvergenceError(RuntimeError):
    pass


ABSORB = "absorb"


@dataclass
class TabularMDP:
    """Explicit finite MDP with ragged action sets.

    State-action pairs are flattened: the actions of state ``i`` occupy rows
    ``offsets[i]:offsets[i + 1]`` of ``P`` (sparse, ``n_sa x n_states``) and ``R``.
    """

    states: list
    actions: list[list]
    P: sp.csr_matrix
    R: np.ndarray
    gamma: float = 0.9
    offsets: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if len(self.actions) != len(self.states):
            raise ValueError("one action list per state is required")
        if any(len(a) == 0 for a in self.actions):
            raise ValueError("every state needs at least one action")
        counts = np.array([len(a) for a in self.actions], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.P = sp.csr_matrix(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        n_sa = int(self.offsets[-1])
        if self.P.shape != (n_sa, len(self.states)):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n_sa, len(self.states))}")
        if self.R.shape != (n_sa,):
            raise ValueError(f"R has shape {self.R.shape}, expected {(n_sa,)}")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")
        rows = np.asarray(self.P.sum(axis=1)).ravel()
        if np.any(np.abs(rows - 1.0) > 1e-12):
            bad = int(np.argmax(np.abs(rows - 1.0)))
            raise ValueError(f"transition row {bad} sums to {rows[bad]!r}")

    @classmethod
    def from_transitions(cls, states: Sequence, actions: Sequence[Sequence],
                         transitions: dict[tuple[int, int], dict[int, float]],
                         rewards: dict[tuple[int, int], float], gamma: float = 0.9) -> "TabularMDP":
        """Build from ``{(s, a): {s_next: p}}`` and ``{(s, a): r}`` with local action indices."""
        counts = [len(a) for a in actions]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        rows, cols, vals = [], [], []
        R = np.zeros(int(offsets[-1]))
        for (s, a), dist in transitions.items():
            row = offsets[s] + a
            for nxt, p in dist.items():
                rows.append(row)
                cols.append(nxt)
                vals.append(p)
            R[row] = rewards.get((s, a), 0.0)
        P = sp.csr_matrix((vals, (rows, cols)), shape=(int(offsets[-1]), len(states)))
        return cls(list(states), [list(a) for a in actions], P, R, gamma)

    @property
    def num_states(self) -> int:
        return len(self.states)

    @property
    def num_pairs(self) -> int:
        return int(self.offsets[-1])

    def sa(self, state: int, action: int) -> int:
        return int(self.offsets[state] + action)

    def pair_state(self) -> np.ndarray:
        """Owning state index of every flat state-action row."""
        return np.repeat(np.arange(self.num_states), np.diff(self.offsets))

    def row(self, sa: int) -> dict[int, float]:
        start, end = self.P.indptr[sa], self.P.indptr[sa + 1]
        return dict(zip(self.P.indices[start:end].tolist(), self.P.data[start:end].tolist()))


def value_iteration(mdp: TabularMDP, tol: float = 1e-9, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q as a flat array over state-action rows.

    Iterates Bellman optimality backups until the sup-norm change of Q is at
    most ``tol``.
    """
    q = np.zeros(mdp.num_pairs)
    starts = mdp.offsets[:-1]
    for _ in range(max_iter):
        v = np.maximum.reduceat(q, starts)
        q_new = mdp.R + mdp.gamma * (mdp.P @ v)
        residual = float(np.max(np.abs(q_new - q))) if q.size else 0.0
        q = q_new
        if residual <= tol:
            return q
    raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} iterations")


def state_values(mdp: TabularMDP, q: np.ndarray) -> np.ndarray:
    return np.maximum.reduceat(q, mdp.offsets[:-1])


# -- ground model of the move-effect system ---------------------------------------------------


@dataclass(frozen=True)
class GroundState:
    """World configuration plus the last k-1 (observation key, action) pairs.

    Terminal states carry only the effector bit reached on the goal step.
    """

    config: EnvState | None
    history: tuple = ()
    terminal: bool = False
    terminal_theta: int = 0

    @property
    def theta(self) -> int:
        return self.terminal_theta if self.terminal else self.config.effector.theta


def _decode(obs_key) -> tuple[np.ndarray, int]:
    shape, data, theta = obs_key
    return np.frombuffer(data, dtype=np.float64).reshape(shape), theta


def enumerate_ground(env: MoveEffectEnv, k: int = 2, gamma: float = 0.9,
                     max_states: int = 1_000_000) -> TabularMDP:
    """Exact tabular model of the current stage with history-k states."""
    actions = env.action_space()
    keep = k - 1
    index: dict[GroundState, int] = {}
    states: list[GroundState] = []

    def intern(s: GroundState) -> int:
        i = index.get(s)
        if i is None:
            if len(states) >= max_states:
                raise StateBoundError(f"more than {max_states} ground states")
            i = index[s] = len(states)
            states.append(s)
        return i

    for config in env.initial_states():
        intern(GroundState(config))

    rows, cols, vals, rewards = [], [], [], []
    action_lists: list[list] = []
    i = 0
    while i < len(states):
        s = states[i]
        if s.terminal:
            rows.append(len(rewards))
            cols.append(i)
            vals.append(1.0)
            rewards.append(0.0)
            action_lists.append([ABSORB])
            i += 1
            continue
        obs_key = env.observe(s.config).key()
        for a in actions:
            nxt, r, reached = env.transition(s.config, a)
            if reached:
                t = GroundState(None, (), True, nxt.effector.theta)
            else:
                hist = (s.history + ((obs_key, a),))[-keep:] if keep > 0 else ()
                t = GroundState(nxt, hist)
            rows.append(len(rewards))
            cols.append(intern(t))
            vals.append(1.0)
            rewards.append(r)
        action_lists.append(list(actions))
        i += 1
    n_sa = len(rewards)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n_sa, len(states)))
    return TabularMDP(states, action_lists, P, np.array(rewards), gamma)


class DeicticMaps:
    """The pair ``<f, {g_s}>`` on ground states, producing canonical byte keys.

    ``g`` crops every action of a state in one batch and caches the result
    for the most recent state, so iterating actions state by state is cheap.
    """

    TERMINAL = b"terminal"
    ABSORB_KEY = b"absorb"

    def __init__(self, cfg: DeicticConfig, env: MoveEffectEnv):
        self.cfg = cfg
        self.env = env
        self.num_orientations = env.grid.num_orientations
        self._cached_state = None
        self._cached_keys: dict = {}

    def abstract_state(self, s: GroundState):
        pairs = [(_decode(ok)[0], a) for ok, a in s.history]
        return state_map(pairs, s.theta, self.cfg, self.num_orientations)

    def f(self, s: GroundState) -> bytes:
        if s.terminal:
            return self.TERMINAL
        return self.abstract_state(s).to_bytes()

    def g(self, s: GroundState, a) -> bytes:
        if s.terminal:
            return self.ABSORB_KEY
        if self._cached_state is not s:
            actions = self.env.action_space()
            image = self.env.render_image(s.config)
            abstract = action_map_many(image, actions, self.cfg.crop, self.num_orientations)
            self._cached_keys = {act: x.to_bytes() for act, x in zip(actions, abstract)}
            self._cached_state = s
        key = self._cached_keys.get(a)
        if key is None:
            image = self.env.render_image(s.config)
            key = action_map_many(image, [a], self.cfg.crop, self.num_orientations)[0].to_bytes()
        return key


# -- abstraction ------------------------------------------------------------------------------


@dataclass
class AbstractionReport:
    well_defined: bool = False
    max_transition_discrepancy: float = 0.0
    max_reward_discrepancy: float = 0.0
    theta_independence_holds: bool = False
    value_equivalence_gap: float = float("nan")
    ground_states: int = 0
    ground_pairs: int = 0
    abstract_states: int = 0
    abstract_pairs: int = 0
    gamma: float = 0.9
    tol: float = 1e-9
    seconds: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Abstraction:
    mdp: TabularMDP
    state_index: np.ndarray  # ground state -> abstract state
    pair_index: np.ndarray  # ground flat pair -> abstract flat pair
    report: AbstractionReport


def _g_keys(g, s, actions) -> list:
    return [g(s, a) for a in actions]


def induce_abstract(ground: TabularMDP, f: Callable[[Any], Hashable],
                    g: Callable[[Any, Any], Hashable]) -> Abstraction:
    """Block-aggregate ``ground`` under ``(f, g)`` and measure consistency.

    ``T'`` and ``R'`` average over the representatives of each abstract pair.
    The discrepancies are the largest spread (max minus min) of any aggregated
    next-state probability or reward inside one abstract pair; both are zero
    exactly when the maps satisfy the homomorphism conditions.
    """
    s_keys = [f(s) for s in ground.states]
    s_ids: dict[Hashable, int] = {}
    state_index = np.array([s_ids.setdefault(key, len(s_ids)) for key in s_keys], dtype=np.int64)
    n_abs = len(s_ids)

    pair_class = np.empty(ground.num_pairs, dtype=np.int64)
    class_ids: dict[tuple[int, Hashable], int] = {}
    class_members: list[list[int]] = []
    abs_actions: list[dict[Hashable, None]] = [dict() for _ in range(n_abs)]
    for si, s in enumerate(ground.states):
        a_keys = _g_keys(g, s, ground.actions[si])
        zs = int(state_index[si])
        for ai, key in enumerate(a_keys):
            cls = class_ids.get((zs, key))
            if cls is None:
                cls = class_ids[(zs, key)] = len(class_members)
                class_members.append([])
                abs_actions[zs][key] = None
            pair_class[ground.offsets[si] + ai] = cls
            class_members[cls].append(int(ground.offsets[si] + ai))

    # aggregate ground rows over f-classes of the successor
    agg = sp.csr_matrix(
        (np.ones(ground.num_states), (np.arange(ground.num_states), state_index)),
        shape=(ground.num_states, n_abs),
    )
    lumped = (ground.P @ agg).tocsr()

    abs_rows, abs_cols, abs_vals = [], [], []
    abs_rewards = np.zeros(len(class_members))
    t_disc = 0.0
    r_disc = 0.0
    for cls, members in enumerate(class_members):
        block = lumped[members].toarray()
        rew = ground.R[members]
        if len(members) > 1:
            t_disc = max(t_disc, float(np.max(block.max(axis=0) - block.min(axis=0))))
            r_disc = max(r_disc, float(rew.max() - rew.min()))
        mean = block.mean(axis=0)
        nz = np.nonzero(mean)[0]
        abs_rows.extend([cls] * len(nz))
        abs_cols.extend(nz.tolist())
        abs_vals.extend(mean[nz].tolist())
        abs_rewards[cls] = rew.mean()

    # reorder classes so each abstract state's actions are contiguous
    order: list[int] = []
    abstract_action_lists = []
    for zs in range(n_abs):
        keys = list(abs_actions[zs])
        abstract_action_lists.append(keys)
        order.extend(class_ids[(zs, key)] for key in keys)
    position = np.empty(len(order), dtype=np.int64)
    position[np.array(order, dtype=np.int64)] = np.arange(len(order))
    P_abs = sp.csr_matrix((abs_vals, (position[np.array(abs_rows, dtype=np.int64)], abs_cols)),
                          shape=(len(order), n_abs))
    # renormalize against rounding of the averaged rows
    sums = np.asarray(P_abs.sum(axis=1)).ravel()
    P_abs = sp.diags(1.0 / sums) @ P_abs
    R_abs = abs_rewards[np.array(order, dtype=np.int64)]
    abstract_states = list(s_ids)
    mdp = TabularMDP(abstract_states, abstract_action_lists, P_abs, R_abs, ground.gamma)

    report = AbstractionReport(
        well_defined=(t_disc <= 1e-12 and r_disc <= 1e-12),
        max_transition_discrepancy=t_disc,
        max_reward_discrepancy=r_disc,
        ground_states=ground.num_states,
        ground_pairs=ground.num_pairs,
        abstract_states=n_abs,
        abstract_pairs=len(order),
        gamma=ground.gamma,
    )
    return Abstraction(mdp, state_index, position[pair_class], report)


def check_theta_independence(ground: TabularMDP, g: Callable[[Any, Any], Hashable],
                             theta: Callable[[Any], int] = lambda s: s.theta,
                             f: Callable[[Any], Hashable] | None = None) -> bool:
    """Whether the next effector bit is a function of the abstract action.

    Pairs are compared when they share the current effector bit and the
    abstract action ``g_s(a)``; the induced distributions over the next bit
    must coincide. Pass ``f`` to condition on the whole abstract state.
    """
    thetas = np.array([theta(s) for s in ground.states])
    seen: dict[tuple, dict] = {}
    for si, s in enumerate(ground.states):
        cond = f(s) if f is not None else thetas[si]
        for ai, key in enumerate(_g_keys(g, s, ground.actions[si])):
            dist: dict[int, float] = {}
            for nxt, p in ground.row(ground.sa(si, ai)).items():
                t = int(thetas[nxt])
                dist[t] = dist.get(t, 0.0) + p
            ref = seen.setdefault((cond, key), dist)
            if ref is not dist:
                keys = set(ref) | set(dist)
                if any(abs(ref.get(t, 0.0) - dist.get(t, 0.0)) > 1e-12 for t in keys):
                    return False
    return True


def check_theorem1(ground_q: np.ndarray, abstract_q: np.ndarray, abstraction: Abstraction) -> float:
    """``max |Q*(s, a) - Q'*(f(s), g_s(a))|`` over every ground pair."""
    if ground_q.size == 0:
        return 0.0
    return float(np.max(np.abs(ground_q - abstract_q[abstraction.pair_index])))


def run_homcheck(env: MoveEffectEnv, cfg: DeicticConfig, gamma: float = 0.9, tol: float = 1e-9,
                 max_states: int = 1_000_000) -> AbstractionReport:
    """Enumerate, abstract, and compare optimal values for the env's current stage."""
    t0 = time.perf_counter()
    ground = enumerate_ground(env, cfg.k, gamma, max_states)
    maps = DeicticMaps(cfg, env)
    abstraction = induce_abstract(ground, maps.f, maps.g)
    report = abstraction.report
    report.theta_independence_holds = check_theta_independence(ground, maps.g)
    q = value_iteration(ground, tol)
    q_abs = value_iteration(abstraction.mdp, tol)
    report.value_equivalence_gap = check_theorem1(q, q_abs, abstraction)
    report.tol = tol
    report.seconds = time.perf_counter() - t0
    return report

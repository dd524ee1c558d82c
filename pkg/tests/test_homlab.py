import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from deictic.env import CurriculumStage, EnvConfig, MoveEffectEnv, StateBoundError
from deictic.homlab import (
    ConvergenceError,
    DeicticMaps,
    TabularMDP,
    check_theorem1,
    check_theta_independence,
    enumerate_ground,
    induce_abstract,
    run_homcheck,
    state_values,
    value_iteration,
)
from deictic.mapping import CropSpec, DeicticConfig


def chain(gamma=0.9):
    # s0 --go--> s1 --go--> goal (r=1) ; "stay" self-loops ; goal absorbing
    trans = {(0, 0): {1: 1.0}, (0, 1): {0: 1.0}, (1, 0): {2: 1.0}, (1, 1): {1: 1.0}, (2, 0): {2: 1.0}}
    rewards = {(1, 0): 1.0}
    return TabularMDP.from_transitions(["s0", "s1", "goal"], [["go", "stay"], ["go", "stay"], ["absorb"]],
                                       trans, rewards, gamma)


def test_value_iteration_on_a_chain():
    m = chain()
    q = value_iteration(m, tol=1e-12)
    assert q[m.sa(1, 0)] == pytest.approx(1.0, abs=1e-10)
    assert q[m.sa(0, 0)] == pytest.approx(0.9, abs=1e-10)
    assert q[m.sa(0, 1)] == pytest.approx(0.81, abs=1e-10)
    assert q[m.sa(2, 0)] == 0.0
    assert list(state_values(m, q)) == pytest.approx([0.9, 1.0, 0.0])


def random_mdp(seed, n=6, na=3, gamma=0.8):
    rng = np.random.default_rng(seed)
    trans, rewards = {}, {}
    for s in range(n):
        for a in range(na):
            p = rng.dirichlet(np.ones(n) * 0.5)
            trans[(s, a)] = {j: float(p[j]) for j in range(n) if p[j] > 0}
            rewards[(s, a)] = float(rng.normal())
    # renormalize after dropping exact zeros
    for key, dist in trans.items():
        total = sum(dist.values())
        trans[key] = {j: p / total for j, p in dist.items()}
    return TabularMDP.from_transitions(list(range(n)), [list(range(na))] * n, trans, rewards, gamma), trans, rewards


def policy_iteration_oracle(n, na, trans, rewards, gamma):
    P = np.zeros((n, na, n))
    R = np.zeros((n, na))
    for (s, a), dist in trans.items():
        for j, p in dist.items():
            P[s, a, j] = p
        R[s, a] = rewards[(s, a)]
    pi = np.zeros(n, dtype=int)
    while True:
        Ppi = P[np.arange(n), pi]
        v = np.linalg.solve(np.eye(n) - gamma * Ppi, R[np.arange(n), pi])
        q = R + gamma * P @ v
        new = q.argmax(axis=1)
        if np.array_equal(new, pi) or np.allclose(q[np.arange(n), new], q[np.arange(n), pi], atol=1e-14):
            return q
        pi = new


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_value_iteration_matches_policy_iteration(seed):
    m, trans, rewards = random_mdp(seed)
    q = value_iteration(m, tol=1e-12).reshape(6, 3)
    assert np.allclose(q, policy_iteration_oracle(6, 3, trans, rewards, 0.8), atol=1e-9)


def test_mdp_validation():
    with pytest.raises(ValueError):
        chain(gamma=1.0)
    P = sp.csr_matrix(np.array([[0.5, 0.4]]))
    with pytest.raises(ValueError, match="at least one action"):
        TabularMDP(["a", "b"], [["x"], []], P, np.zeros(1))
    with pytest.raises(ValueError, match="sums"):
        TabularMDP(["a", "b"], [["x"], ["y"]], sp.csr_matrix(np.array([[0.5, 0.4], [0, 1.0]])), np.zeros(2))


def test_value_iteration_reports_non_convergence():
    with pytest.raises(ConvergenceError):
        value_iteration(chain(gamma=0.99), tol=1e-15, max_iter=3)


def test_identity_abstraction_is_exact():
    m = chain()
    ab = induce_abstract(m, lambda s: s, lambda s, a: a)
    assert ab.report.well_defined and ab.mdp.num_pairs == m.num_pairs
    assert check_theorem1(value_iteration(m), value_iteration(ab.mdp), ab) <= 1e-9


def test_merging_bisimilar_states_is_exact_and_others_are_not():
    # s0 and s0b behave identically; s1 differs
    trans = {(0, 0): {2: 1.0}, (1, 0): {2: 1.0}, (2, 0): {3: 1.0}, (3, 0): {3: 1.0}}
    rewards = {(2, 0): 1.0}
    m = TabularMDP.from_transitions(["s0", "s0b", "s1", "goal"], [["go"]] * 4, trans, rewards)
    good = induce_abstract(m, lambda s: "s0" if s == "s0b" else s, lambda s, a: a)
    assert good.report.well_defined and good.report.abstract_states == 3
    assert check_theorem1(value_iteration(m), value_iteration(good.mdp), good) <= 1e-9
    bad = induce_abstract(m, lambda s: "x" if s in ("s0", "s1") else s, lambda s, a: a)
    assert not bad.report.well_defined
    assert bad.report.max_reward_discrepancy == 1.0
    assert check_theorem1(value_iteration(m), value_iteration(bad.mdp), bad) > 0.0


def test_theta_independence_synthetic():
    # two states with theta 0; the same abstract action leads to different next theta
    trans = {(0, 0): {2: 1.0}, (1, 0): {3: 1.0}, (2, 0): {2: 1.0}, (3, 0): {3: 1.0}}
    m = TabularMDP.from_transitions(["a", "b", "c", "d"], [["x"]] * 4, trans, {})
    theta = {"a": 0, "b": 0, "c": 0, "d": 1}
    assert not check_theta_independence(m, lambda s, a: "same", theta=lambda s: theta[s])
    assert check_theta_independence(m, lambda s, a: s, theta=lambda s: theta[s])


def small_env(w=2, h=1, n=1):
    return MoveEffectEnv(EnvConfig(width=w, height=h, num_objects=n), CurriculumStage("disk"))


def test_ground_model_is_stochastic_and_bounded():
    env = small_env(3, 1, 2)
    g = enumerate_ground(env, k=2)
    sums = np.asarray(g.P.sum(axis=1)).ravel()
    assert np.allclose(sums, 1.0)
    assert any(s.terminal for s in g.states)
    with pytest.raises(StateBoundError):
        enumerate_ground(small_env(3, 3, 2), k=2, max_states=50)


def test_toy_homcheck_is_fast_and_certified():
    report = run_homcheck(small_env(), DeicticConfig(2, CropSpec(3)))
    assert report.well_defined and report.theta_independence_holds
    assert report.value_equivalence_gap <= 2e-9 / 0.1
    assert report.seconds < 1.0
    d = report.to_dict()
    assert set(d) >= {"well_defined", "max_transition_discrepancy", "max_reward_discrepancy",
                      "theta_independence_holds", "value_equivalence_gap"}


def test_three_in_a_row_strip_with_k1_is_certified():
    # on a 3x1 strip a 3x3 crop sees the whole row, and k=1 suffices for disks
    report = run_homcheck(small_env(3, 1, 2), DeicticConfig(1, CropSpec(5)))
    assert report.well_defined and report.value_equivalence_gap <= 2e-8


def test_deictic_maps_keys():
    env = small_env(3, 1, 2)
    g = enumerate_ground(env, k=2)
    maps = DeicticMaps(DeicticConfig(2, CropSpec(3)), env)
    s = g.states[0]
    keys = [maps.g(s, a) for a in g.actions[0]]
    assert len(keys) == len(g.actions[0])
    assert maps.f(s) == maps.f(s)
    terminal = next(x for x in g.states if x.terminal)
    assert maps.f(terminal) == DeicticMaps.TERMINAL


def test_block_domain_k1_is_not_certified():
    # with k=1 the held block's grasp offset is invisible to the abstract state
    env = MoveEffectEnv(EnvConfig(width=5, height=5, num_objects=2, block_length=3),
                        CurriculumStage("block", None, 2))
    report = run_homcheck(env, DeicticConfig(1, CropSpec(1)))
    assert not (report.well_defined and report.theta_independence_holds)
    assert report.value_equivalence_gap > 0

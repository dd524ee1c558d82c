import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from deictic.cli import EXIT_OK, EXIT_RUNTIME, EXIT_THRESHOLD, EXIT_USAGE, main, parse_index_list, UsageError
from deictic.config import ConfigError, dump_config, load_config, validate
from deictic.env import CurriculumStage, EnvConfig, MoveEffectEnv
from deictic.learner import LearningCurve

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_config(tmp_path, data, name="c.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


# -- config ---------------------------------------------------------------------------------


def test_unknown_key_is_rejected_with_its_path(tmp_path, capsys):
    path = write_config(tmp_path, {"grid": {"width": 3, "colour": "red"}})
    with pytest.raises(ConfigError, match="grid.colour"):
        load_config(path)
    code, _, err = run(capsys, "homcheck", "--config", path)
    assert code == EXIT_USAGE and "grid.colour" in err


def test_invalid_values_name_the_key():
    with pytest.raises(ConfigError, match="deictic.window"):
        validate({"deictic": {"window": 4}})
    with pytest.raises(ConfigError, match="learner.gamma"):
        validate({"learner": {"gamma": 1.5}})
    with pytest.raises(ConfigError, match="disks"):
        validate({"task": "grid-disk", "curriculum": {"stages": [{"object_type": "block"}]}})
    with pytest.raises(ConfigError, match="exactly one stage"):
        validate({"agents": ["baseline"], "curriculum": {"stages": [{}, {}]}})
    with pytest.raises(ConfigError, match="hierarchy"):
        validate({"curriculum": {"stages": [{"hierarchy": True}]}})
    with pytest.raises(ConfigError, match="mapping"):
        validate([1, 2])


def test_dump_and_load_roundtrip(tmp_path):
    cfg = load_config(CONFIGS / "table1_paper.yaml")
    path = tmp_path / "again.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_sample_configs_carry_the_published_hyperparameters():
    paper = load_config(CONFIGS / "table1_paper.yaml")
    lr = paper.learner
    assert (lr.replay.capacity, lr.batch_size, lr.lr) == (10_000, 10, 3e-4)
    assert (lr.replay.mode, lr.replay.alpha, lr.replay.beta, lr.replay.eps) == ("prioritized", 0.6, 0.4, 1e-6)
    assert lr.hierarchy.eta == 0.2 and paper.grid.horizon == 10
    assert (lr.epsilon.start, lr.epsilon.end) == (0.5, 0.1)
    actions = [MoveEffectEnv(paper.env_config(), s).num_actions for s in paper.stages()]
    assert actions == [100, 400, 100, 200, 1296, 4624, 13456, 26912]
    assert paper.hierarchy_flags() == [False] * 6 + [True] * 2
    fig2 = load_config(CONFIGS / "fig2_baseline_5x5.yaml").learner
    assert (fig2.epsilon.start, fig2.epsilon.end, fig2.replay.mode) == (1.0, 0.1, "uniform")
    fig3 = load_config(CONFIGS / "fig3_compare_5x5.yaml")
    assert fig3.agents == ["deictic", "baseline"]
    assert fig3.train_config("deictic").use_v and not fig3.train_config("baseline").use_v


def test_overrides():
    cfg = load_config(CONFIGS / "curriculum_desk.yaml")
    sub = cfg.with_overrides(seed=7, stages=[1, 5], episodes=3)
    assert sub.seed == 7 and [s.name for s in sub.stages()] == ["disks-25x2", "blocks-81x8"]
    assert sub.train_config().max_episodes == 3
    with pytest.raises(ConfigError, match="no stage 9"):
        cfg.with_overrides(stages=[9])


def test_index_lists():
    assert parse_index_list("1,3-5") == [1, 3, 4, 5]
    for bad in ("", "a", "5-3"):
        with pytest.raises(UsageError):
            parse_index_list(bad)


# -- command line ---------------------------------------------------------------------------


def test_missing_config_and_usage_errors(tmp_path, capsys):
    assert run(capsys, "train", "--config", tmp_path / "nope.yaml")[0] == EXIT_USAGE
    assert run(capsys)[0] == EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    assert run(capsys, "homcheck", "--config", CONFIGS / "homcheck_toy.yaml", "--stages", "2")[0] == EXIT_USAGE


def test_homcheck_commands(tmp_path, capsys):
    code, out, _ = run(capsys, "homcheck", "--config", CONFIGS / "homcheck_toy.yaml", "--out", tmp_path)
    report = json.loads(out)
    assert code == EXIT_OK and report["well_defined"] and report["seconds"] < 1.0
    assert json.loads((tmp_path / "homcheck.json").read_text()) == report
    code, out, _ = run(capsys, "homcheck", "--config", CONFIGS / "homcheck_broken.yaml")
    assert code == EXIT_OK and not json.loads(out)["well_defined"]
    data = yaml.safe_load((CONFIGS / "homcheck_broken.yaml").read_text())
    data["homcheck"]["expect"] = "certified"
    assert run(capsys, "homcheck", "--config", write_config(tmp_path, data))[0] == EXIT_THRESHOLD


def test_homcheck_state_bound_is_a_runtime_failure(tmp_path, capsys):
    data = yaml.safe_load((CONFIGS / "homcheck_3x3.yaml").read_text())
    data["homcheck"]["max_states"] = 10
    code, _, err = run(capsys, "homcheck", "--config", write_config(tmp_path, data))
    assert code == EXIT_RUNTIME and "states" in err


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 1, "--specs", 5)
    res = json.loads(out)
    assert code == EXIT_OK and res["passed"] and res["max_rel_error"] <= 1e-4


def test_zero_parameter_network_passes_gradcheck():
    from deictic.nn import NetworkSpec, gradient_check, init_params

    spec = NetworkSpec(1, 4, 4, aux_dim=2, conv=((2, 3, 1),), fc=(3,))
    zeros = {k: np.zeros_like(v) for k, v in init_params(spec).items()}
    assert gradient_check(spec, params=zeros).passed


@pytest.fixture(scope="module")
def trained_3x3(tmp_path_factory):
    out = tmp_path_factory.mktemp("g3")
    assert main(["train", "--config", str(CONFIGS / "grid_disk_3x3.yaml"), "--out", str(out)]) == EXIT_OK
    return out


def test_train_writes_all_outputs(trained_3x3):
    for name in ("config.yaml", "summary.json", "curves.png", "curves.dat", "deictic/curve.csv",
                 "deictic/q.params", "deictic/v.params"):
        assert (trained_3x3 / name).exists(), name
    curve = LearningCurve.read(trained_3x3 / "deictic" / "curve.csv")
    assert len(curve.rows) == 1000
    assert load_config(trained_3x3 / "config.yaml").output_dir == str(trained_3x3)
    assert (trained_3x3 / "curves.png").read_bytes()[:4] == b"\x89PNG"


def test_eval_of_trained_parameters(trained_3x3, capsys):
    code, out, _ = run(capsys, "eval", "--config", CONFIGS / "grid_disk_3x3.yaml", "--params",
                       trained_3x3 / "deictic" / "q.params", "--episodes", 200, "--min-success", 0.95)
    assert code == EXIT_OK and json.loads(out)["success_rate"] >= 0.95


def uniform_policy_success(episodes=2000, seed=0):
    env = MoveEffectEnv(EnvConfig(width=3, height=3), CurriculumStage("disk"))
    rng = np.random.default_rng(seed)
    actions = env.action_space()
    wins = 0
    for _ in range(episodes):
        env.reset(rng)
        while not env.done:
            env.step(actions[rng.integers(len(actions))])
        wins += env.goal(env.state)
    return wins / episodes


def test_eval_of_untrained_parameters_is_near_chance(tmp_path, capsys):
    out = tmp_path / "untrained"
    assert run(capsys, "train", "--config", CONFIGS / "grid_disk_3x3.yaml", "--out", out, "--budget", 0)[0] \
        == EXIT_THRESHOLD
    code, text, _ = run(capsys, "eval", "--config", CONFIGS / "grid_disk_3x3.yaml", "--params", out / "deictic",
                        "--episodes", 200, "--min-success", 0.95)
    assert code == EXIT_THRESHOLD
    assert json.loads(text)["success_rate"] <= uniform_policy_success() + 0.15


def test_eval_rejects_bad_inputs(tmp_path, capsys):
    cfg = CONFIGS / "grid_disk_3x3.yaml"
    assert run(capsys, "eval", "--config", cfg, "--params", tmp_path, "--episodes", 0)[0] == EXIT_USAGE
    (tmp_path / "q.params").write_bytes(b"garbage")
    code, _, err = run(capsys, "eval", "--config", cfg, "--params", tmp_path, "--episodes", 5)
    assert code == EXIT_RUNTIME and "magic" in err


def test_seed_override_changes_only_the_random_stream(tmp_path, capsys):
    cfg = CONFIGS / "fig2_baseline_3x3.yaml"
    for seed in (1, 2):
        assert run(capsys, "train", "--config", cfg, "--seed", seed, "--budget", 5, "--out", tmp_path / f"s{seed}")[0] \
            == EXIT_OK
    a = yaml.safe_load((tmp_path / "s1" / "config.yaml").read_text())
    b = yaml.safe_load((tmp_path / "s2" / "config.yaml").read_text())
    assert {k for k in a if a[k] != b[k]} == {"seed", "output_dir"}
    ca = (tmp_path / "s1" / "baseline" / "curve.csv").read_text()
    cb = (tmp_path / "s2" / "baseline" / "curve.csv").read_text()
    assert ca != cb and ca.splitlines()[0] == cb.splitlines()[0]


def test_sweep_runs_one_process_per_seed(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--config", CONFIGS / "fig2_baseline_3x3.yaml", "--seeds", "0-1",
                       "--budget", 3, "--out", tmp_path)
    assert code == EXIT_OK
    res = json.loads(out)
    assert res["seeds"] == [0, 1] and res["failed"] == []
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0] == "seed,agent,stage,solved,episodes,episodes_to_threshold" and len(rows) == 3
    assert (tmp_path / "seed1" / "baseline" / "curve.csv").exists()

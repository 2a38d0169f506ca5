import math

import numpy as np
import pandas as pd
import pytest

from ml.agents import Variant
from ml.harness import (
    CSV_COLUMNS,
    ORDERINGS,
    ConfigError,
    EpisodeRecord,
    MetricsLog,
    compare_table,
    emit_plots,
    episode_seed,
    evaluate,
    load_checkpoint,
    load_config,
    moving_average,
    ordering_check,
    run_experiment,
    run_paths,
    run_seed,
    share_trend_slope,
    sweep,
    train,
)
from tests.conftest import ROOT, RULES_PATH, TINY_SETTINGS

def make_log(rewards, shares=None, variant="test"):
    records = []
    for i, r in enumerate(rewards):
        share = shares[i] if shares is not None else None
        records.append(EpisodeRecord(
            episode=i, seed=0, reward=float(r), steps=10,
            share_a1=None if share is None else 1.0 - share,
            share_a2=share,
            share_other=None if share is None else 0.0,
        ))
    return MetricsLog(variant, records)

def test_random_agent_averages_zero(tmp_path):
    """A random agent collects about zero reward on the default world."""
    cfg = load_config(None, ["variant=random", "episodes=1000", f"output_dir={tmp_path}"])
    _, log = run_seed(cfg, 0)
    assert len(log) == 1000
    assert abs(log.rewards.mean()) <= 0.3
    assert set(r.steps for r in log) == {cfg.world.episode_len}

def test_planner_beats_random(tmp_path):
    base = [f"rules_path={RULES_PATH}", "episodes=200", f"output_dir={tmp_path}"]
    _, planner = run_seed(load_config(None, base + ["variant=planner"]), 0)
    _, random = run_seed(load_config(None, base + ["variant=random"]), 0)
    se = math.sqrt(planner.rewards.var(ddof=1) / 200 + random.rewards.var(ddof=1) / 200)
    assert planner.rewards.mean() - random.rewards.mean() >= 5 * se

@pytest.mark.parametrize("variant", list(Variant))
def test_every_variant_trains_and_evaluates(tiny_config, variant):
    cfg = tiny_config.for_variant(variant)
    agent, log = run_seed(cfg, 0)
    assert len(log) == 2
    assert all(r.steps == cfg.world.episode_len for r in log)
    assert log.has_shares == (variant is Variant.DRL_EK)
    frozen = evaluate(agent, cfg, episodes=2)
    assert len(frozen) == 2

def test_same_seed_gives_identical_csv(tiny_config):
    first = train(tiny_config, plots=False)[0]
    path = run_paths(tiny_config, 0)["csv"]
    before = path.read_bytes()
    train(tiny_config, plots=False)
    assert path.read_bytes() == before
    assert before.decode().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert len(first) == tiny_config.episodes

def test_episode_seeds_differ_per_episode():
    assert episode_seed(0, 0) != episode_seed(0, 1)
    assert episode_seed(0, 1) != episode_seed(1, 0)
    assert episode_seed(3, 4) == episode_seed(3, 4)

def test_run_experiment_concatenates_seeds(tiny_config):
    cfg = tiny_config.for_variant("random", seeds=[0, 1])
    log = run_experiment(cfg)
    assert [r.seed for r in log] == [0, 0, 1, 1]

def test_checkpoint_round_trip(tiny_config):
    cfg = tiny_config.for_variant("meta")
    train(cfg, plots=False)
    agent = load_checkpoint(run_paths(cfg, 0)["checkpoint"])
    assert len(evaluate(agent, cfg)) == cfg.eval_episodes
    with pytest.raises(FileNotFoundError):
        load_checkpoint(run_paths(cfg, 7)["checkpoint"])

def test_train_writes_plots(tiny_config):
    cfg = tiny_config.for_variant("drl_ek")
    train(cfg)
    out = run_paths(cfg, 0)["csv"].parent
    for name in ("drl_ek_seed0_reward.csv", "drl_ek_seed0_reward.svg",
                 "drl_ek_seed0_shares.csv", "drl_ek_seed0_shares.svg"):
        assert (out / name).exists()

def test_metrics_csv_reads_back(tmp_path):
    log = make_log([1.5, -0.25, 0.1], shares=[None, 0.4, 0.6])
    path = log.write_csv(tmp_path / "run.csv")
    back = MetricsLog.read_csv(path)
    assert back.variant == "run"
    assert back.records == log.records
    pd.DataFrame({"episode": [0]}).to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(ValueError):
        MetricsLog.read_csv(tmp_path / "bad.csv")

def test_moving_average():
    values = [1.0, 3.0, 5.0, 7.0]
    assert moving_average(values, 1).tolist() == values
    assert moving_average([2.0] * 6, 3).tolist() == [2.0] * 6
    assert moving_average(values, 10).tolist() == [4.0] * 4
    assert moving_average(values, 2).tolist() == [1.0, 2.0, 4.0, 6.0]
    with pytest.raises(ValueError):
        moving_average(values, 0)

def test_compare_table():
    log = make_log([1.0, 2.0, 3.0, 4.0])
    table = compare_table({"a": log, "b": make_log([1.0, 2.0, 3.0, 4.0])}, tail=2)
    assert list(table.columns) == ["variant", "mean", "std", "n"]
    assert table.loc[0, ["mean", "std", "n"]].tolist() == table.loc[1, ["mean", "std", "n"]].tolist()
    assert table.loc[0, "mean"] == 3.5
    assert table.loc[0, "std"] == 0.5
    with pytest.raises(ValueError):
        compare_table({"empty": MetricsLog("empty")})

def test_plots_without_shares(tmp_path):
    written = emit_plots(make_log([0.0, 1.0]), tmp_path, "two")
    assert sorted(p.name for p in written) == ["two_reward.csv", "two_reward.svg"]
    assert "<svg" in (tmp_path / "two_reward.svg").read_text()
    assert not (tmp_path / "two_shares.csv").exists()

def test_plots_with_shares(tmp_path):
    emit_plots(make_log([0.0, 1.0, 2.0], shares=[0.2, 0.4, 0.6]), tmp_path, "run", window=2)
    rewards = pd.read_csv(tmp_path / "run_reward.csv")
    assert rewards["moving_avg"].tolist() == [0.0, 0.5, 1.5]
    shares = pd.read_csv(tmp_path / "run_shares.csv")
    assert shares["share_a2"].tolist() == [0.2, 0.4, 0.6]
    with pytest.raises(ValueError):
        emit_plots(MetricsLog("empty"), tmp_path)

def test_share_trend_slope():
    rising = make_log([0.0] * 40, shares=[i / 40 for i in range(40)])
    assert share_trend_slope(rising, window=10) > 0
    flat = make_log([0.0] * 40, shares=[0.5] * 40)
    assert share_trend_slope(flat, window=10) == pytest.approx(0.0)
    assert share_trend_slope(make_log([0.0], shares=[0.3])) == 0.0
    with pytest.raises(ValueError):
        share_trend_slope(make_log([0.0, 1.0]))

def test_default_config_file():
    cfg = load_config(ROOT / "configs" / "default.conf")
    assert cfg.variant == "drl_ek"
    assert cfg.seeds == [0, 1, 2, 3, 4]
    assert cfg.detector.confusion_pairs[0].kinds == (4, 15)
    assert cfg.a3c.hidden == [128, 64]
    assert cfg.meta.k == cfg.k == 3

def test_overrides_apply_in_order(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("episodes = 10\nworld.episode_len = 20  # short\n", encoding="utf-8")
    cfg = load_config(path, ["episodes=3", "score.17=9.5", "detector.p_miss.3=0.5",
                             "detector.confusion=none", "k=2"])
    assert cfg.episodes == 3
    assert cfg.world.episode_len == 20
    assert cfg.scores == {17: 9.5}
    assert cfg.detector.p_miss_per_kind == {3: 0.5}
    assert cfg.detector.confusion_pairs == []
    assert cfg.meta.k == 2

def test_partial_baseline_keys_keep_defaults():
    cfg = load_config(None, ["dqn.lr=0.01"])
    assert cfg.dqn.hidden == [128, 64]
    assert cfg.dqn.train_every == 4

def test_selector_config_follows_run_length():
    cfg = load_config(None, ["episodes=10", "world.episode_len=20"])
    sel = cfg.selector_config()
    assert sel.feature_len == 27
    assert sel.tau_steps == 100
    assert load_config(None, ["selector.tau_steps=7"]).selector_config().tau_steps == 7

@pytest.mark.parametrize("text,line,fragment", [
    ("episodes = 5\nworld.grid_w = abc\n", 2, "world.grid_w"),
    ("episodes = 5\n\nbogus = 1\n", 3, "unknown key"),
    ("just words\n", 1, "key=value"),
    ("variant = teleport\n", 1, "variant"),
    ("world = 3\n", 1, "section"),
    ("detector.confusion = 1:2\n", 1, "confusion"),
])
def test_config_errors_name_the_line(tmp_path, text, line, fragment):
    path = tmp_path / "bad.conf"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"{path}:{line}:")
    assert fragment in str(exc.value)

def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.conf")

def test_bad_override_has_no_line():
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["episodes=0"])
    assert exc.value.line is None
    assert "<override>" in str(exc.value)

def test_sweep_on_tiny_grid(tmp_path):
    cfg = load_config(None, TINY_SETTINGS + [
        f"output_dir={tmp_path}", "episodes=1", "eval_episodes=1",
        "sweep.areas=4,9", "sweep.layers=1", "sweep.sizes=25",
    ])
    table = sweep(cfg)
    assert list(table.columns) == ["areas", "layers", "size", "mean_reward", "std_reward"]
    assert table["areas"].tolist() == [4, 9]
    assert np.isfinite(table["mean_reward"]).all()

def test_sweep_grid_validation():
    with pytest.raises(ConfigError):
        load_config(None, ["sweep.areas=5"])
    with pytest.raises(ConfigError):
        load_config(None, ["sweep.sizes=64"])

def test_ordering_check_reports_every_seed(tiny_config):
    result = ordering_check(tiny_config, "planner", "random", seeds=[0, 1], tail=2)
    assert result.total == 2 and result.required == 2
    assert len(result.margins) == 2
    assert result.passed == (result.wins == 2)

@pytest.mark.slow
@pytest.mark.parametrize("better,worse,allow_equal", ORDERINGS)
def test_variant_orderings(tmp_path, better, worse, allow_equal):
    cfg = load_config(ROOT / "configs" / "default.conf",
                      [f"output_dir={tmp_path}", f"rules_path={RULES_PATH}"])
    result = ordering_check(cfg, better, worse, allow_equal=allow_equal)
    assert result.passed, result.margins

def test_drl_ek_with_planner_knowledge(tiny_config):
    cfg = tiny_config.for_variant(Variant.DRL_EK, knowledge="planner")
    agent, log = run_seed(cfg, 0)
    assert agent.meta is None and agent.planner is not None
    assert log.has_shares and len(log) == 2
    assert len(evaluate(agent, cfg, episodes=1)) == 1

def test_knowledge_key_is_checked():
    assert load_config(None, ["knowledge=planner"]).knowledge.value == "planner"
    with pytest.raises(ConfigError):
        load_config(None, ["knowledge=oracle"])

def test_detector_kinds_follow_the_world():
    cfg = load_config(None, ["world.n_food_kinds=10", "world.n_food_items=100"])
    assert cfg.detector.n_food_kinds == 10
    assert load_config(None, ["detector.n_food_kinds=20"]).detector.n_food_kinds == 20
    with pytest.raises(ConfigError, match="n_food_kinds"):
        load_config(None, ["world.n_food_kinds=10", "world.n_food_items=100",
                           "detector.n_food_kinds=20"])

@pytest.mark.slow
def test_rl_module_share_grows_during_training(tmp_path):
    """Over a drl_ek run the selector leans more on the RL module."""
    cfg = load_config(ROOT / "configs" / "default.conf",
                      [f"output_dir={tmp_path}", f"rules_path={RULES_PATH}",
                       "variant=drl_ek", "seeds=0"])
    _, log = run_seed(cfg, 0)
    assert share_trend_slope(log, cfg.share_window) > 0

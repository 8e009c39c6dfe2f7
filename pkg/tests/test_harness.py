"""Experiment-harness tests: config contract, artifact layout, determinism,
and the CLI front end.

Training runs here are deliberately tiny (coarse grid, short epochs) — they
exercise the plumbing, not the learning curves, which have their own suite.
"""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cfsignal import cli
from cfsignal.errors import ConfigError, NotFoundError
from cfsignal.harness import (ABLATION_METHODS, BASELINE_METHODS, CF_METHODS,
                              EPOCH_HEADER, SUMMARY_HEADER, EpochReport,
                              LEARNING_METHODS, METHODS, RunConfig,
                              _episode_seed, _pareto_flags, export_case_study,
                              noise_experiment, run_ablation, train,
                              weight_sweep)
from cfsignal.sim import IntersectionSim, desk_config, encode_grid


TINY = dict(
    epochs=4, max_steps=24, train_gap=2, pre_train_steps=24,
    grid_resolution=8, hidden=16, batch_size=32, buffer_capacity=2048,
    scm_hidden=(16, 16), scm_warm_batches=20, scm_batches=2,
    ctc_cap=4, dump_records=8, case_records=2, seeds=(0,),
)


def tiny(method="3dqn", **over) -> RunConfig:
    merged = {**TINY, "method": method, **over}
    return RunConfig(**merged)


@pytest.fixture(scope="module")
def cf_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cfrun")
    cfg = tiny("cflight-r", out_dir=str(out))
    return cfg, train(cfg)


# ---------------------------------------------------------------------------
# config contract
# ---------------------------------------------------------------------------

def test_method_tables_are_consistent():
    assert set(METHODS) == set(LEARNING_METHODS) | set(BASELINE_METHODS)
    assert CF_METHODS <= set(LEARNING_METHODS)
    assert set(ABLATION_METHODS) <= set(METHODS)
    assert "3dqn" not in CF_METHODS


@pytest.mark.parametrize("over", [
    {"method": "dn3q"},
    {"env": "roundabout"},
    {"method": "fixed-time", "env": "lane-change"},
    {"cf_source": "replay"},
    {"cf_reward_mode": "ratio"},
    {"seeds": ()},
    {"train_gap": 0},
    {"w1": -0.1},
    {"noise_scale": -1.0},
    {"epochs": 0},
    {"max_steps": 0},
    {"scm_warm_batches": -1},
])
def test_validate_rejects_bad_configs(over):
    with pytest.raises(ConfigError):
        RunConfig(**over).validate()


def test_json_round_trip_preserves_every_field():
    cfg = tiny("cflight-loss", seeds=(3, 5), noise_scale=0.25,
               scm_hidden=(8, 4), out_dir="somewhere")
    clone = RunConfig.from_json(cfg.to_json())
    assert clone == cfg
    assert isinstance(clone.seeds, tuple)
    assert isinstance(clone.scm_hidden, tuple)


def test_from_json_rejects_unknown_fields():
    with pytest.raises(ConfigError, match="unknown config fields"):
        RunConfig.from_json(json.dumps({"method": "3dqn", "leraning_rate": 0.1}))


def test_effective_weights_per_method():
    base = dict(w1=0.7, w2=0.3)
    assert tiny("3dqn", **base).effective_weights() == (0.0, 1.0)
    assert tiny("cf+3dqn", **base).effective_weights() == (0.0, 1.0)
    assert tiny("cf-only", **base).effective_weights() == (0.7, 0.0)
    assert tiny("cflight-r", **base).effective_weights() == (0.7, 0.3)
    assert tiny("safe-r", **base).effective_weights() == (0.7, 0.3)


def test_uses_cf_matches_method_family():
    for m in METHODS:
        cfg = tiny(m, env="synthetic-intersection")
        assert cfg.uses_cf == (m in CF_METHODS)


def test_episode_seed_is_deterministic_and_distinct():
    seen = set()
    for seed in (0, 1, 7):
        for epoch in range(50):
            v = _episode_seed(seed, epoch)
            assert v == _episode_seed(seed, epoch)
            assert 0 <= v < (1 << 63)
            seen.add(v)
    assert len(seen) == 3 * 50


def test_epoch_report_row_matches_header():
    rep = EpochReport(epoch=3, avg_delay=1.5, throughput=42, collisions=2,
                      td_loss=0.125, epsilon=0.05)
    row = rep.row()
    assert len(row) == len(EPOCH_HEADER)
    assert row[0] == "3"
    assert row[1] == "1.500000"
    assert row[2] == "42"
    assert row[3] == "2"
    assert row[-1] == "0.050000"


# ---------------------------------------------------------------------------
# plain runs and artifacts
# ---------------------------------------------------------------------------

def test_fixed_time_baseline_never_updates(tmp_path):
    cfg = tiny("fixed-time", out_dir=str(tmp_path))
    result = train(cfg)
    (sr,) = result.seed_results
    assert sr.update_count == 0
    assert sr.records_processed == 0
    lines = Path(sr.epochs_csv).read_text().strip().splitlines()
    assert lines[0] == ",".join(EPOCH_HEADER)
    assert len(lines) == 1 + cfg.epochs
    # written config must reload to the exact same dataclass
    reloaded = RunConfig.from_json((tmp_path / "config.json").read_text())
    assert reloaded == cfg


def test_pre_train_gate_controls_update_count(tmp_path):
    never = train(tiny(pre_train_steps=10**9, out_dir=str(tmp_path / "never")))
    assert never.seed_results[0].update_count == 0
    always = train(tiny(pre_train_steps=0, out_dir=str(tmp_path / "always")))
    cfg = tiny()
    assert always.seed_results[0].update_count == cfg.epochs * cfg.max_steps


def test_observation_equals_grid_encoding_without_noise():
    from cfsignal.harness import _IntersectionEnv
    cfg = tiny()
    env = _IntersectionEnv(cfg)
    state = env.new_episode(123)
    rng = np.random.default_rng(0)
    obs = env.observe(state, 0.0, rng)
    expected = encode_grid(env.sim, state).ravel()
    np.testing.assert_array_equal(obs, expected)
    assert obs.shape == (cfg.grid_resolution ** 2,)


def test_lane_change_run_reports_round_metrics(tmp_path):
    cfg = tiny("3dqn", env="lane-change", max_steps=10, epochs=3,
               pre_train_steps=5, out_dir=str(tmp_path))
    result = train(cfg)
    (sr,) = result.seed_results
    assert 0 < sr.update_count <= cfg.epochs * cfg.max_steps
    lines = Path(sr.epochs_csv).read_text().strip().splitlines()
    assert len(lines) == 1 + cfg.epochs
    # delay column holds the rounds spent, so it can never exceed the cap
    for line in lines[1:]:
        assert float(line.split(",")[1]) <= cfg.max_steps


def test_same_config_and_seed_is_byte_identical(tmp_path, cf_run):
    cfg, first = cf_run
    rerun_cfg = replace(cfg, out_dir=str(tmp_path / "rerun"))
    second = train(rerun_cfg)
    a, b = Path(cfg.out_dir) / "seed_0", Path(rerun_cfg.out_dir) / "seed_0"
    assert (a / "epochs.csv").read_bytes() == (b / "epochs.csv").read_bytes()
    dumps_a = sorted(p.name for p in a.glob("cf_dump_*.csv"))
    dumps_b = sorted(p.name for p in b.glob("cf_dump_*.csv"))
    assert dumps_a == dumps_b
    for name in dumps_a:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (Path(cfg.out_dir) / "summary.csv").read_bytes() == \
        (Path(rerun_cfg.out_dir) / "summary.csv").read_bytes()
    assert first.summary == second.summary


def test_counterfactual_boundary_artifacts(cf_run):
    cfg, result = cf_run
    (sr,) = result.seed_results
    seed_dir = Path(cfg.out_dir) / "seed_0"
    # collisions at this grid are frequent under an exploring policy, so the
    # boundaries must have processed records and written the paired dumps
    assert sr.records_processed > 0
    dumps = sorted(seed_dir.glob("cf_dump_*.csv"))
    assert dumps, "no counterfactual dumps were written"
    header = dumps[0].read_text().splitlines()[0]
    assert header.startswith("record_id,")
    cases = sorted((seed_dir / "cases").glob("case_*.npz"))
    assert cases, "no case files were written"
    ck = seed_dir / "checkpoint"
    assert (ck / "qnet").exists()
    assert (ck / "scm").is_dir()


def test_summary_is_pooled_last10_mean_and_sample_std(tmp_path):
    cfg = tiny("fixed-time", seeds=(0, 1), out_dir=str(tmp_path))
    result = train(cfg)
    for key, mean_name, std_name in (
            ("avg_delay", "delay_mean", "delay_std"),
            ("throughput", "throughput_mean", "throughput_std"),
            ("collisions", "collisions_mean", "collisions_std")):
        pooled = np.concatenate(
            [np.asarray(sr.last10[key]) for sr in result.seed_results])
        assert result.summary[mean_name] == pytest.approx(np.mean(pooled))
        assert result.summary[std_name] == pytest.approx(np.std(pooled, ddof=1))
    lines = (tmp_path / "summary.csv").read_text().strip().splitlines()
    assert lines[0] == ",".join(SUMMARY_HEADER)
    cells = lines[1].split(",")
    assert cells[0] == "fixed-time"
    assert float(cells[7]) == pytest.approx(result.summary["delay_mean"], abs=1e-6)


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def test_ablation_writes_one_row_per_method(tmp_path):
    base = tiny(out_dir=str(tmp_path))
    rows = run_ablation(base, methods=("fixed-time", "3dqn"))
    assert [r["method"] for r in rows] == ["fixed-time", "3dqn"]
    lines = (tmp_path / "ablation.csv").read_text().strip().splitlines()
    assert lines[0] == ",".join(SUMMARY_HEADER)
    assert len(lines) == 3


def test_ablation_rejects_unknown_method(tmp_path):
    with pytest.raises(ConfigError, match="unknown ablation method"):
        run_ablation(tiny(out_dir=str(tmp_path)), methods=("3dqn", "4dqn"))


def test_weight_sweep_rejects_empty_grid(tmp_path):
    with pytest.raises(ConfigError):
        weight_sweep(tiny(out_dir=str(tmp_path)), [], [0.5])


def test_weight_sweep_marks_pareto_rows(tmp_path):
    base = tiny("fixed-time", out_dir=str(tmp_path))
    rows = weight_sweep(base, [0.2, 0.8], [0.5])
    assert len(rows) == 2
    assert {r["pareto"] for r in rows} <= {0, 1}
    lines = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert lines[0] == ",".join(SUMMARY_HEADER + ("pareto",))
    # identical training curves (weights don't touch the fixed plan) means
    # neither point can dominate the other
    assert [r["pareto"] for r in rows] == [1, 1]


def test_pareto_flags_on_hand_case():
    assert _pareto_flags([(1.0, 5.0), (2.0, 2.0), (3.0, 1.0), (3.0, 3.0)]) == \
        [1, 1, 1, 0]
    assert _pareto_flags([(1.0, 1.0), (1.0, 1.0)]) == [1, 1]


def test_noise_experiment_rejects_negative_scale(tmp_path):
    with pytest.raises(ConfigError):
        noise_experiment(tiny(out_dir=str(tmp_path)), [0.0, -0.5])


# ---------------------------------------------------------------------------
# case-study export
# ---------------------------------------------------------------------------

def test_case_study_round_trip(cf_run, tmp_path):
    cfg, _result = cf_run
    seed_dir = Path(cfg.out_dir) / "seed_0"
    case = sorted((seed_dir / "cases").glob("case_*.npz"))[0]
    case_id = int(case.stem.split("_")[1])
    dest = Path(export_case_study(cfg.out_dir, case_id, str(tmp_path / "case")))
    data = np.load(case)
    res = cfg.grid_resolution
    got = np.loadtxt(dest / "factual_s.csv", delimiter=",")
    np.testing.assert_allclose(got, data["s"].reshape(res, res), atol=5e-7)
    n_actions = data["scm_s_cf"].shape[0]
    for a in range(n_actions):
        assert (dest / f"cf_state_scm_a{a}.csv").exists()
        assert (dest / f"cf_state_oracle_a{a}.csv").exists()
    rewards = (dest / "rewards.csv").read_text().strip().splitlines()
    assert rewards[0] == "source,action,safe,effe"
    assert len(rewards) == 1 + 1 + 2 * n_actions


def test_case_study_missing_id_raises(cf_run):
    cfg, _ = cf_run
    with pytest.raises(NotFoundError):
        export_case_study(cfg.out_dir, 999_999)


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------

def test_cli_train_smoke(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(tiny("3dqn", epochs=2).to_json())
    rc = cli.main(["train", "--config", str(cfg_path),
                   "--out", str(tmp_path / "run")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "artifacts in" in out
    assert (tmp_path / "run" / "summary.csv").exists()


def test_cli_reports_config_errors_on_stderr(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"method": "3dqn", "leraning_rate": 0.1}))
    rc = cli.main(["train", "--config", str(bad)])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")


def test_cli_config_via_environment(tmp_path, capsys, monkeypatch):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(tiny("fixed-time", epochs=2).to_json())
    monkeypatch.setenv(cli.CONFIG_ENV_VAR, str(cfg_path))
    rc = cli.main(["train", "--out", str(tmp_path / "run")])
    assert rc == 0
    assert (tmp_path / "run" / "summary.csv").exists()


def test_cli_case_study_round_trip(cf_run, tmp_path, capsys):
    cfg, _ = cf_run
    seed_dir = Path(cfg.out_dir) / "seed_0"
    case = sorted((seed_dir / "cases").glob("case_*.npz"))[0]
    case_id = int(case.stem.split("_")[1])
    rc = cli.main(["case-study", "--run", cfg.out_dir,
                   "--collision", str(case_id),
                   "--out", str(tmp_path / "case")])
    assert rc == 0
    assert "case written to" in capsys.readouterr().out
    rc = cli.main(["case-study", "--run", cfg.out_dir, "--collision", "424242"])
    assert rc == 2

"""Experiment orchestration: seeded training runs, baselines, ablations,
weight sweeps, observation-noise studies, and artifact export.

A run is fully determined by (config, seed): every random stream hangs off
one seed sequence, episode arrival schedules are pre-generated, and all
floats are written with fixed formatting, so rerunning a config reproduces
every output byte.  Per seed the trainer emits an epoch-metrics CSV, final
network checkpoints, counterfactual dump CSVs, and case-study bundles; the
parent aggregates a summary over the last ten epochs of every seed.

Training follows one loop for all methods: roll an episode with an
epsilon-greedy policy, store real transitions, and (once past the pre-train
step budget) update networks every step from a mix of the real and
counterfactual buffers.  On every train-gap boundary the counterfactual
buffer is cleared, the structural model is refit on the real buffer, and
all collision records gathered since the previous boundary are expanded
into counterfactual trajectories.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .agent import (CfRow, QNet, ReplayBuffer, SimpleQ, Transition,
                    UnsafeLabeler, cfloss_update, epsilon_at, qcf_update,
                    sample_training_batch, select_action, synq_compose,
                    td_update)
from .ctc import (PreCollisionRecord, ctc, simulator_ctc_oracle,
                  write_cf_dump)
from .errors import ConfigError, NotFoundError
from .scm import ScmModel, save_scm, scm_train_epoch, scm_warm_start
from .sim import (IntersectionSim, LaneChangeConfig, LaneChangeSim,
                  add_grid_noise, desk_config, encode_grid)

logger = logging.getLogger("cfsignal.harness")

LEARNING_METHODS = ("cflight-r", "cflight-loss", "cflight-q", "3dqn",
                    "safe-r", "cf-only", "cf+3dqn", "cf+safe-r")
BASELINE_METHODS = ("fixed-time", "protected-only", "permitted-only")
METHODS = LEARNING_METHODS + BASELINE_METHODS
CF_METHODS = frozenset({"cflight-r", "cflight-loss", "cflight-q",
                        "cf-only", "cf+3dqn", "cf+safe-r"})
ENVS = ("synthetic-intersection", "lane-change")
ABLATION_METHODS = ("cf-only", "cf+3dqn", "3dqn", "safe-r", "cf+safe-r",
                    "fixed-time")


@dataclass(frozen=True)
class RunConfig:
    method: str = "cflight-r"
    env: str = "synthetic-intersection"
    epochs: int = 800
    max_steps: int = 720
    pre_train_steps: int = 2000
    train_gap: int = 50
    w1: float = 0.5
    w2: float = 0.5
    c1: float = 0.5
    c2: float = 0.5
    b1: float = 0.5
    b2: float = 0.5
    b_cf: float = 0.5
    seeds: tuple[int, ...] = (0,)
    noise_scale: float = 0.0
    grid_resolution: int = 60
    cf_source: str = "scm"
    cf_reward_mode: str = "scalar"   # "scalar": counterfactual reward as-is;
                                     # "diff": reward difference vs. factual
    gamma: float = 0.99
    lr: float = 0.001
    batch_size: int = 128
    buffer_capacity: int = 12000
    target_every: int = 4
    hidden: int = 64
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_decay_frac: float = 0.3
    scm_hidden: tuple[int, ...] = (128, 128)
    scm_batches: int = 60
    scm_warm_batches: int = 800
    scm_adv_weight: float = 1.0
    scm_lambda_mono: float = 1.0
    scm_beta: float = 1.0
    tau_unsafe: float = -0.5
    ctc_cap: int = 32
    dump_records: int = 64
    case_records: int = 4
    fixed_hold: int = 3
    out_dir: str | None = None
    workers: int = 1

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; choose from {ENVS}")
        if self.env == "lane-change" and self.method in BASELINE_METHODS:
            raise ConfigError(f"{self.method!r} is an intersection signal plan")
        if self.cf_source not in ("scm", "oracle"):
            raise ConfigError("cf_source must be 'scm' or 'oracle'")
        if self.cf_reward_mode not in ("scalar", "diff"):
            raise ConfigError("cf_reward_mode must be 'scalar' or 'diff'")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.train_gap < 1:
            raise ConfigError("train_gap must be >= 1")
        for name in ("w1", "w2", "c1", "c2", "b1", "b2", "b_cf", "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.epochs < 1 or self.max_steps < 1:
            raise ConfigError("epochs and max_steps must be >= 1")
        if self.scm_warm_batches < 0:
            raise ConfigError("scm_warm_batches must be >= 0")

    @property
    def uses_cf(self) -> bool:
        return self.method in CF_METHODS

    def effective_weights(self) -> tuple[float, float]:
        """Reward scalarization per method: the efficiency-only family sets
        (0, 1); the counterfactual-only ablation drops the efficiency term."""
        if self.method in ("3dqn", "cf+3dqn"):
            return 0.0, 1.0
        if self.method == "cf-only":
            return self.w1, 0.0
        return self.w1, self.w2

    def to_json(self) -> str:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["scm_hidden"] = list(self.scm_hidden)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        if "scm_hidden" in d:
            d["scm_hidden"] = tuple(int(h) for h in d["scm_hidden"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


EPOCH_HEADER = ("epoch", "avg_delay", "throughput", "collisions", "td_loss",
                "delta_kl", "scm_disc", "scm_adv", "scm_recon", "scm_mono_s",
                "scm_mono_r", "epsilon")


@dataclass
class EpochReport:
    epoch: int
    avg_delay: float
    throughput: int
    collisions: int
    td_loss: float = 0.0
    delta_kl: float = 0.0
    scm_disc: float = 0.0
    scm_adv: float = 0.0
    scm_recon: float = 0.0
    scm_mono_s: float = 0.0
    scm_mono_r: float = 0.0
    epsilon: float = 0.0

    def row(self) -> list[str]:
        return [str(self.epoch),
                f"{self.avg_delay:.6f}", str(self.throughput),
                str(self.collisions), f"{self.td_loss:.6f}",
                f"{self.delta_kl:.6f}", f"{self.scm_disc:.6f}",
                f"{self.scm_adv:.6f}", f"{self.scm_recon:.6f}",
                f"{self.scm_mono_s:.6f}", f"{self.scm_mono_r:.6f}",
                f"{self.epsilon:.6f}"]


# ---------------------------------------------------------------------------
# environment adapters
# ---------------------------------------------------------------------------

class _IntersectionEnv:
    def __init__(self, cfg: RunConfig):
        self.scenario = desk_config(grid_resolution=cfg.grid_resolution,
                                    max_steps=cfg.max_steps)
        self.sim = IntersectionSim(self.scenario)
        self.n_actions = self.scenario.n_actions
        self.state_dim = cfg.grid_resolution * cfg.grid_resolution

    def new_episode(self, seed: int):
        return self.sim.new_episode(seed)

    def observe(self, state, noise_scale: float, rng) -> np.ndarray:
        grid = encode_grid(self.sim, state)
        return add_grid_noise(grid, noise_scale, rng).ravel()

    def snapshot(self, state):
        return self.sim.snapshot(state)

    def step(self, state, action):
        out = self.sim.step(state, action)
        return out.state, out.reward.as_array(), False, out.collisions

    def metrics(self, state) -> tuple[float, int, int]:
        st = state.stats
        return st.avg_delay, st.throughput, st.collision_count

    def fixed_cycle(self, method: str) -> tuple[int, ...]:
        if method == "protected-only":
            return self.scenario.protected_phase_ids()
        if method == "permitted-only":
            return self.scenario.permitted_phase_ids()
        return tuple(range(self.n_actions))


class _LaneChangeEnv:
    """Reuses the run loop: "delay" is the number of rounds spent, throughput
    flags a completed merge, collisions count failed changes."""

    def __init__(self, cfg: RunConfig):
        self.config = LaneChangeConfig(max_rounds=cfg.max_steps)
        self.sim = LaneChangeSim(self.config)
        self.n_actions = self.config.n_actions
        self.state_dim = 6
        self._rounds = 0
        self._reached = 0
        self._collisions = 0

    def new_episode(self, seed: int):
        self._rounds = 0
        self._reached = 0
        self._collisions = 0
        return self.sim.new_episode(seed)

    def observe(self, state, noise_scale: float, rng) -> np.ndarray:
        vec = self.sim.encode(state)
        return add_grid_noise(vec, noise_scale, rng)

    def snapshot(self, state):
        return self.sim.snapshot(state)

    def step(self, state, action):
        out = self.sim.step(state, action)
        self._rounds += 1
        if out.collided:
            self._collisions += 1
        if out.done and not out.collided and out.state.lane == self.config.target_lane:
            self._reached = 1
        return out.state, out.reward.as_array(), out.done, int(out.collided)

    def metrics(self, state) -> tuple[float, int, int]:
        return float(self._rounds), self._reached, self._collisions

    def fixed_cycle(self, method: str) -> tuple[int, ...]:
        raise ConfigError("fixed cycles are not defined for lane changing")


def _make_env(cfg: RunConfig):
    if cfg.env == "lane-change":
        return _LaneChangeEnv(cfg)
    return _IntersectionEnv(cfg)


# ---------------------------------------------------------------------------
# per-seed trainer
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    epochs_csv: str
    update_count: int
    records_processed: int
    last10: dict   # metric name -> list of last-10 epoch values


def _episode_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + 7919 * epoch + 1) & ((1 << 63) - 1)


class _SeedTrainer:
    def __init__(self, cfg: RunConfig, seed: int, out_dir: Path):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dir = out_dir / f"seed_{seed}"
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "cases").mkdir(exist_ok=True)

        self.env = _make_env(cfg)
        ss = np.random.SeedSequence(seed)
        self.agent_rng, self.batch_rng, self.scm_rng, self.noise_rng = \
            [np.random.default_rng(c) for c in ss.spawn(4)]

        n, d = self.env.n_actions, self.env.state_dim
        self.is_baseline = cfg.method in BASELINE_METHODS
        self.qnet = None
        self.q_safe = None
        self.qcf = None
        if not self.is_baseline:
            net_rng = np.random.default_rng(ss.spawn(1)[0])
            self.qnet = QNet(d, n, cfg.hidden, cfg.lr, cfg.target_every, net_rng)
            if cfg.method == "cflight-q":
                self.q_safe = QNet(d, n, cfg.hidden, cfg.lr, cfg.target_every, net_rng)
                self.qcf = SimpleQ(d, n, cfg.hidden, cfg.lr, cfg.target_every, net_rng)
        self.scm = None
        self.labeler = None
        if cfg.uses_cf:
            self.scm = ScmModel(
                d, n, hidden=cfg.scm_hidden, lambda_mono=cfg.scm_lambda_mono,
                beta=cfg.scm_beta, state_bounds=(0.0, 1.0),
                rng=np.random.default_rng(ss.spawn(1)[0]))
            self.labeler = UnsafeLabeler(self.scm, tau=cfg.tau_unsafe)

        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.cf_buffer = ReplayBuffer(cfg.buffer_capacity)
        self.records: list[PreCollisionRecord] = []
        self.update_count = 0
        self.records_processed = 0
        self.total_steps = 0
        self._scm_tail = (0.0, 0.0, 0.0, 0.0, 0.0)

    # -- policy --------------------------------------------------------

    def _act(self, s: np.ndarray, epoch_step: int, eps: float) -> int:
        cfg = self.cfg
        if self.is_baseline:
            cycle = self.env.fixed_cycle(cfg.method)
            return cycle[(epoch_step // cfg.fixed_hold) % len(cycle)]
        if cfg.method == "cflight-q":
            if self.agent_rng.random() < eps:
                return int(self.agent_rng.integers(0, self.env.n_actions))
            composed = synq_compose(
                self.qnet.q_values(s), self.q_safe.q_values(s),
                self.qcf.q_values(s), cfg.b1, cfg.b2, cfg.b_cf)
            return int(np.argmax(composed))
        return select_action(self.qnet, s, eps, self.agent_rng)

    # -- learning ------------------------------------------------------

    def _update(self) -> tuple[float, float]:
        cfg = self.cfg
        w1, w2 = cfg.effective_weights()
        cf = self.cf_buffer if cfg.uses_cf else None
        if cfg.method == "cflight-q":
            b_eff = sample_training_batch(self.buffer, cf, self.batch_rng,
                                          cfg.batch_size, w1, w2,
                                          self.env.n_actions, reward="effe")
            loss_e = td_update(self.qnet, b_eff, cfg.lr, cfg.gamma)
            b_safe = sample_training_batch(self.buffer, cf, self.batch_rng,
                                           cfg.batch_size, w1, w2,
                                           self.env.n_actions, reward="safe")
            loss_s = td_update(self.q_safe, b_safe, cfg.lr, cfg.gamma)
            qcf_update(self.qcf, self.cf_buffer, self.batch_rng,
                       cfg.batch_size, cfg.lr, cfg.gamma)
            self.update_count += 1
            return 0.5 * (loss_e + loss_s), 0.0
        batch = sample_training_batch(self.buffer, cf, self.batch_rng,
                                      cfg.batch_size, w1, w2,
                                      self.env.n_actions, reward="scalar",
                                      cf_reward_mode=cfg.cf_reward_mode)
        if cfg.method == "cflight-loss":
            total, td, delta = cfloss_update(self.qnet, batch, cfg.c1, cfg.c2,
                                             cfg.lr, cfg.gamma)
            self.update_count += 1
            return td, delta
        loss = td_update(self.qnet, batch, cfg.lr, cfg.gamma)
        self.update_count += 1
        return loss, 0.0

    # -- counterfactual boundary ----------------------------------------

    def _boundary(self, boundary_idx: int) -> None:
        cfg = self.cfg
        self.cf_buffer.clear()
        if len(self.buffer) == 0:
            logger.info("boundary %d: no data yet, model refit deferred", boundary_idx)
            self.records.clear()
            return
        if not self.scm.trained and cfg.scm_warm_batches > 0:
            scm_warm_start(self.scm, self.buffer, self.scm_rng,
                           batch_size=cfg.batch_size,
                           batches=cfg.scm_warm_batches)
        report = scm_train_epoch(self.scm, self.buffer, self.scm_rng,
                                 batch_size=cfg.batch_size,
                                 max_batches=cfg.scm_batches,
                                 adv_weight=cfg.scm_adv_weight)
        self._scm_tail = (report.disc_loss, report.adv_loss, report.recon_loss,
                          report.mono_state, report.mono_reward)
        self.labeler.refresh(self.scm)

        dump_rows = []
        for i, rec in enumerate(self.records):
            rec_id = self.records_processed
            self.records_processed += 1
            w1, w2 = cfg.effective_weights()
            model_trajs = ctc(self.scm, rec, self.env.n_actions, w1=w1, w2=w2,
                              qnet=self.qnet, qcf=self.qcf, labeler=self.labeler)
            oracle_trajs = None
            if cfg.cf_source == "oracle" or i < cfg.dump_records:
                oracle_trajs = simulator_ctc_oracle(
                    self.env.sim, rec, self.env.n_actions, w1=w1, w2=w2,
                    qnet=self.qnet, qcf=self.qcf, labeler=self.labeler)
            chosen = oracle_trajs if cfg.cf_source == "oracle" else model_trajs
            mask = self.labeler.safe_mask(rec.s, self.env.n_actions) \
                if cfg.method == "cflight-loss" else None
            for t in chosen:
                self.cf_buffer.push(CfRow(
                    s=t.s, a_cf=t.a_cf, r_cf_vec=t.r_cf_vec, s_cf=t.s_cf,
                    cf_r=t.cf_r, cf_l=t.cf_l, cf_q=t.cf_q, safe_mask=mask))
            if oracle_trajs is not None and i < cfg.dump_records:
                for m, o in zip(model_trajs, oracle_trajs):
                    dump_rows.append((rec_id, m.a_cf, m.cf_r, m.cf_l, m.cf_q,
                                      float(o.r_cf_vec[0]), float(m.r_cf_vec[0])))
            if oracle_trajs is not None and i < cfg.case_records:
                self._save_case(rec_id, rec, model_trajs, oracle_trajs)
        if dump_rows:
            write_cf_dump(self.dir / f"cf_dump_{boundary_idx:03d}.csv", dump_rows)
        self.records.clear()

    def _save_case(self, rec_id: int, rec: PreCollisionRecord,
                   model_trajs, oracle_trajs) -> None:
        np.savez(self.dir / "cases" / f"case_{rec_id}.npz",
                 s=rec.s, s_next=rec.s_next, a_taken=np.int64(rec.a_taken),
                 r_ac=rec.r_ac_vec,
                 grid_resolution=np.int64(self.cfg.grid_resolution),
                 scm_s_cf=np.stack([t.s_cf for t in model_trajs]),
                 scm_r_cf=np.stack([t.r_cf_vec for t in model_trajs]),
                 oracle_s_cf=np.stack([t.s_cf for t in oracle_trajs]),
                 oracle_r_cf=np.stack([t.r_cf_vec for t in oracle_trajs]))

    # -- checkpoints -----------------------------------------------------

    def _save_checkpoints(self) -> None:
        ck = self.dir / "checkpoint"
        ck.mkdir(exist_ok=True)
        if self.qnet is not None:
            self.qnet.save(ck / "qnet")
        if self.q_safe is not None:
            self.q_safe.save(ck / "q_safe")
        if self.qcf is not None:
            self.qcf.save(ck / "qcf")
        if self.scm is not None and self.scm.trained:
            save_scm(self.scm, ck / "scm")

    # -- main loop -------------------------------------------------------

    def run(self) -> SeedResult:
        cfg = self.cfg
        horizon = cfg.epochs * cfg.max_steps
        reports: list[EpochReport] = []
        csv_path = self.dir / "epochs.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(EPOCH_HEADER)
            for epoch in range(cfg.epochs):
                state = self.env.new_episode(_episode_seed(self.seed, epoch))
                s = self.env.observe(state, cfg.noise_scale, self.noise_rng)
                td_sum = delta_sum = 0.0
                n_upd = 0
                epoch_records = 0
                eps = cfg.eps_final
                for t in range(cfg.max_steps):
                    eps = epsilon_at(self.total_steps, horizon, cfg.eps_start,
                                     cfg.eps_final, cfg.eps_decay_frac)
                    a = self._act(s, t, eps)
                    snap = None
                    if cfg.uses_cf and epoch_records < cfg.ctc_cap:
                        snap = self.env.snapshot(state)
                    state, r_vec, done, collisions = self.env.step(state, a)
                    s2 = self.env.observe(state, cfg.noise_scale, self.noise_rng)
                    if cfg.uses_cf and collisions > 0 and snap is not None:
                        self.records.append(PreCollisionRecord(
                            snap=snap, s=s, a_taken=a, r_ac_vec=r_vec, s_next=s2))
                        epoch_records += 1
                    mask = None
                    if cfg.method == "cflight-loss":
                        mask = self.labeler.safe_mask(s, self.env.n_actions)
                    self.buffer.push(Transition(s, a, r_vec, s2, done, mask))
                    self.total_steps += 1
                    if (not self.is_baseline
                            and self.total_steps > cfg.pre_train_steps):
                        td, delta = self._update()
                        td_sum += td
                        delta_sum += delta
                        n_upd += 1
                    s = s2
                    if done:
                        break
                delay, thru, coll = self.env.metrics(state)
                rep = EpochReport(
                    epoch=epoch, avg_delay=delay, throughput=thru,
                    collisions=coll,
                    td_loss=td_sum / n_upd if n_upd else 0.0,
                    delta_kl=delta_sum / n_upd if n_upd else 0.0,
                    scm_disc=self._scm_tail[0], scm_adv=self._scm_tail[1],
                    scm_recon=self._scm_tail[2], scm_mono_s=self._scm_tail[3],
                    scm_mono_r=self._scm_tail[4], epsilon=eps)
                reports.append(rep)
                writer.writerow(rep.row())
                if cfg.uses_cf and (epoch + 1) % cfg.train_gap == 0:
                    self._boundary((epoch + 1) // cfg.train_gap)
        self._save_checkpoints()
        tail = reports[-10:]
        last10 = {
            "avg_delay": [r.avg_delay for r in tail],
            "throughput": [float(r.throughput) for r in tail],
            "collisions": [float(r.collisions) for r in tail],
        }
        return SeedResult(seed=self.seed, epochs_csv=str(csv_path),
                          update_count=self.update_count,
                          records_processed=self.records_processed,
                          last10=last10)


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    out_dir: str
    summary: dict
    seed_results: list[SeedResult]


def _run_one_seed(args) -> SeedResult:
    cfg, seed, out_dir = args
    return _SeedTrainer(cfg, seed, Path(out_dir)).run()


SUMMARY_HEADER = ("method", "env", "n_seeds", "epochs", "noise_scale", "w1",
                  "w2", "delay_mean", "delay_std", "throughput_mean",
                  "throughput_std", "collisions_mean", "collisions_std")


def _pooled(seed_results: list[SeedResult], key: str) -> tuple[float, float]:
    vals = np.concatenate([np.asarray(r.last10[key]) for r in seed_results])
    std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
    return float(np.mean(vals)), std


def _summary_dict(cfg: RunConfig, seed_results: list[SeedResult]) -> dict:
    d_mean, d_std = _pooled(seed_results, "avg_delay")
    t_mean, t_std = _pooled(seed_results, "throughput")
    c_mean, c_std = _pooled(seed_results, "collisions")
    return {
        "method": cfg.method, "env": cfg.env, "n_seeds": len(cfg.seeds),
        "epochs": cfg.epochs, "noise_scale": cfg.noise_scale,
        "w1": cfg.w1, "w2": cfg.w2,
        "delay_mean": d_mean, "delay_std": d_std,
        "throughput_mean": t_mean, "throughput_std": t_std,
        "collisions_mean": c_mean, "collisions_std": c_std,
    }


def _summary_row(s: dict) -> list[str]:
    return [str(s["method"]), str(s["env"]), str(s["n_seeds"]),
            str(s["epochs"]), f"{s['noise_scale']:.6f}", f"{s['w1']:.6f}",
            f"{s['w2']:.6f}", f"{s['delay_mean']:.6f}", f"{s['delay_std']:.6f}",
            f"{s['throughput_mean']:.6f}", f"{s['throughput_std']:.6f}",
            f"{s['collisions_mean']:.6f}", f"{s['collisions_std']:.6f}"]


def train(cfg: RunConfig) -> RunResult:
    """Run every seed of the config and aggregate a summary over the last
    ten epochs of each; artifacts land under ``cfg.out_dir``."""
    cfg.validate()
    if cfg.out_dir is None:
        cfg = replace(cfg, out_dir=f"runs/{cfg.env}_{cfg.method}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())

    jobs = [(cfg, seed, str(out)) for seed in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(cfg.workers, len(jobs))) as pool:
            seed_results = pool.map(_run_one_seed, jobs)
    else:
        seed_results = [_run_one_seed(j) for j in jobs]

    summary = _summary_dict(cfg, seed_results)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerow(_summary_row(summary))
    return RunResult(out_dir=str(out), summary=summary, seed_results=seed_results)


def run_ablation(base: RunConfig, methods: tuple[str, ...] = ABLATION_METHODS,
                 out_dir: str | None = None) -> list[dict]:
    """Train each ablation arm on the same seeds; emits one comparison CSV."""
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown ablation method {m!r}")
    root = Path(out_dir or base.out_dir or "runs/ablation")
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in methods:
        cfg = replace(base, method=m, out_dir=str(root / m.replace("+", "_")))
        rows.append(train(cfg).summary)
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in rows:
            w.writerow(_summary_row(s))
    return rows


def _pareto_flags(points: list[tuple[float, float]]) -> list[int]:
    """1 when no other point is <= in both coordinates and < in one."""
    flags = []
    for i, (c1, d1) in enumerate(points):
        dominated = any(
            (c2 <= c1 and d2 <= d1 and (c2 < c1 or d2 < d1))
            for j, (c2, d2) in enumerate(points) if j != i)
        flags.append(0 if dominated else 1)
    return flags


def weight_sweep(base: RunConfig, w1_grid, w2_grid,
                 out_dir: str | None = None) -> list[dict]:
    """Cartesian sweep over reward weights; marks Pareto-nondominated rows
    on the (collisions, delay) plane."""
    w1_grid = tuple(float(w) for w in w1_grid)
    w2_grid = tuple(float(w) for w in w2_grid)
    if not w1_grid or not w2_grid:
        raise ConfigError("weight grids must be non-empty")
    root = Path(out_dir or base.out_dir or "runs/sweep")
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for w1 in w1_grid:
        for w2 in w2_grid:
            cfg = replace(base, w1=w1, w2=w2,
                          out_dir=str(root / f"w1_{w1:g}_w2_{w2:g}"))
            rows.append(train(cfg).summary)
    flags = _pareto_flags([(r["collisions_mean"], r["delay_mean"]) for r in rows])
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER + ("pareto",))
        for s, f in zip(rows, flags):
            w.writerow(_summary_row(s) + [str(f)])
    for s, f in zip(rows, flags):
        s["pareto"] = f
    return rows


def noise_experiment(base: RunConfig, scales,
                     out_dir: str | None = None) -> list[dict]:
    """Observation-noise robustness: one full run per scale on matched
    seeds; per-scale curves live in the run dirs, the comparison in
    noise.csv."""
    scales = tuple(float(s) for s in scales)
    if any(s < 0 for s in scales):
        raise ConfigError("noise scales must be >= 0")
    root = Path(out_dir or base.out_dir or "runs/noise")
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for scale in scales:
        cfg = replace(base, noise_scale=scale,
                      out_dir=str(root / f"scale_{scale:g}"))
        rows.append(train(cfg).summary)
    with open(root / "noise.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in rows:
            w.writerow(_summary_row(s))
    return rows


def export_case_study(run_dir: str, collision_id: int,
                      out_dir: str | None = None) -> str:
    """Expand one stored collision case into plain matrices for plotting:
    factual grids, per-action counterfactual grids from both sources, and a
    reward table (safety component first, efficiency second)."""
    run = Path(run_dir)
    hits = sorted(run.glob(f"seed_*/cases/case_{int(collision_id)}.npz"))
    if not hits:
        raise NotFoundError(
            f"no stored case with id {collision_id} under {run_dir}")
    data = np.load(hits[0])
    res = int(data["grid_resolution"])
    dim = data["s"].shape[0]
    shape = (res, res) if dim == res * res else (1, dim)

    dest = Path(out_dir or (run / f"case_{int(collision_id)}"))
    dest.mkdir(parents=True, exist_ok=True)

    def dump(name: str, flat: np.ndarray) -> None:
        np.savetxt(dest / name, flat.reshape(shape), fmt="%.6f", delimiter=",")

    dump("factual_s.csv", data["s"])
    dump("factual_s_next.csv", data["s_next"])
    for a in range(data["scm_s_cf"].shape[0]):
        dump(f"cf_state_scm_a{a}.csv", data["scm_s_cf"][a])
        dump(f"cf_state_oracle_a{a}.csv", data["oracle_s_cf"][a])
    with open(dest / "rewards.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("source", "action", "safe", "effe"))
        a_t = int(data["a_taken"])
        w.writerow(("factual", a_t,
                    f"{data['r_ac'][0]:.6f}", f"{data['r_ac'][1]:.6f}"))
        for a in range(data["scm_r_cf"].shape[0]):
            w.writerow(("scm", a, f"{data['scm_r_cf'][a][0]:.6f}",
                        f"{data['scm_r_cf'][a][1]:.6f}"))
            w.writerow(("oracle", a, f"{data['oracle_r_cf'][a][0]:.6f}",
                        f"{data['oracle_r_cf'][a][1]:.6f}"))
    return str(dest)

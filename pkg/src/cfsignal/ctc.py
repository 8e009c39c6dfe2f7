"""Counterfactual trajectory construction.

Given a snapshot of the decision step that led to a collision, this module
rewinds and asks "what would have happened under each other action?" two
ways:

* through the learned structural model: infer the exogenous noise that
  explains the observed outcome, then replay every action under that same
  noise (``ctc``);
* through the simulator itself: restore the snapshot with its saved RNG
  state and actually step each action (``simulator_ctc_oracle``).

The oracle is ground truth by construction, so pairing both outputs per
record measures how faithful the learned model is.  Each trajectory carries
the three counterfactual objectives consumed by the agent variants: the
scalarized reward difference, the safety-divergence value, and the
counterfactual Q estimate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .agent import QNet, SimpleQ, UnsafeLabeler, cf_divergence, scalar_reward
from .errors import ConfigError, NoDataError, NotReadyError
from .scm import ScmModel, infer_noise, predict_counterfactual
from .sim.grid import encode_grid

logger = logging.getLogger("cfsignal.ctc")


@dataclass
class PreCollisionRecord:
    """Decision step whose execution produced at least one collision.

    ``snap`` restores the simulator to just before the fatal action;
    ``s``/``s_next`` are the (flattened) observations the agent saw before
    and after; ``r_ac_vec`` is the observed two-component reward.
    """

    snap: object
    s: np.ndarray
    a_taken: int
    r_ac_vec: np.ndarray
    s_next: np.ndarray


@dataclass
class CFTrajectory:
    s: np.ndarray
    a_cf: int
    s_cf: np.ndarray
    r_cf_vec: np.ndarray
    cf_r: float
    cf_l: float
    cf_q: float


def _action_list(action_space) -> tuple[int, ...]:
    if isinstance(action_space, (int, np.integer)):
        return tuple(range(int(action_space)))
    return tuple(int(a) for a in action_space)


def _record_divergence(rec: PreCollisionRecord, n_actions: int,
                       qnet: QNet | None, labeler: UnsafeLabeler | None) -> float:
    """Safety-divergence value at the rewound state (one number per record:
    the KL compares whole action distributions, not a single entry)."""
    if qnet is None or labeler is None:
        return math.nan
    mask = labeler.safe_mask(rec.s, n_actions)
    if not mask.any():
        logger.warning("divergence undefined: labeler rejected every action")
        return math.nan
    _, adv, _ = qnet.run(rec.s)
    return cf_divergence(adv[0], mask)


def _q_cf_value(rec: PreCollisionRecord, a_cf: int, qcf: SimpleQ | None) -> float:
    if qcf is None:
        return math.nan
    return float(np.atleast_2d(qcf.q_values(rec.s))[0, a_cf])


def ctc(model: ScmModel, rec: PreCollisionRecord, action_space, *,
        w1: float = 0.5, w2: float = 0.5, qnet: QNet | None = None,
        qcf: SimpleQ | None = None, labeler: UnsafeLabeler | None = None,
        fresh_noise: bool = False, rng: np.random.Generator | None = None,
        ) -> list[CFTrajectory]:
    """Enumerate every action at the rewound state through the learned model.

    Default semantics reuse the exogenous noise inferred from the factual
    outcome (so the factual action reproduces the factual result under a
    perfectly fitted model); ``fresh_noise=True`` instead samples the noise
    prior, which answers an interventional rather than counterfactual query.
    Returns exactly one trajectory per action.
    """
    if not model.trained:
        raise NotReadyError("causal model has not been trained yet")
    actions = _action_list(action_space)
    if not actions:
        raise ConfigError("action space is empty")

    if fresh_noise:
        if rng is None:
            raise ConfigError("fresh_noise=True requires an rng")
        u_s = rng.standard_normal(model.noise_state_dim)
        u_r = rng.standard_normal(model.noise_reward_dim)
        logger.info("trajectory construction with fresh prior noise")
    else:
        _, _, u_s, u_r = infer_noise(model, rec.s_next, rec.r_ac_vec)
        logger.debug("trajectory construction with inferred noise")

    r_ac = scalar_reward(rec.r_ac_vec, w1, w2)
    cf_l = _record_divergence(rec, len(actions), qnet, labeler)

    out: list[CFTrajectory] = []
    for a_cf in actions:
        s_cf, r_cf_vec = predict_counterfactual(model, rec.s, a_cf, u_s, u_r)
        cf_r = scalar_reward(r_cf_vec, w1, w2) - r_ac
        out.append(CFTrajectory(
            s=rec.s, a_cf=a_cf, s_cf=s_cf, r_cf_vec=r_cf_vec,
            cf_r=float(cf_r), cf_l=cf_l, cf_q=_q_cf_value(rec, a_cf, qcf)))
    return out


def simulator_ctc_oracle(sim, rec: PreCollisionRecord, action_space, *,
                         w1: float = 0.5, w2: float = 0.5,
                         encode=None, qnet: QNet | None = None,
                         qcf: SimpleQ | None = None,
                         labeler: UnsafeLabeler | None = None,
                         ) -> list[CFTrajectory]:
    """Ground-truth counterfactuals: restore the snapshot (RNG state
    included) and actually execute each action.

    Every restore starts from an identical copy, so the factual action
    reproduces the recorded outcome exactly and the live episode the
    snapshot came from is never touched.  Observations are noise-free.
    """
    actions = _action_list(action_space)
    if not actions:
        raise ConfigError("action space is empty")

    def observe(state) -> np.ndarray:
        if encode is not None:
            return np.asarray(encode(sim, state), dtype=np.float64).ravel()
        if hasattr(sim, "encode"):
            return np.asarray(sim.encode(state), dtype=np.float64).ravel()
        return encode_grid(sim, state).ravel()

    r_ac = scalar_reward(rec.r_ac_vec, w1, w2)
    cf_l = _record_divergence(rec, len(actions), qnet, labeler)

    out: list[CFTrajectory] = []
    for a_cf in actions:
        state = sim.restore(rec.snap)
        outcome = sim.step(state, a_cf)
        r_cf_vec = outcome.reward.as_array()
        s_cf = observe(outcome.state)
        cf_r = scalar_reward(r_cf_vec, w1, w2) - r_ac
        out.append(CFTrajectory(
            s=rec.s, a_cf=a_cf, s_cf=s_cf, r_cf_vec=r_cf_vec,
            cf_r=float(cf_r), cf_l=cf_l, cf_q=_q_cf_value(rec, a_cf, qcf)))
    return out


# ---------------------------------------------------------------------------
# fidelity scoring and dumps
# ---------------------------------------------------------------------------

def pair_fidelity(model_trajs: list[CFTrajectory],
                  oracle_trajs: list[CFTrajectory]) -> list[tuple[int, float, float, float]]:
    """Per-action (a_cf, state mse, oracle safe, model safe) rows for one
    record; inputs must enumerate the same action space."""
    if len(model_trajs) != len(oracle_trajs):
        raise NoDataError("trajectory lists enumerate different action spaces")
    rows = []
    for m, o in zip(model_trajs, oracle_trajs):
        if m.a_cf != o.a_cf:
            raise NoDataError("trajectory lists are not aligned by action")
        mse = float(np.mean((m.s_cf - o.s_cf) ** 2))
        rows.append((m.a_cf, mse, float(o.r_cf_vec[0]), float(m.r_cf_vec[0])))
    return rows


def safe_sign_agreement(pairs, tau: float = -0.5) -> float:
    """Fraction of (oracle_safe, model_safe) pairs that land on the same
    side of the unsafe threshold.  Collision counts are integral, so one
    threshold classifies both sources."""
    pairs = list(pairs)
    if not pairs:
        raise NoDataError("no pairs to score")
    hits = sum(1 for o, m in pairs if (o < tau) == (m < tau))
    return hits / len(pairs)


CF_DUMP_HEADER = ("record_id", "a_cf", "cf_r", "cf_l", "cf_q",
                  "oracle_safe", "scm_safe")


def write_cf_dump(path, entries) -> None:
    """CSV of per-trajectory objectives next to oracle ground truth; one row
    per (record, action)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CF_DUMP_HEADER)
        for rid, a_cf, cf_r, cf_l, cf_q, o_safe, m_safe in entries:
            w.writerow([rid, a_cf, f"{cf_r:.6f}", f"{cf_l:.6f}", f"{cf_q:.6f}",
                        f"{o_safe:.6f}", f"{m_safe:.6f}"])

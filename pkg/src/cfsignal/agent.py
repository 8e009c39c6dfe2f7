"""Q-learning agents and the counterfactual-objective update rules.

The base learner is a dueling Q-network (state value + mean-centered
advantages) trained with the double estimator: the online net picks the
argmax action at the next state, the slow target copy scores it.  On top of
that sit the three counterfactual objectives:

* reward-style   -- counterfactual trajectories are replayed through the
  ordinary TD loss as extra rows (their scalarized reward);
* loss-style     -- the TD loss is mixed with a divergence term pulling the
  advantage softmax toward the uniform distribution over actions a safety
  labeler considers safe;
* value-style    -- a separate network learns the counterfactual advantage
  signal (reward-difference targets) and is blended into action selection
  by min-max normalized composition.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NoDataError, ShapeError
from .nn import Adam, Mlp, kl_div, load_mlp, save_mlp, softmax
from .scm import ScmModel, predict_counterfactual

logger = logging.getLogger("cfsignal.agent")


def _save_opt(opt: Adam, path) -> None:
    arrays = {f"m{i}": a for i, a in enumerate(opt.m)}
    arrays.update({f"v{i}": a for i, a in enumerate(opt.v)})
    np.savez(path, t=np.int64(opt.t), lr=np.float64(opt.lr),
             n=np.int64(len(opt.m)), **arrays)


def _load_opt(path) -> Adam:
    data = np.load(path)
    opt = Adam(lr=float(data["lr"]))
    opt.t = int(data["t"])
    n = int(data["n"])
    opt.m = [data[f"m{i}"] for i in range(n)]
    opt.v = [data[f"v{i}"] for i in range(n)]
    return opt


def scalar_reward(r_vec, w1: float, w2: float) -> float | np.ndarray:
    """Weighted scalarization of the (safe, effe) reward pair."""
    arr = np.asarray(r_vec if not hasattr(r_vec, "as_array") else r_vec.as_array(),
                     dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ShapeError(f"reward vector must have 2 components, got shape {arr.shape}")
    out = w1 * arr[..., 0] + w2 * arr[..., 1]
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class QNet:
    """Dueling double-DQN head: Q(s, a) = V(s) + A(s, a) - mean_a A(s, a)."""

    def __init__(self, state_dim: int, n_actions: int, hidden: int = 64,
                 lr: float = 0.001, target_every: int = 4,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.trunk = Mlp([state_dim, hidden], ["relu"], rng)
        self.v_head = Mlp([hidden, 1], ["identity"], rng)
        self.a_head = Mlp([hidden, n_actions], ["identity"], rng)
        self.t_trunk = self.trunk.clone()
        self.t_v = self.v_head.clone()
        self.t_a = self.a_head.clone()
        self.opt = Adam(lr=lr)
        self.target_every = target_every
        self.learn_steps = 0

    def _nets(self, target: bool):
        return (self.t_trunk, self.t_v, self.t_a) if target else \
               (self.trunk, self.v_head, self.a_head)

    def run(self, x, target: bool = False):
        trunk, vh, ah = self._nets(target)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h, c_t = trunk.run(x)
        v, c_v = vh.run(h)
        adv, c_a = ah.run(h)
        q = v + adv - adv.mean(axis=1, keepdims=True)
        return q, adv, (c_t, c_v, c_a)

    def q_values(self, x, target: bool = False) -> np.ndarray:
        q, _, _ = self.run(x, target)
        return q[0] if np.asarray(x).ndim == 1 else q

    def apply_grads(self, caches, d_q: np.ndarray, d_adv_extra: np.ndarray | None = None,
                    lr: float | None = None) -> None:
        """Backprop dL/dQ (and an optional extra dL/dA term that bypasses the
        dueling recombination) and take one optimizer step."""
        c_t, c_v, c_a = caches
        d_v = d_q.sum(axis=1, keepdims=True)
        d_adv = d_q - d_q.mean(axis=1, keepdims=True)
        if d_adv_extra is not None:
            d_adv = d_adv + d_adv_extra
        pg_v, gin_v = self.v_head.grads_from(c_v, d_v)
        pg_a, gin_a = self.a_head.grads_from(c_a, d_adv)
        pg_t, _ = self.trunk.grads_from(c_t, gin_v + gin_a)
        params = self.trunk.params() + self.v_head.params() + self.a_head.params()
        grads = (Mlp.flatten_grads(pg_t) + Mlp.flatten_grads(pg_v)
                 + Mlp.flatten_grads(pg_a))
        if lr is not None:
            self.opt.lr = lr
        self.opt.step(params, grads)
        self.learn_steps += 1
        if self.learn_steps % self.target_every == 0:
            self.sync_target()

    def sync_target(self) -> None:
        self.t_trunk.copy_from(self.trunk)
        self.t_v.copy_from(self.v_head)
        self.t_a.copy_from(self.a_head)

    def save(self, path) -> None:
        """Directory checkpoint: the three online nets, optimizer moments,
        and counters.  Target copies are resynced on load."""
        d = Path(path)
        d.mkdir(parents=True, exist_ok=True)
        save_mlp(self.trunk, d / "trunk.net")
        save_mlp(self.v_head, d / "v_head.net")
        save_mlp(self.a_head, d / "a_head.net")
        _save_opt(self.opt, d / "opt.npz")
        (d / "meta.json").write_text(json.dumps({
            "kind": "qnet", "state_dim": self.state_dim,
            "n_actions": self.n_actions, "target_every": self.target_every,
            "learn_steps": self.learn_steps}, sort_keys=True))

    @classmethod
    def load(cls, path) -> "QNet":
        d = Path(path)
        meta = json.loads((d / "meta.json").read_text())
        obj = cls.__new__(cls)
        obj.state_dim = meta["state_dim"]
        obj.n_actions = meta["n_actions"]
        obj.trunk = load_mlp(d / "trunk.net")
        obj.v_head = load_mlp(d / "v_head.net")
        obj.a_head = load_mlp(d / "a_head.net")
        obj.t_trunk = obj.trunk.clone()
        obj.t_v = obj.v_head.clone()
        obj.t_a = obj.a_head.clone()
        obj.opt = _load_opt(d / "opt.npz")
        obj.target_every = meta["target_every"]
        obj.learn_steps = meta["learn_steps"]
        return obj


class SimpleQ:
    """Plain (non-dueling) Q network with its own target copy; used for the
    counterfactual-advantage estimator."""

    def __init__(self, state_dim: int, n_actions: int, hidden: int = 64,
                 lr: float = 0.001, target_every: int = 4,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.n_actions = n_actions
        self.net = Mlp([state_dim, hidden, n_actions], ["relu", "identity"], rng)
        self.target = self.net.clone()
        self.opt = Adam(lr=lr)
        self.target_every = target_every
        self.learn_steps = 0

    def q_values(self, x, target: bool = False) -> np.ndarray:
        net = self.target if target else self.net
        y, _ = net.run(x)
        return y

    def update(self, x, d_q, lr: float | None = None) -> None:
        _, cache = self.net.run(x)
        pg, _ = self.net.grads_from(cache, d_q)
        if lr is not None:
            self.opt.lr = lr
        self.opt.step(self.net.params(), Mlp.flatten_grads(pg))
        self.learn_steps += 1
        if self.learn_steps % self.target_every == 0:
            self.target.copy_from(self.net)

    def save(self, path) -> None:
        d = Path(path)
        d.mkdir(parents=True, exist_ok=True)
        save_mlp(self.net, d / "net.net")
        _save_opt(self.opt, d / "opt.npz")
        (d / "meta.json").write_text(json.dumps({
            "kind": "simpleq", "n_actions": self.n_actions,
            "target_every": self.target_every,
            "learn_steps": self.learn_steps}, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SimpleQ":
        d = Path(path)
        meta = json.loads((d / "meta.json").read_text())
        obj = cls.__new__(cls)
        obj.n_actions = meta["n_actions"]
        obj.net = load_mlp(d / "net.net")
        obj.target = obj.net.clone()
        obj.opt = _load_opt(d / "opt.npz")
        obj.target_every = meta["target_every"]
        obj.learn_steps = meta["learn_steps"]
        return obj


# ---------------------------------------------------------------------------
# replay storage
# ---------------------------------------------------------------------------

@dataclass
class Transition:
    s: np.ndarray
    a: int
    r_vec: np.ndarray      # (2,) safe, effe
    s2: np.ndarray
    done: bool
    safe_mask: np.ndarray | None = None   # (n_actions,) bool, labeler output at store time


@dataclass
class CfRow:
    """One counterfactual trajectory row produced by trajectory construction."""

    s: np.ndarray
    a_cf: int
    r_cf_vec: np.ndarray
    s_cf: np.ndarray
    cf_r: float            # scalarized reward difference vs. the factual action
    cf_l: float
    cf_q: float
    safe_mask: np.ndarray | None = None


class ReplayBuffer:
    """FIFO ring over transition rows (real or counterfactual)."""

    def __init__(self, capacity: int = 12000):
        self.capacity = capacity
        self._rows = deque(maxlen=capacity)

    def push(self, row) -> None:
        self._rows.append(row)

    def extend(self, rows) -> None:
        for r in rows:
            self._rows.append(r)

    def clear(self) -> None:
        self._rows.clear()

    def __len__(self) -> int:
        return len(self._rows)

    def __getitem__(self, i):
        return self._rows[i]

    def sample_rows(self, rng: np.random.Generator, n: int) -> list:
        if not self._rows:
            raise NoDataError("replay buffer is empty")
        idx = rng.integers(0, len(self._rows), size=n)
        return [self._rows[i] for i in idx]

    # transition-source protocol shared with the causal-model trainer
    def sample_arrays(self, rng: np.random.Generator, n: int):
        rows = self.sample_rows(rng, n)
        s = np.stack([r.s for r in rows])
        a = np.array([r.a for r in rows], dtype=np.int64)
        r_vec = np.stack([r.r_vec for r in rows])
        s2 = np.stack([r.s2 for r in rows])
        done = np.array([r.done for r in rows], dtype=np.float64)
        return s, a, r_vec, s2, done


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray          # scalarized
    s2: np.ndarray
    done: np.ndarray
    safe_mask: np.ndarray | None = None
    is_cf: np.ndarray | None = None


def _mask_or_default(mask, n_actions: int) -> np.ndarray:
    if mask is None:
        return np.ones(n_actions, dtype=bool)
    return mask


def sample_training_batch(
    real: ReplayBuffer,
    cf: ReplayBuffer | None,
    rng: np.random.Generator,
    batch_size: int,
    w1: float,
    w2: float,
    n_actions: int,
    reward: str = "scalar",
    cf_reward_mode: str = "scalar",
) -> Batch:
    """Mixed batch: half counterfactual rows when available, the remainder
    real.  ``reward`` selects the scalarization: "scalar" (w1/w2 mix),
    "safe" or "effe" (single component, for the decomposed variant).
    ``cf_reward_mode`` picks what a counterfactual row pays under "scalar":
    its own scalarized reward, or its stored "diff" vs. the factual action."""
    n_cf = 0
    cf_rows: list = []
    if cf is not None and len(cf) > 0:
        n_cf = min(batch_size // 2, len(cf))
        cf_rows = cf.sample_rows(rng, n_cf)
    real_rows = real.sample_rows(rng, batch_size - n_cf)

    def extract(vec):
        if reward == "safe":
            return vec[0]
        if reward == "effe":
            return vec[1]
        return w1 * vec[0] + w2 * vec[1]

    s, a, r, s2, done, masks, is_cf = [], [], [], [], [], [], []
    for row in real_rows:
        s.append(row.s); a.append(row.a); r.append(extract(row.r_vec))
        s2.append(row.s2); done.append(row.done)
        masks.append(_mask_or_default(row.safe_mask, n_actions)); is_cf.append(False)
    for row in cf_rows:
        if reward == "scalar" and cf_reward_mode == "diff":
            r.append(row.cf_r)
        else:
            r.append(extract(row.r_cf_vec))
        s.append(row.s); a.append(row.a_cf)
        s2.append(row.s_cf); done.append(False)
        masks.append(_mask_or_default(row.safe_mask, n_actions)); is_cf.append(True)
    return Batch(
        s=np.stack(s),
        a=np.array(a, dtype=np.int64),
        r=np.array(r, dtype=np.float64),
        s2=np.stack(s2),
        done=np.array(done, dtype=np.float64),
        safe_mask=np.stack(masks),
        is_cf=np.array(is_cf, dtype=bool),
    )


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

def select_action(qnet, s, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties break to the lowest action id."""
    if rng.random() < eps:
        return int(rng.integers(0, qnet.n_actions))
    return int(np.argmax(qnet.q_values(s)))


def epsilon_at(total_steps: int, horizon_steps: int, eps_start: float = 1.0,
               eps_final: float = 0.05, decay_frac: float = 0.3) -> float:
    """Linear decay over the first ``decay_frac`` of the step budget."""
    knee = max(1, int(horizon_steps * decay_frac))
    if total_steps >= knee:
        return eps_final
    return eps_start + (eps_final - eps_start) * (total_steps / knee)


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------

def td_update(qnet: QNet, batch: Batch, alpha: float, gamma: float) -> float:
    """Double-estimator TD step on scalar rewards; returns the batch MSE."""
    b = batch.s.shape[0]
    q_s, _, caches = qnet.run(batch.s)
    q2_online = qnet.q_values(batch.s2)
    a_star = np.argmax(np.atleast_2d(q2_online), axis=1)
    q2_target = np.atleast_2d(qnet.q_values(batch.s2, target=True))
    boot = q2_target[np.arange(b), a_star]
    y = batch.r + gamma * (1.0 - batch.done) * boot
    sel = q_s[np.arange(b), batch.a]
    err = sel - y
    loss = float(np.mean(err * err))
    d_q = np.zeros_like(q_s)
    d_q[np.arange(b), batch.a] = 2.0 * err / b
    qnet.apply_grads(caches, d_q, lr=alpha)
    return loss


_SKIP_WARNINGS_LEFT = 5


def _warn_skipped_rows(skipped: int) -> None:
    """Log all-unsafe row skips, demoting to debug after a few occurrences
    (common while the safety labeler is still poorly calibrated)."""
    global _SKIP_WARNINGS_LEFT
    if _SKIP_WARNINGS_LEFT > 0:
        _SKIP_WARNINGS_LEFT -= 1
        suffix = "; further occurrences logged at debug" if _SKIP_WARNINGS_LEFT == 0 else ""
        logger.warning("divergence term skipped for %d row(s): no safe action%s",
                       skipped, suffix)
    else:
        logger.debug("divergence term skipped for %d row(s): no safe action", skipped)


def cf_divergence(adv_row: np.ndarray, safe_mask: np.ndarray) -> float:
    """KL from the uniform-over-safe-actions distribution to the advantage
    softmax.  Raises if the mask has no safe action (callers must skip)."""
    mask = np.asarray(safe_mask, dtype=bool)
    if not mask.any():
        raise NoDataError("no safe action in mask")
    p = mask.astype(np.float64) / mask.sum()
    return kl_div(p, softmax(np.asarray(adv_row, dtype=np.float64)))


def cfloss_update(qnet: QNet, batch: Batch, c1: float, c2: float,
                  alpha: float, gamma: float) -> tuple[float, float, float]:
    """Joint TD + safety-divergence objective.

    Returns (total, td_part, divergence_part).  Rows whose safety mask is
    empty contribute no divergence (logged once per call).
    """
    b = batch.s.shape[0]
    q_s, adv, caches = qnet.run(batch.s)
    q2_online = qnet.q_values(batch.s2)
    a_star = np.argmax(np.atleast_2d(q2_online), axis=1)
    q2_target = np.atleast_2d(qnet.q_values(batch.s2, target=True))
    y = batch.r + gamma * (1.0 - batch.done) * q2_target[np.arange(b), a_star]
    err = q_s[np.arange(b), batch.a] - y
    td = float(np.mean(err * err))
    d_q = np.zeros_like(q_s)
    d_q[np.arange(b), batch.a] = c1 * 2.0 * err / b

    masks = batch.safe_mask if batch.safe_mask is not None \
        else np.ones((b, qnet.n_actions), dtype=bool)
    keep = masks.any(axis=1)
    skipped = int(b - keep.sum())
    if skipped:
        _warn_skipped_rows(skipped)
    delta = 0.0
    d_adv = np.zeros_like(adv)
    n_keep = int(keep.sum())
    if n_keep:
        p = masks[keep].astype(np.float64)
        p /= p.sum(axis=1, keepdims=True)
        sm = softmax(adv[keep], axis=1)
        qc = np.maximum(sm, 1e-8)
        terms = np.where(p > 0.0, p * (np.log(np.maximum(p, 1e-300)) - np.log(qc)), 0.0)
        delta = float(np.mean(terms.sum(axis=1)))
        d_adv[keep] = c2 * (sm - p) / n_keep
    qnet.apply_grads(caches, d_q, d_adv_extra=d_adv, lr=alpha)
    return c1 * td + c2 * delta, td, delta


def qcf_update(qcf: SimpleQ, cf_buffer: ReplayBuffer, rng: np.random.Generator,
               batch_size: int, alpha: float, gamma: float) -> float | None:
    """Bellman step for the counterfactual-advantage network: targets use the
    stored reward difference and bootstrap from the predicted next state.
    No-op (returns None) while the counterfactual buffer is empty."""
    if len(cf_buffer) == 0:
        logger.info("qcf_update skipped: counterfactual buffer empty")
        return None
    rows = cf_buffer.sample_rows(rng, min(batch_size, len(cf_buffer)))
    s = np.stack([r.s for r in rows])
    a = np.array([r.a_cf for r in rows], dtype=np.int64)
    tgt = np.array([r.cf_r for r in rows], dtype=np.float64)
    s_cf = np.stack([r.s_cf for r in rows])
    b = s.shape[0]
    boot = np.max(np.atleast_2d(qcf.q_values(s_cf, target=True)), axis=1)
    y = tgt + gamma * boot
    q = np.atleast_2d(qcf.q_values(s))
    err = q[np.arange(b), a] - y
    d_q = np.zeros_like(q)
    d_q[np.arange(b), a] = 2.0 * err / b
    qcf.update(s, d_q, lr=alpha)
    return float(np.mean(err * err))


def synq_compose(q_effe: np.ndarray, safe_v: np.ndarray, q_cf: np.ndarray,
                 b1: float, b2: float, b_cf: float) -> np.ndarray:
    """Min-max normalize each component over the action axis and mix.

    A constant component carries no ordering information and contributes a
    flat 0.5 per entry by convention.
    """
    def norm(v):
        v = np.asarray(v, dtype=np.float64)
        lo, hi = v.min(), v.max()
        if hi - lo < 1e-12:
            return np.full_like(v, 0.5)
        return (v - lo) / (hi - lo)

    a, b, c = map(np.asarray, (q_effe, safe_v, q_cf))
    if not (a.shape == b.shape == c.shape):
        raise ShapeError("synq_compose components must share one shape")
    return b1 * norm(a) + b2 * norm(b) + b_cf * norm(c)


# ---------------------------------------------------------------------------
# safety labeler
# ---------------------------------------------------------------------------

class UnsafeLabeler:
    """Marks actions whose model-predicted safety component falls below a
    threshold.  Deterministic: the reward generator is evaluated at zero
    exogenous noise.  Until a trained model is attached every action counts
    as safe (uniform prior)."""

    def __init__(self, model: ScmModel | None = None, tau: float = -0.5):
        self.model = model
        self.tau = tau

    def refresh(self, model: ScmModel) -> None:
        self.model = model

    @property
    def ready(self) -> bool:
        return self.model is not None and self.model.trained

    def safe_mask(self, s: np.ndarray, n_actions: int) -> np.ndarray:
        if not self.ready:
            return np.ones(n_actions, dtype=bool)
        m = self.model
        s_rep = np.repeat(np.asarray(s, dtype=np.float64).reshape(1, -1), n_actions, axis=0)
        u_s = np.zeros((n_actions, m.noise_state_dim))
        u_r = np.zeros((n_actions, m.noise_reward_dim))
        _, r_pred = predict_counterfactual(m, s_rep, np.arange(n_actions), u_s, u_r)
        mask = r_pred[:, 0] >= self.tau
        if not mask.any():
            logger.debug("labeler marked every action unsafe; returning empty mask")
        return mask

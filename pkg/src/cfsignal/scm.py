"""Learned structural causal model of the environment step.

Two generators map (state, action, noise) to the next state and the
two-component reward; an encoder maps the observed outcome back to
(state, action, noise); a critic is trained adversarially to make the
encoder-inferred joint tuples indistinguishable from prior-noise generated
ones.  The generators additionally pay a reconstruction penalty through the
encoder-inferred noise (so the model is consistent with the factual outcome)
and a non-negativity penalty on their weight matrices, which pushes them
toward maps that are monotone in the exogenous noise -- the property that
makes "infer the noise, replay a different action" a sound counterfactual.

Counterfactual evaluation is then two pure functions: :func:`infer_noise`
reads the noise off the factual outcome, :func:`predict_counterfactual`
replays any action under that same noise.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import NoDataError, ShapeError
from .nn import (
    AdamW,
    Mlp,
    bce,
    load_mlp,
    mse,
    monotonicity_penalty,
    monotonicity_penalty_grads,
    one_hot,
    save_mlp,
    softmax,
)

REAL_LABEL = 0.9  # one-sided label smoothing for the critic targets
FAKE_LABEL = 0.1


@dataclass
class ScmLossReport:
    disc_loss: float = 0.0
    adv_loss: float = 0.0
    recon_loss: float = 0.0
    anchor_loss: float = 0.0
    temper_loss: float = 0.0
    aux_loss: float = 0.0
    mono_state: float = 0.0
    mono_reward: float = 0.0
    disc_real_mean: float = 0.0
    disc_fake_mean: float = 0.0
    n_batches: int = 0


@dataclass
class TransitionDataset:
    """Array-backed transition source (the replay buffer offers the same
    ``sample_arrays`` protocol)."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray   # (n, 2) safe/effe
    s2: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]

    def sample_arrays(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self), size=n)
        done = np.zeros(n, dtype=np.float64)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], done


class ScmModel:
    """Container for the four networks plus their optimizers.

    ``state_bounds`` clamps counterfactual state predictions (grids live in
    [0, 1]); pass ``None`` for unbounded state spaces such as the analytic
    test rigs.
    """

    def __init__(
        self,
        state_dim: int,
        n_actions: int,
        hidden: tuple[int, ...] = (600, 600),
        noise_state_dim: int = 2,
        noise_reward_dim: int = 2,
        reward_dim: int = 2,
        lambda_mono: float = 1.0,
        beta: float = 1.0,
        lr_gen: float = 0.0004,
        lr_enc: float = 0.0004,
        lr_disc: float = 0.003,
        state_bounds: tuple[float, float] | None = (0.0, 1.0),
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.hidden = tuple(hidden)
        self.noise_state_dim = noise_state_dim
        self.noise_reward_dim = noise_reward_dim
        self.reward_dim = reward_dim
        self.lambda_mono = lambda_mono
        self.beta = beta
        self.state_bounds = state_bounds
        self.trained = False

        h = list(self.hidden)
        relu = ["relu"] * len(h)
        ctx = state_dim + n_actions
        self.gen_state = Mlp([ctx + noise_state_dim, *h, state_dim], [*relu, "identity"], rng)
        self.gen_reward = Mlp([ctx + noise_reward_dim, *h, reward_dim], [*relu, "identity"], rng)
        enc_out = state_dim + n_actions + noise_state_dim + noise_reward_dim
        self.encoder = Mlp([state_dim + reward_dim, *h, enc_out], [*relu, "identity"], rng)
        disc_in = ctx + reward_dim + state_dim + noise_state_dim + noise_reward_dim
        self.disc = Mlp([disc_in, *h, 1], [*relu, "identity"], rng)

        self.opt_gen_state = AdamW(lr=lr_gen)
        self.opt_gen_reward = AdamW(lr=lr_gen)
        self.opt_encoder = AdamW(lr=lr_enc)
        self.opt_disc = AdamW(lr=lr_disc)

    # -- slicing helpers ----------------------------------------------------

    def split_encoder_out(self, out: np.ndarray):
        d, n = self.state_dim, self.n_actions
        ks, kr = self.noise_state_dim, self.noise_reward_dim
        s_hat = out[..., :d]
        a_logits = out[..., d : d + n]
        u_s = out[..., d + n : d + n + ks]
        u_r = out[..., d + n + ks : d + n + ks + kr]
        return s_hat, a_logits, u_s, u_r

    def _disc_in(self, s, a1h, r, s2, u_s, u_r) -> np.ndarray:
        return np.concatenate([s, a1h, r, s2, u_s, u_r], axis=-1)

    def disc_prob(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.disc.run(x)
        return 1.0 / (1.0 + np.exp(-logits))


def _as_batch(x, dim, name) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeError(f"{name}: expected (*, {dim}), got {np.asarray(x).shape}")
    return arr, squeeze


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer_noise(model: ScmModel, s_next, r_vec):
    """Read (state-reconstruction, action-logits, state-noise, reward-noise)
    off a factual outcome.  Deterministic; does not touch model state."""
    s2, squeeze = _as_batch(s_next, model.state_dim, "s_next")
    r, _ = _as_batch(r_vec, model.reward_dim, "r_vec")
    if r.shape[0] != s2.shape[0]:
        raise ShapeError("s_next and r_vec batch sizes differ")
    out, _ = model.encoder.run(np.concatenate([s2, r], axis=-1))
    parts = model.split_encoder_out(out)
    if squeeze:
        return tuple(p[0] for p in parts)
    return parts


def predict_counterfactual(model: ScmModel, s, a_cf, u_s, u_r):
    """Replay action ``a_cf`` under fixed exogenous noise.

    Pure function of its inputs; state predictions are clamped to
    ``model.state_bounds`` when set.  Returns (s_cf, r_cf_vec).
    """
    s_arr, squeeze = _as_batch(s, model.state_dim, "s")
    n = s_arr.shape[0]
    a = np.asarray(a_cf)
    if a.ndim == 0:
        a = np.full(n, int(a))
    if np.any((a < 0) | (a >= model.n_actions)):
        raise ShapeError(f"a_cf outside 0..{model.n_actions - 1}")
    a1h = one_hot(a, model.n_actions)
    us, _ = _as_batch(u_s, model.noise_state_dim, "u_s")
    ur, _ = _as_batch(u_r, model.noise_reward_dim, "u_r")
    if us.shape[0] == 1 and n > 1:
        us = np.repeat(us, n, axis=0)
    if ur.shape[0] == 1 and n > 1:
        ur = np.repeat(ur, n, axis=0)
    s_cf, _ = model.gen_state.run(np.concatenate([s_arr, a1h, us], axis=-1))
    r_cf, _ = model.gen_reward.run(np.concatenate([s_arr, a1h, ur], axis=-1))
    if model.state_bounds is not None:
        lo, hi = model.state_bounds
        s_cf = np.clip(s_cf, lo, hi)
    if squeeze:
        return s_cf[0], r_cf[0]
    return s_cf, r_cf


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def _unsafe_row_index(buffer) -> np.ndarray:
    """Indices of rows whose safety component marks a collision.  Only
    row-indexable sources participate; array-backed datasets fall back to
    uniform sampling."""
    if not hasattr(buffer, "__getitem__"):
        return np.empty(0, dtype=np.int64)
    return np.array([i for i in range(len(buffer)) if buffer[i].r_vec[0] < -0.5],
                    dtype=np.int64)


def _draw_batch(buffer, rng: np.random.Generator, bs: int,
                unsafe_idx: np.ndarray | None):
    """One training batch; with a non-empty ``unsafe_idx`` half the rows are
    drawn from the collision subset, the rest uniformly."""
    if unsafe_idx is not None and unsafe_idx.size:
        half = bs // 2
        pick = np.concatenate([
            unsafe_idx[rng.integers(0, unsafe_idx.size, size=half)],
            rng.integers(0, len(buffer), size=bs - half),
        ])
        rows = [buffer[int(i)] for i in pick]
        s = np.stack([row.s for row in rows]).astype(np.float64)
        a = np.array([row.a for row in rows])
        r = np.stack([row.r_vec for row in rows]).astype(np.float64)
        s2 = np.stack([row.s2 for row in rows]).astype(np.float64)
        return s, a, r, s2
    s, a, r, s2, _done = buffer.sample_arrays(rng, bs)
    return (np.asarray(s, dtype=np.float64), a, np.asarray(r, dtype=np.float64),
            np.asarray(s2, dtype=np.float64))


def scm_warm_start(
    model: ScmModel,
    buffer,
    rng: np.random.Generator,
    batch_size: int = 128,
    batches: int = 300,
    balance: bool = True,
    encoder_batches: int = 0,
    polish_batches: int = 0,
    polish_temper: float = 1.0,
) -> float:
    """Regression warm start for the generators and the encoder's reward
    noise head.

    Phase one fits the conditional mean of (s', r) given (s, a) at zero
    exogenous noise.  This anchors the generators in an action-sensitive
    solution; without it the encoder can satisfy reconstruction by smuggling
    the observed reward through u_r and the reward generator never learns to
    read its action input.  ``balance`` oversamples rows with a negative
    safety component, which are rare in the buffer but carry all of the
    collision signal (regression tolerates the reweighting; the adversarial
    stage must not be fed rebalanced batches).

    Phase two (``encoder_batches`` > 0) points the encoder's reward-noise
    head at the standardized regression residual r - E[r | s, a] and
    teaches the reward generator to read that residual back — the
    closed-form abduction for an additive monotone mechanism.  The
    adversarial stage then starts from an honest inversion instead of
    having to discover one from critic gradients alone.

    Phase three (``polish_batches`` > 0) runs joint supervised updates of
    all three networks — reconstruction through inferred noise, the
    zero-noise anchor, counterfactual temperance at ``polish_temper``, and
    the encoder's auxiliary heads — on the same rebalanced batches.  This
    reconciles the two earlier phases: reconstruction keeps the factual
    outcome flowing through the inferred residual while temperance stops
    that residual from dragging other actions' predictions along with it.

    Returns the mean reconstruction loss over the last ten phase-one
    batches.
    """
    n_avail = len(buffer)
    if n_avail == 0:
        raise NoDataError("transition buffer is empty")
    bs = min(batch_size, n_avail)
    ks, kr = model.noise_state_dim, model.noise_reward_dim
    unsafe_idx = _unsafe_row_index(buffer) if balance else np.empty(0, dtype=np.int64)

    def mean_step(s, a1h, r, s2):
        b = s.shape[0]
        u_s = np.zeros((b, ks))
        u_r = np.zeros((b, kr))
        s2_hat, c1 = model.gen_state.run(np.concatenate([s, a1h, u_s], axis=-1))
        r_hat, c2 = model.gen_reward.run(np.concatenate([s, a1h, u_r], axis=-1))
        pg1, _ = model.gen_state.grads_from(c1, 2.0 * (s2_hat - s2) / (b * model.state_dim))
        pg2, _ = model.gen_reward.grads_from(c2, 2.0 * (r_hat - r) / (b * model.reward_dim))
        g1 = Mlp.flatten_grads(pg1)
        g2 = Mlp.flatten_grads(pg2)
        if model.lambda_mono > 0.0:
            for tgt, src in zip(g1, Mlp.flatten_grads(monotonicity_penalty_grads(model.gen_state))):
                tgt += model.lambda_mono * src
            for tgt, src in zip(g2, Mlp.flatten_grads(monotonicity_penalty_grads(model.gen_reward))):
                tgt += model.lambda_mono * src
        model.opt_gen_state.step(model.gen_state.params(), g1)
        model.opt_gen_reward.step(model.gen_reward.params(), g2)
        return mse(s2_hat, s2) + mse(r_hat, r)

    tail: list[float] = []
    for _ in range(batches):
        s, a, r, s2 = _draw_batch(buffer, rng, bs, unsafe_idx)
        tail.append(mean_step(s, one_hot(np.asarray(a), model.n_actions), r, s2))
        if len(tail) > 10:
            tail.pop(0)
    out = float(np.mean(tail)) if tail else float("nan")

    if encoder_batches > 0:
        # residual scale under the uniform buffer distribution, so the
        # inferred noise stays on the unit scale the adversarial prior expects
        s0, a0, r0, _s20 = _draw_batch(buffer, rng, min(2048, n_avail), None)
        a1h0 = one_hot(np.asarray(a0), model.n_actions)
        mean_r0, _ = model.gen_reward.run(
            np.concatenate([s0, a1h0, np.zeros((s0.shape[0], kr))], axis=-1))
        sigma = np.maximum(np.std(r0 - mean_r0, axis=0), 1e-6)
        width = min(kr, model.reward_dim)

        for _ in range(encoder_batches):
            s, a, r, s2 = _draw_batch(buffer, rng, bs, unsafe_idx)
            b = s.shape[0]
            a1h = one_hot(np.asarray(a), model.n_actions)
            ctx = np.concatenate([s, a1h], axis=-1)
            mean_r, _ = model.gen_reward.run(
                np.concatenate([ctx, np.zeros((b, kr))], axis=-1))
            target = np.zeros((b, kr))
            target[:, :width] = ((r - mean_r) / sigma)[:, :width]

            enc_in = np.concatenate([s2, r], axis=-1)
            enc_out, enc_cache = model.encoder.run(enc_in)
            _, _, _, u_r_hat = model.split_encoder_out(enc_out)
            enc_gout = np.zeros_like(enc_out)
            enc_gout[:, model.state_dim + model.n_actions + ks:] = \
                2.0 * (u_r_hat - target) / (b * kr)
            enc_pg, _ = model.encoder.grads_from(enc_cache, enc_gout)
            model.opt_encoder.step(model.encoder.params(), Mlp.flatten_grads(enc_pg))

            # teacher-forced read-back keeps the zero-noise mean in place
            # while the noise pathway learns the residual scale
            r_hat, c2 = model.gen_reward.run(np.concatenate([ctx, target], axis=-1))
            r0_hat, c0 = model.gen_reward.run(np.concatenate([ctx, np.zeros((b, kr))], axis=-1))
            pg2, _ = model.gen_reward.grads_from(c2, 2.0 * (r_hat - r) / (b * model.reward_dim))
            pg0, _ = model.gen_reward.grads_from(c0, 2.0 * (r0_hat - r) / (b * model.reward_dim))
            g2 = Mlp.flatten_grads(pg2)
            for tgt, src in zip(g2, Mlp.flatten_grads(pg0)):
                tgt += src
            if model.lambda_mono > 0.0:
                for tgt, src in zip(g2, Mlp.flatten_grads(monotonicity_penalty_grads(model.gen_reward))):
                    tgt += model.lambda_mono * src
            model.opt_gen_reward.step(model.gen_reward.params(), g2)

    for _ in range(polish_batches):
        s, a, r, s2 = _draw_batch(buffer, rng, bs, unsafe_idx)
        a1h = one_hot(np.asarray(a), model.n_actions)
        m1_grads, m2_grads, enc_cache, enc_gout, _u, _losses = _supervised_terms(
            model, s, a1h, r, s2, rng,
            anchor_weight=1.0, temper_weight=polish_temper)
        enc_pg, _ = model.encoder.grads_from(enc_cache, enc_gout)
        model.opt_gen_state.step(model.gen_state.params(), m1_grads)
        model.opt_gen_reward.step(model.gen_reward.params(), m2_grads)
        model.opt_encoder.step(model.encoder.params(), Mlp.flatten_grads(enc_pg))
    return out


def _supervised_terms(model: ScmModel, s, a1h, r, s2, rng,
                      anchor_weight: float, temper_weight: float):
    """Gradients of every non-adversarial generator/encoder term on one
    batch: reconstruction through inferred noise, the zero-noise anchor,
    counterfactual temperance, the encoder's auxiliary heads, and the
    monotonicity penalty.  Returns accumulated generator grads, the encoder
    backprop ingredients (so a caller may append adversarial terms before
    finishing), and the individual loss values.
    """
    ks, kr = model.noise_state_dim, model.noise_reward_dim
    b = s.shape[0]
    d, n = model.state_dim, model.n_actions
    m1_grads = Mlp.zero_grads_like(model.gen_state.params())
    m2_grads = Mlp.zero_grads_like(model.gen_reward.params())

    enc_in = np.concatenate([s2, r], axis=-1)
    enc_out, enc_cache = model.encoder.run(enc_in)
    s_hat, a_logits, u_s_hat, u_r_hat = model.split_encoder_out(enc_out)
    enc_gout = np.zeros_like(enc_out)

    ctx = np.concatenate([s, a1h], axis=-1)
    # reconstruction of the factual outcome through inferred noise
    s2_hat, m1_cache = model.gen_state.run(np.concatenate([ctx, u_s_hat], axis=-1))
    r_hat, m2_cache = model.gen_reward.run(np.concatenate([ctx, u_r_hat], axis=-1))
    # each head is averaged over its own width so the low-dimensional
    # reward signal is not drowned out by a wide state vector
    recon = mse(s2_hat, s2) + mse(r_hat, r)
    g_s2 = model.beta * 2.0 * (s2_hat - s2) / (b * model.state_dim)
    g_r = model.beta * 2.0 * (r_hat - r) / (b * model.reward_dim)
    pg1, gin1 = model.gen_state.grads_from(m1_cache, g_s2)
    pg2, gin2 = model.gen_reward.grads_from(m2_cache, g_r)
    for tgt, src in zip(m1_grads, Mlp.flatten_grads(pg1)):
        tgt += src
    for tgt, src in zip(m2_grads, Mlp.flatten_grads(pg2)):
        tgt += src
    enc_gout[:, d + n : d + n + ks] += gin1[:, -ks:]
    enc_gout[:, d + n + ks :] += gin2[:, -kr:]

    # zero-noise anchor: the systematic (state, action) pathway must
    # carry the conditional mean on its own
    anchor = 0.0
    if anchor_weight > 0.0:
        z_s = np.zeros((b, ks))
        z_r = np.zeros((b, kr))
        s2_anc, anc1_cache = model.gen_state.run(
            np.concatenate([ctx, z_s], axis=-1))
        r_anc, anc2_cache = model.gen_reward.run(
            np.concatenate([ctx, z_r], axis=-1))
        anchor = mse(s2_anc, s2) + mse(r_anc, r)
        ga_s2 = anchor_weight * 2.0 * (s2_anc - s2) / (b * model.state_dim)
        ga_r = anchor_weight * 2.0 * (r_anc - r) / (b * model.reward_dim)
        pga1, _ = model.gen_state.grads_from(anc1_cache, ga_s2)
        pga2, _ = model.gen_reward.grads_from(anc2_cache, ga_r)
        for tgt, src in zip(m1_grads, Mlp.flatten_grads(pga1)):
            tgt += src
        for tgt, src in zip(m2_grads, Mlp.flatten_grads(pga2)):
            tgt += src

    # counterfactual temperance: replaying the inferred noise under a
    # random action never taken should stay near that action's own
    # zero-noise point unless the pre-decision state itself supports it.
    # Gradient flows through the carried branch only — neither the
    # target nor the encoder is pulled by this term.
    temper = 0.0
    if temper_weight > 0.0 and model.n_actions > 1:
        a_fact = np.argmax(a1h, axis=-1)
        a_alt = (a_fact + rng.integers(1, model.n_actions, size=b)) % model.n_actions
        ctx_alt = np.concatenate([s, one_hot(a_alt, model.n_actions)], axis=-1)
        r_alt, tcache = model.gen_reward.run(
            np.concatenate([ctx_alt, u_r_hat], axis=-1))
        r_alt0, _ = model.gen_reward.run(
            np.concatenate([ctx_alt, np.zeros((b, kr))], axis=-1))
        temper = mse(r_alt, r_alt0)
        pgt, _ = model.gen_reward.grads_from(
            tcache, temper_weight * 2.0 * (r_alt - r_alt0) / (b * model.reward_dim))
        for tgt, src in zip(m2_grads, Mlp.flatten_grads(pgt)):
            tgt += src

    # encoder auxiliary heads: reconstruct s, classify the action
    aux_s = mse(s_hat, s)
    probs = softmax(a_logits, axis=-1)
    a_idx = np.argmax(a1h, axis=-1)
    ce = float(np.mean(-np.log(np.maximum(probs[np.arange(b), a_idx], 1e-12))))
    enc_gout[:, :d] += model.beta * 2.0 * (s_hat - s) / (b * d)
    enc_gout[:, d : d + n] += model.beta * (probs - a1h) / b

    # weight-sign penalty keeping the generators monotone in noise
    mono1 = monotonicity_penalty(model.gen_state)
    mono2 = monotonicity_penalty(model.gen_reward)
    if model.lambda_mono > 0.0:
        for tgt, src in zip(m1_grads,
                            Mlp.flatten_grads(monotonicity_penalty_grads(model.gen_state))):
            tgt += model.lambda_mono * src
        for tgt, src in zip(m2_grads,
                            Mlp.flatten_grads(monotonicity_penalty_grads(model.gen_reward))):
            tgt += model.lambda_mono * src

    losses = {"recon": recon, "anchor": anchor, "temper": temper,
              "aux": aux_s + ce, "mono_state": mono1, "mono_reward": mono2}
    return m1_grads, m2_grads, enc_cache, enc_gout, (u_s_hat, u_r_hat), losses


def scm_train_epoch(
    model: ScmModel,
    buffer,
    rng: np.random.Generator,
    batch_size: int = 128,
    max_batches: int | None = None,
    adv_weight: float = 1.0,
    gen_updates: int = 5,
    anchor_weight: float = 1.0,
    temper_weight: float = 1.0,
) -> ScmLossReport:
    """One pass: per batch, one critic update then ``gen_updates`` joint
    generator+encoder updates.  ``adv_weight == 0`` skips the adversarial
    game entirely, reducing training to supervised reconstruction.

    ``anchor_weight`` scales an auxiliary regression that pins each
    generator's zero-noise output to the factual outcome.  Factual data
    alone cannot tell a genuine mechanism apart from a degenerate one that
    routes the outcome through the inferred noise and ignores the action
    (both reconstruct perfectly), so without the anchor the encoder tends
    to smuggle the outcome into its noise heads and counterfactual queries
    go flat across actions.  Pinning the zero-noise point to the
    conditional mean reserves the noise channel for residuals; a monotone
    mechanism with centred noise satisfies the anchor exactly.

    ``temper_weight`` scales a counterfactual-temperance regression on the
    reward head: for a random non-factual action the carried noise should
    move the prediction only where the pre-decision state itself supports
    it, so the head is pulled toward its own zero-noise output there.  How
    much of an inferred residual transfers to actions never taken is not
    identifiable from factual data — replay constrains the factual action
    only — and without a stated preference the network's weight sharing
    decides it arbitrarily.  This term makes the choice explicit and
    conservative while leaving factual reconstruction untouched.

    Batches are drawn uniformly on purpose: the adversarial game matches
    whatever joint distribution it is fed, so oversampling rare collision
    rows here would teach the generators a world where collisions are the
    norm (the warm start, a plain regression, is free to rebalance).
    """
    n_avail = len(buffer)
    if n_avail == 0:
        raise NoDataError("transition buffer is empty")
    bs = min(batch_size, n_avail)
    n_batches = max_batches if max_batches is not None else max(n_avail // bs, 1)
    report = ScmLossReport(n_batches=n_batches)
    ks, kr = model.noise_state_dim, model.noise_reward_dim

    for _ in range(n_batches):
        s, a, r, s2 = _draw_batch(buffer, rng, bs, None)
        a1h = one_hot(np.asarray(a), model.n_actions)
        b = s.shape[0]
        enc_in = np.concatenate([s2, r], axis=-1)

        # ---- critic update (skipped in pure-regression mode) ----
        if adv_weight > 0.0:
            enc_out, _ = model.encoder.run(enc_in)
            _, _, u_s_hat, u_r_hat = model.split_encoder_out(enc_out)
            u_s = rng.standard_normal((b, ks))
            u_r = rng.standard_normal((b, kr))
            ctx = np.concatenate([s, a1h], axis=-1)
            s2_gen, _ = model.gen_state.run(np.concatenate([ctx, u_s], axis=-1))
            r_gen, _ = model.gen_reward.run(np.concatenate([ctx, u_r], axis=-1))

            x_real = model._disc_in(s, a1h, r, s2, u_s_hat, u_r_hat)
            x_fake = model._disc_in(s, a1h, r_gen, s2_gen, u_s, u_r)
            logit_real, cache_real = model.disc.run(x_real)
            logit_fake, cache_fake = model.disc.run(x_fake)
            p_real = _sigmoid(logit_real)
            p_fake = _sigmoid(logit_fake)
            d_loss = (bce(p_real, np.full_like(p_real, REAL_LABEL))
                      + bce(p_fake, np.full_like(p_fake, FAKE_LABEL)))
            g_real, _ = model.disc.grads_from(cache_real, (p_real - REAL_LABEL) / b)
            g_fake, _ = model.disc.grads_from(cache_fake, (p_fake - FAKE_LABEL) / b)
            d_grads = [dw + dw2 for (dw, _), (dw2, _) in zip(g_real, g_fake)]
            d_bias = [db + db2 for (_, db), (_, db2) in zip(g_real, g_fake)]
            flat = []
            for dw, db in zip(d_grads, d_bias):
                flat.extend([dw, db])
            model.opt_disc.step(model.disc.params(), flat)
            report.disc_loss += d_loss
            report.disc_real_mean += float(p_real.mean())
            report.disc_fake_mean += float(p_fake.mean())

        # ---- joint generator + encoder updates ----
        for _g in range(gen_updates):
            m1_grads, m2_grads, enc_cache, enc_gout, (u_s_hat, u_r_hat), terms = \
                _supervised_terms(model, s, a1h, r, s2, rng,
                                  anchor_weight=anchor_weight,
                                  temper_weight=temper_weight)
            d, n = model.state_dim, model.n_actions

            adv = 0.0
            if adv_weight > 0.0:
                # fool the critic on generated tuples ...
                u_s = rng.standard_normal((b, ks))
                u_r = rng.standard_normal((b, kr))
                s2_gen, m1g_cache = model.gen_state.run(np.concatenate([ctx, u_s], axis=-1))
                r_gen, m2g_cache = model.gen_reward.run(np.concatenate([ctx, u_r], axis=-1))
                x_fake = model._disc_in(s, a1h, r_gen, s2_gen, u_s, u_r)
                logit_fake, dcache_f = model.disc.run(x_fake)
                p_fake = _sigmoid(logit_fake)
                adv += bce(p_fake, np.full_like(p_fake, REAL_LABEL))
                _, din_f = model.disc.grads_from(dcache_f, adv_weight * (p_fake - REAL_LABEL) / b)
                off_r = model.state_dim + model.n_actions
                off_s2 = off_r + model.reward_dim
                pgf1, _ = model.gen_state.grads_from(m1g_cache,
                                                     din_f[:, off_s2 : off_s2 + model.state_dim])
                pgf2, _ = model.gen_reward.grads_from(m2g_cache,
                                                      din_f[:, off_r : off_r + model.reward_dim])
                for tgt, src in zip(m1_grads, Mlp.flatten_grads(pgf1)):
                    tgt += src
                for tgt, src in zip(m2_grads, Mlp.flatten_grads(pgf2)):
                    tgt += src

                # ... and make encoder-completed tuples look generated
                x_real = model._disc_in(s, a1h, r, s2, u_s_hat, u_r_hat)
                logit_real, dcache_r = model.disc.run(x_real)
                p_real = _sigmoid(logit_real)
                adv += bce(p_real, np.full_like(p_real, FAKE_LABEL))
                _, din_r = model.disc.grads_from(dcache_r, adv_weight * (p_real - FAKE_LABEL) / b)
                off_us = off_s2 + model.state_dim
                enc_gout[:, d + n : d + n + ks] += din_r[:, off_us : off_us + ks]
                enc_gout[:, d + n + ks :] += din_r[:, off_us + ks :]

            enc_pg, _ = model.encoder.grads_from(enc_cache, enc_gout)
            model.opt_gen_state.step(model.gen_state.params(), m1_grads)
            model.opt_gen_reward.step(model.gen_reward.params(), m2_grads)
            model.opt_encoder.step(model.encoder.params(), Mlp.flatten_grads(enc_pg))

            if _g == gen_updates - 1:
                report.recon_loss += terms["recon"]
                report.anchor_loss += terms["anchor"]
                report.temper_loss += terms["temper"]
                report.aux_loss += terms["aux"]
                report.adv_loss += adv
                report.mono_state += terms["mono_state"]
                report.mono_reward += terms["mono_reward"]

    for name in ("disc_loss", "adv_loss", "recon_loss", "anchor_loss", "temper_loss",
                 "aux_loss", "mono_state", "mono_reward", "disc_real_mean",
                 "disc_fake_mean"):
        setattr(report, name, getattr(report, name) / n_batches)
    model.trained = True
    return report


# ---------------------------------------------------------------------------
# persistence: three network checkpoints + a json meta file in a directory
# ---------------------------------------------------------------------------

def save_scm(model: ScmModel, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    save_mlp(model.gen_state, os.path.join(dirpath, "gen_state.net"))
    save_mlp(model.gen_reward, os.path.join(dirpath, "gen_reward.net"))
    save_mlp(model.encoder, os.path.join(dirpath, "encoder.net"))
    meta = {
        "state_dim": model.state_dim,
        "n_actions": model.n_actions,
        "hidden": list(model.hidden),
        "noise_state_dim": model.noise_state_dim,
        "noise_reward_dim": model.noise_reward_dim,
        "reward_dim": model.reward_dim,
        "lambda_mono": model.lambda_mono,
        "beta": model.beta,
        "state_bounds": list(model.state_bounds) if model.state_bounds else None,
        "trained": model.trained,
    }
    with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_scm(dirpath) -> ScmModel:
    with open(os.path.join(dirpath, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    model = ScmModel(
        state_dim=meta["state_dim"],
        n_actions=meta["n_actions"],
        hidden=tuple(meta["hidden"]),
        noise_state_dim=meta["noise_state_dim"],
        noise_reward_dim=meta["noise_reward_dim"],
        reward_dim=meta["reward_dim"],
        lambda_mono=meta["lambda_mono"],
        beta=meta["beta"],
        state_bounds=tuple(meta["state_bounds"]) if meta["state_bounds"] else None,
    )
    model.gen_state = load_mlp(os.path.join(dirpath, "gen_state.net"))
    model.gen_reward = load_mlp(os.path.join(dirpath, "gen_reward.net"))
    model.encoder = load_mlp(os.path.join(dirpath, "encoder.net"))
    model.trained = bool(meta["trained"])
    return model

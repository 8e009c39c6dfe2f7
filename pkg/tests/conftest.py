"""Hand-built frozen causal models shared across test modules.

Both rigs use single affine layers whose weights were written down by hand,
so every number flowing through them can be checked on paper.  Generator
weights are non-negative throughout, which keeps the monotonicity penalty
at exactly zero.
"""

import numpy as np
import pytest

from cfsignal.ctc import PreCollisionRecord
from cfsignal.nn import Mlp
from cfsignal.scm import ScmModel


def _frozen_model() -> ScmModel:
    model = ScmModel(state_dim=1, n_actions=2, hidden=(4,), state_bounds=None)
    model.trained = True
    return model


@pytest.fixture
def shift_rig():
    """Additive world: next = state + action + noise.

    Generator inputs are (s, a0, a1, u_s0, u_s1); the reward's second
    component carries s + a so the encoder can recover the state noise as
    u_s0 = s_next - r[1] from its own inputs alone.

    The bundled record observes s=2, a=1, s_next=5, so u_s0 must come out
    as exactly 2 and replaying a_cf=0 must land on 4.
    """
    model = _frozen_model()
    model.gen_state = Mlp.from_layers([
        ([[1.0, 0.0, 1.0, 1.0, 0.0]], [0.0], "identity"),
    ])
    model.gen_reward = Mlp.from_layers([
        ([[0.0, 0.0, 0.0, 0.0, 0.0],
          [1.0, 0.0, 1.0, 0.0, 0.0]], [0.0, 0.0], "identity"),
    ])
    # encoder input (s_next, r_safe, r_effe) -> 7 outputs
    enc_w = np.zeros((7, 3))
    enc_w[3, 0] = 1.0   # u_s0 <- s_next
    enc_w[3, 2] = -1.0  # u_s0 <- -r_effe
    model.encoder = Mlp.from_layers([(enc_w, np.zeros(7), "identity")])
    record = PreCollisionRecord(
        snap=None,
        s=np.array([2.0]),
        a_taken=1,
        r_ac_vec=np.array([0.0, 3.0]),
        s_next=np.array([5.0]),
    )
    return model, record


@pytest.fixture
def collision_rig():
    """Reward-path world where action 1 collides and action 0 does not.

    safe = 2 * [a == 0] + u_r0 and efficiency is a constant 0.4, so a factual
    record with a=1 and safe=-2 infers u_r0=-2, replay of a_cf=0 yields
    safe=0, and the safety gain is exactly +2 at equal efficiency.
    """
    model = _frozen_model()
    model.gen_state = Mlp.from_layers([
        ([[1.0, 0.0, 0.0, 0.0, 0.0]], [0.0], "identity"),
    ])
    model.gen_reward = Mlp.from_layers([
        ([[0.0, 2.0, 0.0, 1.0, 0.0],
          [0.0, 0.0, 0.0, 0.0, 0.0]], [0.0, 0.4], "identity"),
    ])
    enc_w = np.zeros((7, 3))
    enc_w[5, 1] = 1.0   # u_r0 <- r_safe
    model.encoder = Mlp.from_layers([(enc_w, np.zeros(7), "identity")])
    record = PreCollisionRecord(
        snap=None,
        s=np.array([0.5]),
        a_taken=1,
        r_ac_vec=np.array([-2.0, 0.4]),
        s_next=np.array([0.5]),
    )
    return model, record

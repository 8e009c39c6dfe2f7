"""Minimal two-lane-crossing environment.

The ego vehicle starts in lane 0 and wants to reach lane 2.  Every round it
observes, for each lane it could move into, the gap to the nearest vehicle
and that vehicle's speed, then chooses ``stay`` (0) or ``change`` (1).

A change succeeds outright when the target-lane gap exceeds the
speed-dependent safety gap ``g_req = g0 + headway * ego_speed``; a gap at
exactly the threshold is safe.  Below the threshold the maneuver collides
with probability proportional to the deficit, ``(g_req - gap) / g_req``.
Reward is -1 on collision and 0 otherwise, plus a small progress bonus on
every successful change.  An episode ends on collision, on reaching the
target lane, or after ``max_rounds`` rounds.

The environment mirrors the intersection API (seeded episodes, value-copy
snapshot/restore) so the same counterfactual machinery applies.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..errors import EpisodeFinishedError, IncompatibleSnapshotError, InvalidActionError
from .intersection import RewardVec

STAY = 0
CHANGE = 1


@dataclass(frozen=True)
class LaneChangeConfig:
    n_lanes: int = 3
    target_lane: int = 2
    v_max: float = 30.0
    v_min: float = 5.0
    gap_max: float = 40.0
    g0: float = 5.0            # base safety gap, m
    headway: float = 0.6       # extra required gap per m/s of ego speed
    progress_bonus: float = 0.1
    max_rounds: int = 20

    @property
    def n_actions(self) -> int:
        return 2

    def fingerprint(self) -> str:
        return f"lc:{self.n_lanes}:{self.target_lane}:{self.max_rounds}"


@dataclass
class LaneChangeState:
    lane: int
    ego_speed: float
    gaps: np.ndarray       # gap to the nearest vehicle in each other lane
    speeds: np.ndarray
    round: int
    done: bool
    rng: np.random.Generator


@dataclass
class LaneChangeOutcome:
    state: LaneChangeState
    reward: RewardVec
    collided: bool
    done: bool


@dataclass
class LaneChangeSnapshot:
    fingerprint: str
    payload: dict


class LaneChangeSim:
    def __init__(self, cfg: LaneChangeConfig | None = None):
        self.cfg = cfg or LaneChangeConfig()

    def _draw_situation(self, state: LaneChangeState) -> None:
        cfg = self.cfg
        rng = state.rng
        state.ego_speed = float(rng.uniform(cfg.v_min, cfg.v_max))
        state.gaps = rng.uniform(0.0, cfg.gap_max, size=cfg.n_lanes - 1)
        state.speeds = rng.uniform(0.3 * cfg.v_max, cfg.v_max, size=cfg.n_lanes - 1)

    def new_episode(self, seed: int) -> LaneChangeState:
        state = LaneChangeState(
            lane=0,
            ego_speed=0.0,
            gaps=np.zeros(self.cfg.n_lanes - 1),
            speeds=np.zeros(self.cfg.n_lanes - 1),
            round=0,
            done=False,
            rng=np.random.default_rng(
                np.random.SeedSequence(entropy=int(seed) & ((1 << 63) - 1), spawn_key=(23,))
            ),
        )
        self._draw_situation(state)
        return state

    def required_gap(self, ego_speed: float) -> float:
        return self.cfg.g0 + self.cfg.headway * ego_speed

    def step(self, state: LaneChangeState, action: int) -> LaneChangeOutcome:
        cfg = self.cfg
        if action not in (STAY, CHANGE):
            raise InvalidActionError(f"lane-change action must be 0 or 1, got {action!r}")
        if state.done:
            raise EpisodeFinishedError("lane-change episode already finished")

        collided = False
        bonus = 0.0
        if action == CHANGE:
            target = state.lane + 1
            gap = float(state.gaps[target - 1])
            g_req = self.required_gap(state.ego_speed)
            if gap >= g_req:
                state.lane = target
                bonus = cfg.progress_bonus
            else:
                p = (g_req - gap) / g_req
                if state.rng.random() < p:
                    collided = True
                else:
                    state.lane = target
                    bonus = cfg.progress_bonus

        state.round += 1
        if collided or state.lane >= cfg.target_lane or state.round >= cfg.max_rounds:
            state.done = True
        else:
            self._draw_situation(state)

        reward = RewardVec(safe=-1.0 if collided else 0.0, effe=bonus)
        return LaneChangeOutcome(state=state, reward=reward, collided=collided,
                                 done=state.done)

    def encode(self, state: LaneChangeState) -> np.ndarray:
        cfg = self.cfg
        return np.array(
            [
                state.lane / (cfg.n_lanes - 1),
                state.ego_speed / cfg.v_max,
                state.gaps[0] / cfg.gap_max,
                state.speeds[0] / cfg.v_max,
                state.gaps[1] / cfg.gap_max,
                state.speeds[1] / cfg.v_max,
            ],
            dtype=np.float64,
        )

    # -- rewind ---------------------------------------------------------

    def snapshot(self, state: LaneChangeState) -> LaneChangeSnapshot:
        return LaneChangeSnapshot(
            fingerprint=self.cfg.fingerprint(),
            payload={
                "lane": state.lane,
                "ego_speed": state.ego_speed,
                "gaps": state.gaps.copy(),
                "speeds": state.speeds.copy(),
                "round": state.round,
                "done": state.done,
                "rng_state": state.rng.bit_generator.state,
            },
        )

    def restore(self, snap: LaneChangeSnapshot) -> LaneChangeState:
        if snap.fingerprint != self.cfg.fingerprint():
            raise IncompatibleSnapshotError("lane-change snapshot config mismatch")
        p = snap.payload
        rng = np.random.default_rng(0)
        rng.bit_generator.state = p["rng_state"]
        return LaneChangeState(
            lane=p["lane"],
            ego_speed=p["ego_speed"],
            gaps=p["gaps"].copy(),
            speeds=p["speeds"].copy(),
            round=p["round"],
            done=p["done"],
            rng=rng,
        )

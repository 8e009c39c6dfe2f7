"""Rewindable four-way intersection microsimulator.

Single lane per movement, point-queue car following with bounded
acceleration and comfortable-braking gap keeping.  One decision step =
``substeps_per_step`` physics substeps of ``dt`` seconds; changing the
active phase inserts an all-red clearance at the start of the step.

Collisions are generated only by the modeled crossing conflict (permitted
left vs. opposing through): whenever such a pair occupies the junction at
the same time under a permitted-style phase, the pair collides with
probability ``p_ignore``, drawn exactly once per (left vehicle, through
vehicle) encounter.  Collided vehicles freeze for ``stoptime_substeps`` and
are then teleported out of the network.

Everything that evolves lives in :class:`SimState`, which is value-copyable:
``snapshot`` / ``restore`` give bit-exact rewind (arrival schedule cursor and
collision-lottery RNG state included), which is what makes counterfactual
replay possible.  The engine itself (:class:`IntersectionSim`) is stateless
apart from the immutable config; instances are not thread-safe and are meant
to be used from a single thread.
"""

from __future__ import annotations

import copy
import csv
import math
import pickle
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import (
    EpisodeFinishedError,
    IncompatibleSnapshotError,
    InvalidActionError,
    SnapshotFormatError,
)
from .config import (
    APPROACHES,
    N_MOVEMENTS,
    PERMITTED,
    STOP,
    ScenarioConfig,
    movement_approach,
    movement_turn,
)

_SNAP_MAGIC = b"CFSS"
_SNAP_VERSION = 1

# vehicle zones
APPROACH = 0
JUNCTION = 1
COLLIDED = 2


@dataclass
class Vehicle:
    vid: int
    movement: int
    lane_pos: float       # position of the vehicle front along its approach lane
    speed: float
    vmax: float
    zone: int = APPROACH
    junction_pos: float = 0.0
    hold_remaining: int = 0

    @property
    def state(self) -> str:
        if self.zone == COLLIDED:
            return "collided"
        if self.zone == JUNCTION:
            return "in-junction"
        return "waiting" if self.speed < 0.1 else "flowing"


@dataclass
class RewardVec:
    """Two-component step reward: ``safe`` counts collision transitions
    (negated), ``effe`` is the negated, scaled waiting-time increment."""

    safe: float
    effe: float

    def as_array(self) -> np.ndarray:
        return np.array([self.safe, self.effe], dtype=np.float64)


@dataclass
class MetricsAccumulator:
    """Episode counters.  Waiting time is accumulated as an integer number
    of (vehicle, substep) events so that repeated runs agree bit for bit."""

    spawned: int = 0
    throughput: int = 0
    collision_count: int = 0
    collided_departed: int = 0
    wait_substeps: int = 0
    dt: float = 0.5

    @property
    def total_wait_time(self) -> float:
        return self.wait_substeps * self.dt

    @property
    def avg_delay(self) -> float:
        """Mean accumulated waiting per vehicle that entered the network."""
        return self.total_wait_time / max(1, self.spawned)

    def in_network(self, state: "SimState") -> int:
        return len(state.vehicles)

    def conserved(self, state: "SimState") -> bool:
        return self.spawned == self.throughput + self.collided_departed + len(state.vehicles)


@dataclass
class SimState:
    clock: int                      # decision steps taken
    time_s: float
    active_phase: int
    vehicles: list
    arrivals: tuple                 # ((time_s, movement, vmax), ...) pre-generated
    cursor: int                     # next arrival not yet released
    pending: dict                   # movement -> [arrival index, ...] awaiting lane space
    rng: np.random.Generator        # collision-lottery stream (and nothing else)
    stats: MetricsAccumulator
    resolved_pairs: set = field(default_factory=set)
    next_vid: int = 0


@dataclass
class StepOutcome:
    state: SimState
    reward: RewardVec
    collisions: int      # vehicle transitions into `collided` during the step
    departed: int        # normal route completions during the step
    wait_increment_s: float


@dataclass
class Snapshot:
    fingerprint: str
    payload: dict


class IntersectionSim:
    """Engine bound to one validated :class:`ScenarioConfig`."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg.validate()
        self._geometry()

    # ------------------------------------------------------------------
    # geometry (positions only matter for the grid encoding)
    # ------------------------------------------------------------------

    def _geometry(self) -> None:
        cfg = self.cfg
        c = cfg.world_size / 2.0
        hj = cfg.junction_len / 2.0
        # driving direction and driver's-right unit vector per approach
        dirs = {"N": (0.0, -1.0), "S": (0.0, 1.0), "E": (-1.0, 0.0), "W": (1.0, 0.0)}
        offsets = {"left": 0.5 * cfg.lane_width, "through": 1.5 * cfg.lane_width,
                   "right": 2.5 * cfg.lane_width}
        side_center = {
            "N": (c, c + hj), "S": (c, c - hj), "E": (c + hj, c), "W": (c - hj, c),
        }
        exit_shift = {"through": 2, "left": 1, "right": 3}
        self._entry = {}
        self._exit = {}
        self._path_len = {}
        self._dir = {}
        self._right = {}
        for m in range(N_MOVEMENTS):
            a = movement_approach(m)
            t = movement_turn(m)
            dx, dy = dirs[a]
            rx, ry = dy, -dx  # rotate -90 degrees
            off = offsets[t]
            sx, sy = side_center[a]
            entry = (sx + rx * off, sy + ry * off)
            exit_side = APPROACHES[(APPROACHES.index(a) + exit_shift[t]) % 4]
            exit_pt = side_center[exit_side]
            self._entry[m] = entry
            self._exit[m] = exit_pt
            self._path_len[m] = max(
                math.hypot(exit_pt[0] - entry[0], exit_pt[1] - entry[1]), cfg.veh_len
            )
            self._dir[m] = (dx, dy)
            self._right[m] = (rx, ry)

    def vehicle_xy(self, veh: Vehicle) -> tuple[float, float]:
        m = veh.movement
        ex, ey = self._entry[m]
        if veh.zone == APPROACH:
            dx, dy = self._dir[m]
            back = self.cfg.approach_len - veh.lane_pos
            return (ex - dx * back, ey - dy * back)
        frac = min(veh.junction_pos / self._path_len[m], 1.0)
        xx, xy_ = self._exit[m]
        return (ex + (xx - ex) * frac, ey + (xy_ - ey) * frac)

    # ------------------------------------------------------------------
    # episode construction
    # ------------------------------------------------------------------

    def _generate_arrivals(self, rng: np.random.Generator) -> tuple:
        cfg = self.cfg
        if cfg.fixed_arrivals is not None:
            return tuple(tuple(a) for a in cfg.fixed_arrivals)
        horizon = min(cfg.horizon_s, cfg.max_steps * cfg.step_seconds + cfg.dt)
        segments = sorted(cfg.flow, key=lambda s: s.start_s)
        out = []
        shares = np.array(cfg.turn_shares, dtype=np.float64)
        for ai, approach in enumerate(APPROACHES):
            t = 0.0
            seg_idx = 0
            while t < horizon:
                while seg_idx + 1 < len(segments) and segments[seg_idx + 1].start_s <= t:
                    seg_idx += 1
                rate = segments[seg_idx].rates[ai]
                if rate <= 0.0:
                    # jump to the next segment with flow (or finish)
                    nxt = next((s.start_s for s in segments[seg_idx + 1:]
                                if s.start_s > t), None)
                    if nxt is None:
                        break
                    t = nxt
                    continue
                t += rng.exponential(1.0 / rate)
                if t >= horizon:
                    break
                turn = int(rng.choice(3, p=shares))
                vmax = cfg.v_max * float(np.clip(1.0 + cfg.speed_dev * rng.standard_normal(),
                                                 0.6, 1.4))
                out.append((t, ai * 3 + turn, vmax))
        out.sort(key=lambda a: (a[0], a[1]))
        return tuple(out)

    def new_episode(self, seed: int) -> SimState:
        ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 63) - 1), spawn_key=(17,))
        arrival_rng, lottery_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
        arrivals = self._generate_arrivals(arrival_rng)
        return SimState(
            clock=0,
            time_s=0.0,
            active_phase=0,
            vehicles=[],
            arrivals=arrivals,
            cursor=0,
            pending={m: [] for m in range(N_MOVEMENTS)},
            rng=lottery_rng,
            stats=MetricsAccumulator(dt=self.cfg.dt),
        )

    # ------------------------------------------------------------------
    # stepping
    # ------------------------------------------------------------------

    def step(self, state: SimState, action: int) -> StepOutcome:
        """Advance one decision interval.  Mutates ``state`` and returns it
        inside the outcome; callers needing the pre-step state must snapshot
        first."""
        cfg = self.cfg
        if not isinstance(action, (int, np.integer)) or not 0 <= int(action) < cfg.n_actions:
            raise InvalidActionError(
                f"phase id {action!r} outside 0..{cfg.n_actions - 1}"
            )
        if state.clock >= cfg.max_steps:
            raise EpisodeFinishedError(
                f"episode already finished at clock {state.clock} (max_steps={cfg.max_steps})"
            )
        action = int(action)
        phase_changed = action != state.active_phase
        state.active_phase = action
        phase = cfg.phases[action]

        collisions = 0
        departed = 0
        wait_substeps = 0
        for k in range(cfg.substeps_per_step):
            all_red = phase_changed and k < cfg.all_red_substeps
            c, d, w = self._substep(state, phase, all_red)
            collisions += c
            departed += d
            wait_substeps += w
        state.clock += 1

        wait_increment_s = wait_substeps * cfg.dt
        reward = RewardVec(safe=-float(collisions),
                           effe=-wait_increment_s * cfg.effe_scale)
        return StepOutcome(state=state, reward=reward, collisions=collisions,
                           departed=departed, wait_increment_s=wait_increment_s)

    def _substep(self, state: SimState, phase, all_red: bool) -> tuple[int, int, int]:
        cfg = self.cfg
        L = cfg.approach_len
        dt = cfg.dt
        collisions = 0
        departed = 0

        # 1. release scheduled arrivals whose time has come
        arrivals = state.arrivals
        while state.cursor < len(arrivals) and arrivals[state.cursor][0] <= state.time_s:
            _, m, vmax = arrivals[state.cursor]
            state.pending[m].append(state.cursor)
            state.cursor += 1

        # bucket live vehicles per movement
        buckets: list[list[Vehicle]] = [[] for _ in range(N_MOVEMENTS)]
        junction_by_move: list[list[Vehicle]] = [[] for _ in range(N_MOVEMENTS)]
        wreck_on_move = [False] * N_MOVEMENTS
        for veh in state.vehicles:
            if veh.zone == APPROACH:
                buckets[veh.movement].append(veh)
            elif veh.zone == JUNCTION:
                junction_by_move[veh.movement].append(veh)
            else:
                wreck_on_move[veh.movement] = True

        # 2. inject pending spawns where the lane head is clear
        entry_clear_pos = 2.0 * cfg.veh_len + cfg.min_gap
        for m in range(N_MOVEMENTS):
            queue = state.pending[m]
            while queue:
                bucket = buckets[m]
                tail = min((v.lane_pos for v in bucket), default=math.inf)
                if tail < entry_clear_pos:
                    break
                idx = queue.pop(0)
                _, _, vmax = arrivals[idx]
                gap_avail = tail - 2.0 * cfg.veh_len - cfg.min_gap
                v0 = min(vmax, math.sqrt(max(2.0 * cfg.decel * gap_avail, 0.0)))
                veh = Vehicle(vid=state.next_vid, movement=m, lane_pos=cfg.veh_len,
                              speed=v0, vmax=vmax)
                state.next_vid += 1
                state.vehicles.append(veh)
                bucket.append(veh)
                state.stats.spawned += 1

        # 3. advance junction occupants; complete routes
        for veh in list(state.vehicles):
            if veh.zone == JUNCTION:
                veh.speed = min(veh.speed + cfg.accel * dt, veh.vmax)
                veh.junction_pos += veh.speed * dt
                if veh.junction_pos >= self._path_len[veh.movement]:
                    state.vehicles.remove(veh)
                    junction_by_move[veh.movement].remove(veh)
                    state.stats.throughput += 1
                    departed += 1
            elif veh.zone == COLLIDED:
                veh.hold_remaining -= 1
                if veh.hold_remaining <= 0:
                    state.vehicles.remove(veh)
                    state.stats.collided_departed += 1

        # 4. approach dynamics, leader first
        for m in range(N_MOVEMENTS):
            bucket = buckets[m]
            if not bucket:
                continue
            bucket.sort(key=lambda v: -v.lane_pos)
            perm = STOP if all_red else phase.perms[m]
            go = perm != STOP
            occupants = junction_by_move[m]
            entry_ok = (
                go
                and not wreck_on_move[m]
                and all(o.junction_pos >= cfg.veh_len + cfg.min_gap for o in occupants)
            )
            prev = None
            for veh in bucket:
                if prev is None:
                    avail = math.inf if entry_ok else max(L - veh.lane_pos, 0.0)
                else:
                    avail = max(prev.lane_pos - cfg.veh_len - cfg.min_gap - veh.lane_pos, 0.0)
                v_allow = math.sqrt(2.0 * cfg.decel * avail) if avail < math.inf else math.inf
                v_new = min(veh.speed + cfg.accel * dt, veh.vmax, v_allow)
                move = v_new * dt
                if move > avail:
                    move = avail
                    v_new = move / dt
                veh.lane_pos += move
                veh.speed = v_new
                if prev is None and entry_ok and veh.lane_pos >= L:
                    veh.zone = JUNCTION
                    veh.junction_pos = veh.lane_pos - L
                    junction_by_move[m].append(veh)
                    entry_ok = False  # one entry per movement per substep
                prev = veh

        # 5. conflict lottery (only under a live permitted-style phase)
        if not all_red and phase.kind == PERMITTED:
            for left_m, thr_m in phase.conflict_pairs():
                lefts = [v for v in junction_by_move[left_m] if v.zone == JUNCTION]
                thrs = [v for v in junction_by_move[thr_m] if v.zone == JUNCTION]
                for lv in lefts:
                    if lv.zone != JUNCTION:
                        continue
                    for tv in thrs:
                        if tv.zone != JUNCTION:
                            continue
                        key = (lv.vid, tv.vid)
                        if key in state.resolved_pairs:
                            continue
                        state.resolved_pairs.add(key)
                        if state.rng.random() < cfg.p_ignore:
                            for wreck in (lv, tv):
                                if wreck.zone == JUNCTION:
                                    wreck.zone = COLLIDED
                                    wreck.speed = 0.0
                                    wreck.hold_remaining = cfg.stoptime_substeps
                                    collisions += 1

        state.stats.collision_count += collisions

        # 6. waiting bookkeeping
        waiting = sum(
            1 for v in state.vehicles if v.zone == APPROACH and v.speed < cfg.waiting_speed
        )
        state.stats.wait_substeps += waiting
        state.time_s += dt
        return collisions, departed, waiting

    # ------------------------------------------------------------------
    # rewind support
    # ------------------------------------------------------------------

    def snapshot(self, state: SimState) -> Snapshot:
        payload = {
            "clock": state.clock,
            "time_s": state.time_s,
            "active_phase": state.active_phase,
            "vehicles": [copy.copy(v) for v in state.vehicles],
            "arrivals": state.arrivals,
            "cursor": state.cursor,
            "pending": {m: list(q) for m, q in state.pending.items()},
            "rng_state": state.rng.bit_generator.state,
            "stats": replace(state.stats),
            "resolved_pairs": set(state.resolved_pairs),
            "next_vid": state.next_vid,
        }
        return Snapshot(fingerprint=self.cfg.fingerprint(), payload=payload)

    def restore(self, snap: Snapshot) -> SimState:
        if snap.fingerprint != self.cfg.fingerprint():
            raise IncompatibleSnapshotError(
                "snapshot was taken under a structurally different scenario config"
            )
        p = snap.payload
        rng = np.random.default_rng(0)
        rng.bit_generator.state = p["rng_state"]
        return SimState(
            clock=p["clock"],
            time_s=p["time_s"],
            active_phase=p["active_phase"],
            vehicles=[copy.copy(v) for v in p["vehicles"]],
            arrivals=p["arrivals"],
            cursor=p["cursor"],
            pending={m: list(q) for m, q in p["pending"].items()},
            rng=rng,
            stats=replace(p["stats"]),
            resolved_pairs=set(p["resolved_pairs"]),
            next_vid=p["next_vid"],
        )


# ---------------------------------------------------------------------------
# snapshot wire format: magic | u16 version | u64 length | pickled payload
# ---------------------------------------------------------------------------

def serialize_snapshot(snap: Snapshot) -> bytes:
    body = pickle.dumps({"fingerprint": snap.fingerprint, "payload": snap.payload},
                        protocol=4)
    return _SNAP_MAGIC + struct.pack("<HQ", _SNAP_VERSION, len(body)) + body


def deserialize_snapshot(blob: bytes) -> Snapshot:
    if len(blob) < 14 or blob[:4] != _SNAP_MAGIC:
        raise SnapshotFormatError("not a snapshot blob (bad magic)")
    version, length = struct.unpack_from("<HQ", blob, 4)
    if version != _SNAP_VERSION:
        raise SnapshotFormatError(f"snapshot version {version} unsupported")
    if len(blob) != 14 + length:
        raise SnapshotFormatError("snapshot length prefix does not match payload")
    d = pickle.loads(blob[14:])
    return Snapshot(fingerprint=d["fingerprint"], payload=d["payload"])


def write_trace_csv(path, rows) -> None:
    """rows: iterable of (step, action, collisions, wait_increment, departed)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "action", "collisions", "wait_increment", "departed"])
        for step, action, coll, wait_inc, dep in rows:
            w.writerow([step, action, coll, f"{wait_inc:.6f}", dep])

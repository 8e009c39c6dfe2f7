"""Scenario description for the four-way intersection microsimulator.

The intersection has four approaches (N, E, S, W), each with three movement
lanes: through, left and right.  A signal phase assigns one of three
permissions to every movement:

* ``protected`` -- go, with no crossing movement released at the same time;
* ``permitted`` -- go, but a crossing movement may be released too (a left
  turn facing the opposing through);
* ``stop``      -- red.

The only modeled crossing conflict is the classic one: a left turn crosses
the path of the opposing through movement.  A phase whose released movements
contain no such pair is *protected-style*; otherwise it is *permitted-style*.
Permitted-style phases move more traffic per cycle but expose the crossing
pair to a per-encounter collision lottery (probability ``p_ignore``, the
rate at which drivers ignore a junction foe).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from ..errors import ConfigError

APPROACHES = ("N", "E", "S", "W")
TURNS = ("through", "left", "right")
N_MOVEMENTS = 12

PROTECTED = "protected"
PERMITTED = "permitted"
STOP = "stop"
_PERMS = (PROTECTED, PERMITTED, STOP)

_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}


def movement_id(approach: str, turn: str) -> int:
    return APPROACHES.index(approach) * 3 + TURNS.index(turn)


def movement_label(m: int) -> str:
    return f"{TURNS[m % 3]}-{APPROACHES[m // 3]}"


def movement_approach(m: int) -> str:
    return APPROACHES[m // 3]


def movement_turn(m: int) -> str:
    return TURNS[m % 3]


def opposing_through(m: int) -> int:
    """The through movement crossed by left-turn movement ``m``."""
    return movement_id(_OPPOSITE[movement_approach(m)], "through")


@dataclass(frozen=True)
class SignalPhase:
    """One entry of the action space.

    ``perms`` maps movement id -> permission string.  ``kind`` is the
    declared style and is cross-checked against the derived conflict set at
    config validation time.
    """

    phase_id: int
    kind: str
    perms: tuple[str, ...]
    label: str = ""

    def conflict_pairs(self) -> tuple[tuple[int, int], ...]:
        """(left_movement, opposing_through_movement) pairs both released."""
        pairs = []
        for m in range(N_MOVEMENTS):
            if movement_turn(m) != "left" or self.perms[m] == STOP:
                continue
            thr = opposing_through(m)
            if self.perms[thr] != STOP:
                pairs.append((m, thr))
        return tuple(pairs)

    def released(self) -> tuple[int, ...]:
        return tuple(m for m in range(N_MOVEMENTS) if self.perms[m] != STOP)


def _phase(pid: int, kind: str, label: str, released: dict[str, str]) -> SignalPhase:
    """released: {"through-N": "protected", ...} (everything else stops)."""
    perms = [STOP] * N_MOVEMENTS
    for name, perm in released.items():
        turn, approach = name.split("-")
        perms[movement_id(approach, turn)] = perm
    return SignalPhase(pid, kind, tuple(perms), label)


def default_phases() -> tuple[SignalPhase, ...]:
    """Eight phases: four protected-style, four permitted-style.

    0  NS through (+ rights)          protected
    1  EW through (+ rights)          protected
    2  NS left                        protected
    3  EW left                        protected
    4  NS through + both NS lefts     permitted (two conflict pairs)
    5  EW through + both EW lefts     permitted
    6  NS through + north left only   permitted (single conflict pair)
    7  EW through + east left only    permitted
    """
    p = PROTECTED
    g = PERMITTED
    return (
        _phase(0, PROTECTED, "NS-through", {
            "through-N": p, "through-S": p, "right-N": p, "right-S": p}),
        _phase(1, PROTECTED, "EW-through", {
            "through-E": p, "through-W": p, "right-E": p, "right-W": p}),
        _phase(2, PROTECTED, "NS-left", {"left-N": p, "left-S": p}),
        _phase(3, PROTECTED, "EW-left", {"left-E": p, "left-W": p}),
        _phase(4, PERMITTED, "NS-permitted", {
            "through-N": p, "through-S": p, "right-N": p, "right-S": p,
            "left-N": g, "left-S": g}),
        _phase(5, PERMITTED, "EW-permitted", {
            "through-E": p, "through-W": p, "right-E": p, "right-W": p,
            "left-E": g, "left-W": g}),
        _phase(6, PERMITTED, "NS-permitted-nleft", {
            "through-N": p, "through-S": p, "right-N": p, "right-S": p,
            "left-N": g}),
        _phase(7, PERMITTED, "EW-permitted-eleft", {
            "through-E": p, "through-W": p, "right-E": p, "right-W": p,
            "left-E": g}),
    )


@dataclass(frozen=True)
class FlowSegment:
    """Arrival rates (vehicles/second per approach) from ``start_s`` onward."""

    start_s: float
    rates: tuple[float, float, float, float]  # N, E, S, W


@dataclass(frozen=True)
class ScenarioConfig:
    # geometry (meters)
    approach_len: float = 94.0
    junction_len: float = 12.0
    lane_width: float = 4.0

    # vehicle kinematics
    v_max: float = 13.89          # nominal free speed, m/s
    accel: float = 2.6            # m/s^2
    decel: float = 4.5            # comfortable braking, m/s^2
    veh_len: float = 4.3          # m
    min_gap: float = 1.0          # m, standstill gap to the leader
    speed_dev: float = 0.1        # per-vehicle free-speed jitter (lognormal-ish clamp)

    # signal timing
    dt: float = 0.5               # physics substep, seconds
    substeps_per_step: int = 10   # one decision every 5 s
    all_red_substeps: int = 4     # 2 s clearance inserted on phase change

    # collision model
    p_ignore: float = 0.4         # per conflicting pair, per co-occupancy event
    stoptime_substeps: int = 2    # wreck holds position 1 s, then is teleported away

    # demand
    flow: tuple[FlowSegment, ...] = (
        FlowSegment(0.0, (0.11, 0.09, 0.11, 0.09)),
        FlowSegment(150.0, (0.16, 0.11, 0.16, 0.11)),
        FlowSegment(300.0, (0.10, 0.10, 0.10, 0.10)),
    )
    turn_shares: tuple[float, float, float] = (0.55, 0.30, 0.15)  # through/left/right
    horizon_s: float = 3600.0     # arrivals pre-generated up to this episode time
    fixed_arrivals: tuple | None = None  # ((time_s, movement_id, vmax), ...) override

    # episode / observation
    max_steps: int = 720
    grid_resolution: int = 60
    eps_occ: float = 0.01         # occupancy floor for a stopped vehicle's cell
    waiting_speed: float = 0.1    # below this, an approach vehicle counts as waiting
    effe_scale: float = 0.02      # efficiency reward = -wait_increment_s * effe_scale

    phases: tuple[SignalPhase, ...] = field(default_factory=default_phases)

    # ---------------------------------------------------------------

    @property
    def n_actions(self) -> int:
        return len(self.phases)

    @property
    def world_size(self) -> float:
        return 2.0 * self.approach_len + self.junction_len

    @property
    def step_seconds(self) -> float:
        return self.dt * self.substeps_per_step

    def protected_phase_ids(self) -> tuple[int, ...]:
        return tuple(ph.phase_id for ph in self.phases if ph.kind == PROTECTED)

    def permitted_phase_ids(self) -> tuple[int, ...]:
        return tuple(ph.phase_id for ph in self.phases if ph.kind == PERMITTED)

    def validate(self) -> "ScenarioConfig":
        if not self.phases:
            raise ConfigError("at least one signal phase is required")
        for i, ph in enumerate(self.phases):
            if ph.phase_id != i:
                raise ConfigError(f"phase ids must be 0..n-1 in order (got {ph.phase_id} at {i})")
            if len(ph.perms) != N_MOVEMENTS:
                raise ConfigError(f"phase {i} has {len(ph.perms)} permissions, want {N_MOVEMENTS}")
            for perm in ph.perms:
                if perm not in _PERMS:
                    raise ConfigError(f"phase {i}: unknown permission {perm!r}")
            pairs = ph.conflict_pairs()
            if ph.kind == PROTECTED and pairs:
                raise ConfigError(
                    f"phase {i} declared protected but releases crossing pair(s) "
                    f"{[tuple(map(movement_label, p)) for p in pairs]}"
                )
            if ph.kind == PERMITTED and not pairs:
                raise ConfigError(f"phase {i} declared permitted but has no crossing pair")
            if ph.kind not in (PROTECTED, PERMITTED):
                raise ConfigError(f"phase {i}: unknown kind {ph.kind!r}")
        if not 0.0 <= self.p_ignore <= 1.0:
            raise ConfigError("p_ignore must be in [0, 1]")
        if self.all_red_substeps >= self.substeps_per_step:
            raise ConfigError("all-red clearance must be shorter than the decision interval")
        for name in ("approach_len", "junction_len", "v_max", "accel", "decel",
                     "veh_len", "dt", "effe_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if abs(sum(self.turn_shares) - 1.0) > 1e-9:
            raise ConfigError("turn_shares must sum to 1")
        if self.grid_resolution < 2:
            raise ConfigError("grid_resolution must be at least 2")
        return self

    # -- structural identity (snapshot compatibility) ------------------

    def fingerprint(self) -> str:
        """Hash of the fields that shape state/actions; snapshots embed it."""
        core = {
            "approach_len": self.approach_len,
            "junction_len": self.junction_len,
            "dt": self.dt,
            "substeps_per_step": self.substeps_per_step,
            "grid_resolution": self.grid_resolution,
            "phases": [[ph.kind, list(ph.perms)] for ph in self.phases],
        }
        blob = json.dumps(core, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- (de)serialization ---------------------------------------------

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        d = json.loads(text)
        if "phases" in d:
            d["phases"] = tuple(
                SignalPhase(p["phase_id"], p["kind"], tuple(p["perms"]), p.get("label", ""))
                for p in d["phases"]
            )
        if "flow" in d:
            d["flow"] = tuple(FlowSegment(s["start_s"], tuple(s["rates"])) for s in d["flow"])
        if "turn_shares" in d:
            d["turn_shares"] = tuple(d["turn_shares"])
        if d.get("fixed_arrivals") is not None:
            d["fixed_arrivals"] = tuple(tuple(a) for a in d["fixed_arrivals"])
        return cls(**d).validate()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw).validate()


def desk_config(**overrides) -> ScenarioConfig:
    """Small-grid configuration used by tests and quick experiments."""
    base = dict(grid_resolution=20, max_steps=80)
    base.update(overrides)
    return ScenarioConfig(**base).validate()


def conflict_trial_config(**overrides) -> ScenarioConfig:
    """Two hand-placed vehicles on a crossing pair under a permitted phase.

    One southbound through (from N) and one opposing left (from S) start at
    the same instant; whichever phase releases both (phase 4 in the default
    set) exposes exactly one conflict lottery.  Used for calibrating the
    collision probability and for the monotonicity check.
    """
    base = dict(
        approach_len=30.0,
        grid_resolution=20,
        max_steps=40,
        fixed_arrivals=(
            (0.0, movement_id("N", "through"), 13.89),
            (0.0, movement_id("S", "left"), 13.89),
        ),
        flow=(FlowSegment(0.0, (0.0, 0.0, 0.0, 0.0)),),
    )
    base.update(overrides)
    return ScenarioConfig(**base).validate()

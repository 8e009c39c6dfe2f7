from .config import (
    APPROACHES,
    N_MOVEMENTS,
    PERMITTED,
    PROTECTED,
    STOP,
    FlowSegment,
    ScenarioConfig,
    SignalPhase,
    conflict_trial_config,
    default_phases,
    desk_config,
    movement_approach,
    movement_id,
    movement_label,
    movement_turn,
    opposing_through,
)
from .grid import add_grid_noise, encode_grid
from .intersection import (
    IntersectionSim,
    MetricsAccumulator,
    RewardVec,
    SimState,
    Snapshot,
    StepOutcome,
    Vehicle,
    deserialize_snapshot,
    serialize_snapshot,
    write_trace_csv,
)
from .lanechange import (
    CHANGE,
    STAY,
    LaneChangeConfig,
    LaneChangeOutcome,
    LaneChangeSim,
    LaneChangeState,
)

__all__ = [name for name in dir() if not name.startswith("_")]

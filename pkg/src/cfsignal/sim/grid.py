"""Grid observation: normalized-speed occupancy image of the intersection.

Each live vehicle is quantized onto one cell of a ``res x res`` grid covering
the square world; the cell value is the vehicle's speed divided by the
nominal free speed, floored at ``eps_occ`` so a stopped vehicle still marks
its cell, and capped at 1.  When several vehicles fall into one cell the
maximum wins.
"""

from __future__ import annotations

import numpy as np

from .intersection import IntersectionSim, SimState


def encode_grid(sim: IntersectionSim, state: SimState) -> np.ndarray:
    cfg = sim.cfg
    res = cfg.grid_resolution
    world = cfg.world_size
    cells = np.zeros((res, res), dtype=np.float64)
    for veh in state.vehicles:
        x, y = sim.vehicle_xy(veh)
        ix = min(max(int(x / world * res), 0), res - 1)
        iy = min(max(int(y / world * res), 0), res - 1)
        val = max(min(veh.speed / cfg.v_max, 1.0), cfg.eps_occ)
        if val > cells[ix, iy]:
            cells[ix, iy] = val
    return cells


def add_grid_noise(grid: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Observation corruption used by the robustness experiment: additive
    zero-mean gaussian per cell, clamped back into [0, 1].  ``scale == 0``
    returns the input untouched (no RNG consumption)."""
    if scale <= 0.0:
        return grid
    return np.clip(grid + rng.normal(0.0, scale, size=grid.shape), 0.0, 1.0)

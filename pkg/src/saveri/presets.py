"""Named benchmark configurations.

These are the desk-scale counterparts of the paper-scale experiments:
a goal-driven cart-pole task without disturbances where safety is a
deterministic function of the commanded target (planning-phase accuracy),
a disturbed cart-pole task for receding-horizon triggering, and a disturbed
point-mass task with a deliberately large reality gap for online
adaptation studies.
"""

from __future__ import annotations

import copy

from .config import default_config, merge_config

_PRESETS: dict[str, dict] = {
    # Planning-phase accuracy benchmark: failures are caused purely by
    # aggressive targets, so outcomes are predictable from the episode start.
    "cartpole-accuracy": {
        "system": {
            "name": "cart-pole",
            "params": {
                "u_max": 40.0,
                "goal_range": 4.5,
                "safe_x": 6.0,
                "safe_angle": 0.15,
            },
        },
        "data": {"stride": 15},
        "run": {"threshold": 0.5},
    },
    # Receding-horizon trigger benchmark: random angular-velocity kicks during
    # moderate moves, leaving a visible delay between kick and violation.
    "cartpole-trigger": {
        "system": {
            "name": "cart-pole",
            "params": {
                "u_max": 40.0,
                "goal_range": 2.0,
                "safe_x": 6.0,
                "safe_angle": 0.15,
                "disturbance": {"prob": 0.05, "mag": 1.3},
                "init_offset": True,
            },
        },
        "data": {"stride": 5},
        "embedding": {"perplexity": 40.0},
    },
    # Sim-to-real benchmark: the real point-mass is twice as heavy with added
    # velocity friction and measurement noise, so the nominal prior is
    # miscalibrated until feedback corrects it.
    "pointmass-gap": {
        "system": {
            "name": "point-mass",
            "params": {
                "goal_range": 0.8,
                "disturbance": {"prob": 0.10, "mag": 3.0},
                "init_offset": True,
                "gap_mass_factor": 1.0,
                "gap_friction": 1.0,
            },
        },
        "data": {"stride": 8},
    },
}


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def preset_config(name: str) -> dict:
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {preset_names()}")
    return merge_config(default_config(), copy.deepcopy(_PRESETS[name]))

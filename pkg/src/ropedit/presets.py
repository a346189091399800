"""Named parameter presets.

``flux`` records the published FLUX.1-dev settings (57 blocks, 19 of them
multi-stream); its layer sets cannot be used with the toy model, but they
are kept loadable so runs can echo and compare against them. ``toy`` holds
the same settings scaled to the default toy model.
"""

from __future__ import annotations

import copy

from .mmdit import ModelConfig
from .probe import LayerSets

FLUX_P = (1, 2, 4, 26, 30, 54, 55)
FLUX_C = (0, 7, 8, 9, 10, 18, 25, 28, 37, 42, 45, 50, 56)
FLUX_LAYERS = 57
FLUX_MULTI = 19

P_FRAC = 7 / 57
C_FRAC = 13 / 57

_FLUX = {
    "steps_T": 50,
    "guidance_scale": 3.5,
    "threshold": 0.3,
    "R": 7,
    "B": 45,
    "manipulations": ["remove", "shift(0,20)", "shift(10,10)", "shift(64,0)"],
    "layer_sets": {"P": list(FLUX_P), "C": list(FLUX_C), "L": list(range(FLUX_LAYERS))},
    "n_layers": FLUX_LAYERS,
    "n_multi": FLUX_MULTI,
    "probe_prompts": 50,
    "probe_seeds": 5,
    "p_frac": P_FRAC,
    "c_frac": C_FRAC,
}


def _toy():
    cfg = ModelConfig()
    return {
        "steps_T": cfg.steps_T,
        "guidance_scale": cfg.guidance_scale,
        "threshold": 0.3,
        "R": 7,
        "B": 45,
        "manipulations": ["remove", "shift(0,20)", "shift(10,10)", f"shift({cfg.grid_h},0)"],
        "layer_sets": None,  # comes from a probe run
        "n_layers": cfg.n_layers,
        "n_multi": cfg.n_multi,
        "probe_prompts": 5,
        "probe_seeds": 2,
        "p_frac": P_FRAC,
        "c_frac": C_FRAC,
    }


PRESETS = {"flux": _FLUX, "toy": _toy()}


def get_preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def flux_layer_sets() -> LayerSets:
    return LayerSets.from_dict(_FLUX["layer_sets"])

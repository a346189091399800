"""RoPE-based multimodal diffusion transformer toolkit: probing and editing."""

from .editing import (
    InjectionRule,
    KVFull,
    KVMasked,
    Move,
    Paste,
    VMapped,
    VMasked,
    edit_background,
    edit_move,
    edit_non_rigid,
    edit_object_addition,
    edit_outpaint,
    map_values,
    paste_values,
    run_paired,
)
from .errors import (
    ConfigError,
    DimensionError,
    EmptyMaskError,
    InjectionError,
    InputError,
    ReasoningError,
)
from .mmdit import ModelConfig, decode, encode_prompt, euler_invert, euler_sample, init_model, velocity
from .probe import LayerSets, ProbeSpec, classify_layers, psnr, run_probe
from .rope import KEEP, REMOVE, Manipulation, apply_rope, build_table, grid_positions, shift

__version__ = "0.1.0"

"""Paired source/edit generation with per-layer key/value injection.

Both streams advance in lockstep. At each timestep the source stream runs
first and its image-token keys/values are recorded for every layer a rule
covers; the edit stream then runs with those layers' keys/values replaced
according to the rule mode:

    KVFull         attn(Q_edit, K_src, V_src)
    KVMasked(M)    keys and values taken from edit where M, from src elsewhere
    VMasked(M)     attn(Q_edit, K_edit, V) with V from src where M, edit elsewhere
    VMapped(map)   attn(Q_edit, K_edit, MAP/PASTE(V_edit, V_src))

Text tokens and queries are never substituted, and the source stream is
never perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyMaskError, InjectionError, ReasoningError
from .masks import (
    DEFAULT_THRESHOLD,
    IdentityRefiner,
    MaskRefiner,
    binarize,
    extract_token_heatmap,
    largest_component,
    refine_checked,
    sample_foreground_points,
)
from .mmdit import (
    Model,
    NOISE_STREAM,
    PromptEmbedding,
    decode,
    euler_step,
    initial_noise,
    token_index,
    velocity,
)
from .numerics import SeededRng, sample_gaussian

POINTS_STREAM = 7


# ------------------------------------------------------------------ value maps


@dataclass(frozen=True, eq=False)
class Move:
    offset: tuple  # (dr, dc)
    object_mask: np.ndarray  # (h, w) bool, source object cells


@dataclass(frozen=True)
class Paste:
    offset: tuple  # top-left (row, col) in the edit grid
    src_size: tuple  # (h, w) of the source grid


def _move_targets(move: Move):
    h, w = move.object_mask.shape
    src = np.argwhere(move.object_mask)
    dst = src + np.asarray(move.offset, dtype=np.int64)
    if len(dst) and (dst.min() < 0 or dst[:, 0].max() >= h or dst[:, 1].max() >= w):
        raise ConfigError(f"move offset {tuple(move.offset)} pushes the object outside the {h}x{w} grid")
    return src[:, 0] * w + src[:, 1], dst[:, 0] * w + dst[:, 1]


def map_values(v_edit: np.ndarray, v_src: np.ndarray, move: Move) -> np.ndarray:
    """Copy source-object rows to their moved positions; everything else keeps ``v_edit``.

    The vacated region keeps ``v_edit`` so the edit prompt fills it in.
    """
    h, w = move.object_mask.shape
    if v_edit.shape[0] != h * w or v_src.shape != v_edit.shape:
        raise ConfigError(f"map_values: values {v_edit.shape}/{v_src.shape} vs {h}x{w} mask")
    src_idx, dst_idx = _move_targets(move)
    out = v_edit.copy()
    out[dst_idx] = v_src[src_idx]
    return out


def _paste_index(paste: Paste, edit_grid: tuple) -> np.ndarray:
    H, W = edit_grid
    (r0, c0), (h, w) = paste.offset, paste.src_size
    if h < 1 or w < 1 or r0 < 0 or c0 < 0 or r0 + h > H or c0 + w > W:
        raise ConfigError(f"paste of {h}x{w} at {tuple(paste.offset)} does not fit the {H}x{W} grid")
    rows, cols = np.divmod(np.arange(h * w), w)
    return (rows + r0) * W + (cols + c0)


def paste_values(v_edit: np.ndarray, v_src: np.ndarray, paste: Paste, edit_grid: tuple) -> np.ndarray:
    """Write ``v_src`` (row-major over ``src_size``) into the rectangle at ``offset``."""
    idx = _paste_index(paste, edit_grid)
    if v_src.shape[0] != len(idx) or v_edit.shape[0] != edit_grid[0] * edit_grid[1]:
        raise ConfigError(f"paste_values: {v_src.shape[0]} source rows for a {paste.src_size} rectangle")
    out = v_edit.copy()
    out[idx] = v_src
    return out


def paste_latent(z_edit: np.ndarray, z_src: np.ndarray, paste: Paste) -> np.ndarray:
    H, W, c = z_edit.shape
    flat = paste_values(z_edit.reshape(H * W, c), z_src.reshape(-1, c), paste, (H, W))
    return flat.reshape(H, W, c)


# ------------------------------------------------------------------- rules


@dataclass(frozen=True)
class KVFull:
    pass


@dataclass(frozen=True, eq=False)
class KVMasked:
    mask: np.ndarray  # True -> keep edit, False -> take src


@dataclass(frozen=True, eq=False)
class VMasked:
    mask: np.ndarray  # True -> take src value, False -> keep edit


@dataclass(frozen=True, eq=False)
class VMapped:
    map: Move | Paste


@dataclass(frozen=True, eq=False)
class InjectionRule:
    layers: tuple
    t_hi: int  # first (largest) timestep covered
    t_lo: int  # last (smallest) timestep covered; t_lo > t_hi means empty
    mode: object

    def covers(self, t: int) -> bool:
        return self.t_lo <= t <= self.t_hi

    @property
    def empty(self) -> bool:
        return self.t_lo > self.t_hi or not self.layers

    def validate(self, n_layers: int, steps: int, grid: tuple):
        if not self.empty and not 1 <= self.t_lo <= self.t_hi <= steps:
            raise ConfigError(f"rule timesteps [{self.t_hi}, {self.t_lo}] outside [1, {steps}]")
        bad = [i for i in self.layers if not 0 <= i < n_layers]
        if bad:
            raise ConfigError(f"rule references layers {bad}; model has {n_layers}")
        mask = getattr(self.mode, "mask", None)
        if isinstance(getattr(self.mode, "map", None), Move):
            mask = self.mode.map.object_mask
        if mask is not None and mask.shape != tuple(grid) and not self.empty:
            raise InjectionError(
                f"rule mask shape {mask.shape} does not match grid {tuple(grid)}", self.layers[0], self.t_hi
            )


def blend(mask: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rows of ``a`` where the flattened mask is set, rows of ``b`` elsewhere."""
    return np.where(np.asarray(mask, dtype=bool).reshape(-1, 1), a, b)


def _apply_mode(mode, k, v, k_src, v_src, edit_grid, layer, t):
    try:
        if isinstance(mode, KVFull):
            if k_src.shape != k.shape:
                raise InjectionError("source and edit grids differ; KVFull needs equal shapes", layer, t)
            return k_src, v_src
        if isinstance(mode, KVMasked):
            _check_mask(mode.mask, k, layer, t)
            return blend(mode.mask, k, k_src), blend(mode.mask, v, v_src)
        if isinstance(mode, VMasked):
            _check_mask(mode.mask, k, layer, t)
            return k, blend(mode.mask, v_src, v)
        if isinstance(mode, VMapped):
            if isinstance(mode.map, Move):
                return k, map_values(v, v_src, mode.map)
            return k, paste_values(v, v_src, mode.map, edit_grid)
    except ConfigError as e:
        raise InjectionError(str(e), layer, t) from None
    raise ConfigError(f"unknown injection mode {mode!r}")


def _check_mask(mask, k, layer, t):
    if mask.size != k.shape[0]:
        raise InjectionError(f"mask of {mask.size} cells for {k.shape[0]} image tokens", layer, t)


class _Recorder:
    def __init__(self, layer, store):
        self.layer = layer
        self.store = store

    def __call__(self, t, k, v):
        self.store[self.layer] = (k, v)
        return k, v


class _Substitute:
    def __init__(self, layer, modes, store, edit_grid):
        self.layer = layer
        self.modes = modes
        self.store = store
        self.edit_grid = edit_grid

    def __call__(self, t, k, v):
        k_src, v_src = self.store[self.layer]
        for mode in self.modes:
            k, v = _apply_mode(mode, k, v, k_src, v_src, self.edit_grid, self.layer, t)
        return k, v


# ------------------------------------------------------------------ lockstep


@dataclass
class PairedRun:
    src_traj: list
    edit_traj: list
    attn_edit: dict | None = None  # captured edit-stream attention
    attn_src: dict | None = None

    @property
    def x_src(self):
        return decode(self.src_traj[-1])

    @property
    def x_edit(self):
        return decode(self.edit_traj[-1])


def run_paired(
    model: Model,
    p_src: PromptEmbedding,
    p_edit: PromptEmbedding,
    seed: int | None,
    rules: Sequence[InjectionRule] = (),
    *,
    steps: int | None = None,
    z_src: np.ndarray | None = None,
    z_edit: np.ndarray | None = None,
    n_steps: int | None = None,
    capture_t: int | None = None,
) -> PairedRun:
    """Generate source and edit images in lockstep from shared initial noise.

    ``n_steps`` stops after that many steps (the trajectories then end at
    ``z_{T-n_steps}``). At ``capture_t`` the attention weights of both
    streams are kept.
    """
    T = steps or model.cfg.steps_T
    if z_src is None:
        z_src = initial_noise(model.cfg, seed)
    if z_edit is None:
        z_edit = z_src.copy()
    edit_grid = z_edit.shape[:2]
    for r in rules:
        r.validate(model.cfg.n_layers, T, edit_grid)
    src_traj, edit_traj = [z_src], [z_edit]
    attn_src = attn_edit = None
    stop = T - (n_steps if n_steps is not None else T)
    for t in range(T, stop, -1):
        active = {}
        for r in rules:
            if r.covers(t):
                for i in r.layers:
                    active.setdefault(i, []).append(r.mode)
        store = {}
        cap_s = {} if t == capture_t else None
        cap_e = {} if t == capture_t else None
        v_s = velocity(model, z_src, t, p_src, [_Recorder(i, store) for i in active], capture=cap_s, steps=T)
        hooks = [_Substitute(i, modes, store, edit_grid) for i, modes in active.items()]
        v_e = velocity(model, z_edit, t, p_edit, hooks, capture=cap_e, steps=T)
        if cap_s is not None:
            attn_src, attn_edit = cap_s, cap_e
        z_src = euler_step(z_src, v_s, t, T)
        z_edit = euler_step(z_edit, v_e, t, T)
        src_traj.append(z_src)
        edit_traj.append(z_edit)
    return PairedRun(src_traj, edit_traj, attn_edit, attn_src)


# -------------------------------------------------------------------- tasks


def _half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def scaled_R(steps: int) -> int:
    """Reasoning steps: 7 of 50, scaled to ``steps``; at least 2, below ``steps``."""
    return min(max(2, _half_up(7 * steps / 50)), steps - 1)


def scaled_B(steps: int) -> int:
    """Value-blending steps: 45 of 50, scaled to ``steps``."""
    return _half_up(45 * steps / 50)


@dataclass
class EditResult:
    x_src: np.ndarray
    x_edit: np.ndarray
    run: PairedRun
    mask: np.ndarray | None = None
    heatmap: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def _reason_mask(attn, token, layers, grid, text_len, threshold, connectivity, what):
    heat = extract_token_heatmap(attn, token, layers, grid, text_len)
    try:
        mask = largest_component(binarize(heat, threshold), connectivity)
    except EmptyMaskError:
        raise ReasoningError(f"{what}: attention reasoning produced an empty mask") from None
    return mask, heat


def edit_object_addition(
    model: Model,
    p_src: PromptEmbedding,
    p_edit: PromptEmbedding,
    object_token,
    seed: int,
    P: Sequence[int],
    *,
    R: int | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    connectivity: int = 4,
    steps: int | None = None,
    force_mask: np.ndarray | None = None,
) -> EditResult:
    """Reasoning-before-generation object addition.

    Phase 1 injects src keys/values into the position-dependent layers for
    the first ``R`` steps and reads the object token's attention at step
    ``T - R + 1``; the binarised largest component becomes the object mask.
    Phase 2 restarts from the same noise and injects only outside the mask.
    """
    T = steps or model.cfg.steps_T
    P = tuple(P)
    grid = (model.cfg.grid_h, model.cfg.grid_w)
    R = scaled_R(T) if R is None else R
    if not 1 <= R < T:
        raise ConfigError(f"reasoning steps R={R} must satisfy 1 <= R < T={T}")
    tok = token_index(p_edit, object_token)
    z_init = initial_noise(model.cfg, seed)
    heat = None
    if force_mask is None:
        if not P:
            raise ConfigError("object addition needs a non-empty position-dependent layer set")
        t_reason = T - R + 1
        phase1 = run_paired(
            model, p_src, p_edit, None, [InjectionRule(P, T, t_reason, KVFull())],
            steps=T, z_src=z_init, n_steps=R, capture_t=t_reason,
        )
        mask, heat = _reason_mask(
            phase1.attn_edit, tok, P, grid, model.cfg.text_len, threshold, connectivity, "object addition"
        )
    else:
        mask = np.asarray(force_mask, dtype=bool)
    run = run_paired(model, p_src, p_edit, None, [InjectionRule(P, T, 1, KVMasked(mask))], steps=T, z_src=z_init)
    return EditResult(run.x_src, run.x_edit, run, mask, heat, {"R": R, "token_index": tok})


def edit_non_rigid(model, p_src, p_edit, seed, C, *, steps=None) -> EditResult:
    T = steps or model.cfg.steps_T
    run = run_paired(model, p_src, p_edit, seed, [InjectionRule(tuple(C), T, 1, KVFull())], steps=T)
    return EditResult(run.x_src, run.x_edit, run)


def capture_attention(model: Model, prompt: PromptEmbedding, seed: int, at_t: int, *, steps=None) -> dict:
    """Attention weights of a plain sampling run at timestep ``at_t``."""
    T = steps or model.cfg.steps_T
    z = initial_noise(model.cfg, seed)
    for t in range(T, at_t - 1, -1):
        cap = {} if t == at_t else None
        v = velocity(model, z, t, prompt, capture=cap, steps=T)
        if cap is not None:
            return cap
        z = euler_step(z, v, t, T)
    raise ConfigError(f"timestep {at_t} outside [1, {T}]")


def reason_source_mask(
    model, p_src, token, seed, *, layers=None, R=None, threshold=DEFAULT_THRESHOLD, connectivity=4, steps=None,
):
    """Coarse object mask from the source stream's cross-attention at step ``T - R + 1``."""
    T = steps or model.cfg.steps_T
    R = scaled_R(T) if R is None else R
    layers = tuple(range(model.cfg.n_layers)) if layers is None else tuple(layers)
    attn = capture_attention(model, p_src, seed, T - R + 1, steps=T)
    tok = token_index(p_src, token)
    grid = (model.cfg.grid_h, model.cfg.grid_w)
    return _reason_mask(attn, tok, layers, grid, model.cfg.text_len, threshold, connectivity, "source mask")


def _blend_range(B, T):
    if not 0 <= B <= T:
        raise ConfigError(f"blending steps B={B} must lie in [0, T={T}]")
    return T, T - B + 1


def edit_background(
    model: Model,
    p_src: PromptEmbedding,
    p_edit: PromptEmbedding,
    seed: int,
    fg_token=None,
    refiner: MaskRefiner | None = None,
    *,
    B: int | None = None,
    R: int | None = None,
    n_points: int = 5,
    threshold: float = DEFAULT_THRESHOLD,
    connectivity: int = 4,
    steps: int | None = None,
    force_mask: np.ndarray | None = None,
) -> EditResult:
    """Value-only replacement over all layers for the first ``B`` steps."""
    T = steps or model.cfg.steps_T
    B = scaled_B(T) if B is None else B
    refiner = refiner or IdentityRefiner()
    info = {"B": B}
    heat = None
    if force_mask is None:
        if fg_token is None:
            raise ConfigError("background replacement needs a foreground token or an explicit mask")
        coarse, heat = reason_source_mask(
            model, p_src, fg_token, seed, R=R, threshold=threshold, connectivity=connectivity, steps=T
        )
        points = sample_foreground_points(coarse, n_points, SeededRng(seed, POINTS_STREAM))
        mask = refine_checked(refiner, coarse, points)
        info["points"] = points
        info["coarse_cells"] = int(coarse.sum())
    else:
        mask = np.asarray(force_mask, dtype=bool)
    if not mask.any():
        raise ReasoningError("background replacement: foreground mask is empty")
    hi, lo = _blend_range(B, T)
    layers = tuple(range(model.cfg.n_layers))
    run = run_paired(model, p_src, p_edit, seed, [InjectionRule(layers, hi, lo, VMasked(mask))], steps=T)
    return EditResult(run.x_src, run.x_edit, run, mask, heat, info)


def edit_move(model, p_src, p_edit, seed, move: Move, *, B=None, steps=None) -> EditResult:
    T = steps or model.cfg.steps_T
    B = scaled_B(T) if B is None else B
    _move_targets(move)
    hi, lo = _blend_range(B, T)
    layers = tuple(range(model.cfg.n_layers))
    run = run_paired(model, p_src, p_edit, seed, [InjectionRule(layers, hi, lo, VMapped(move))], steps=T)
    return EditResult(run.x_src, run.x_edit, run, move.object_mask, None, {"B": B})


def outpaint_noise(model: Model, seed: int, paste: Paste, edit_grid: tuple | None = None):
    """Source noise at ``src_size`` and an edit canvas carrying it inside the paste rectangle."""
    H, W = edit_grid or (model.cfg.grid_h, model.cfg.grid_w)
    z_src = initial_noise(model.cfg, seed, *paste.src_size)
    canvas = sample_gaussian((H, W, model.cfg.channels), SeededRng(seed, NOISE_STREAM).derive("outpaint-canvas"))
    return z_src, paste_latent(canvas, z_src, paste)


def edit_outpaint(model, p_src, p_edit, seed, paste: Paste, *, B=None, steps=None, edit_grid=None) -> EditResult:
    T = steps or model.cfg.steps_T
    B = scaled_B(T) if B is None else B
    z_src, z_edit = outpaint_noise(model, seed, paste, edit_grid)
    hi, lo = _blend_range(B, T)
    layers = tuple(range(model.cfg.n_layers))
    run = run_paired(
        model, p_src, p_edit, seed, [InjectionRule(layers, hi, lo, VMapped(paste))],
        steps=T, z_src=z_src, z_edit=z_edit,
    )
    H, W = z_edit.shape[:2]
    region = np.zeros((H, W), dtype=bool)
    (r0, c0), (h, w) = paste.offset, paste.src_size
    region[r0:r0 + h, c0:c0 + w] = True
    return EditResult(run.x_src, run.x_edit, run, region, None, {"B": B})

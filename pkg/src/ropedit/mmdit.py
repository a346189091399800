"""Toy multimodal diffusion transformer with joint text/image attention.

Layers ``0 .. n_multi-1`` are multi-stream blocks (separate projections per
modality), the rest are single-stream blocks (one shared set). Every block:

    h   = rmsnorm(x) * (1 + sigma * mod_scale) + sigma * mod_shift
    x  += joint_attention(h) @ Wo
    x  += gelu(rmsnorm(x) @ W1) @ W2

Latents are ``(h, w, channels)`` float32 arrays; the token grid is the latent
(identity patchify). The velocity head is ``rmsnorm(x_img) @ W_final``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import rope as R
from .errors import ConfigError, DimensionError, InjectionError, InputError
from .numerics import DTYPE, SeededRng, as_tensor, batched_matmul, matmul, sample_gaussian, softmax_rows

NOISE_STREAM = 0
WEIGHT_STREAM = 1
_EMBED_SEED = 0x5EED_0F_7E47
MAGIC = b"MMDP"
FORMAT_VERSION = 1
_EPS = 1e-6
_MOD_STD = 0.1


@dataclass(frozen=True)
class ModelConfig:
    n_multi: int = 4
    n_single: int = 8
    heads: int = 4
    head_dim: int = 16
    text_len: int = 8
    grid_h: int = 16
    grid_w: int = 16
    vocab_buckets: int = 4096
    rope_base: float = R.DEFAULT_BASE
    # kept for interface fidelity; sampling is single-stream conditional
    guidance_scale: float = 3.5
    steps_T: int = 50

    def __post_init__(self):
        ints = ("n_multi", "n_single", "heads", "head_dim", "text_len", "grid_h", "grid_w",
                "vocab_buckets", "steps_T")
        for name in ints:
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.n_multi < 0 or self.n_single < 0 or self.n_layers < 1:
            raise ConfigError("need at least one block")
        for name in ("heads", "text_len", "grid_h", "grid_w", "vocab_buckets", "steps_T"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.head_dim < 4 or self.head_dim % 4:
            raise ConfigError(f"head_dim must be a positive multiple of 4, got {self.head_dim}")
        if not self.rope_base > 1:
            raise ConfigError("rope_base must exceed 1")

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim

    @property
    def n_layers(self) -> int:
        return self.n_multi + self.n_single

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("rope_base", "guidance_scale"):
            if k in d:
                d[k] = float(d[k])
        return cls(**d)


# Per-modality parameter names, in serialization order.
_MATS = ("wq", "wk", "wv", "wo", "w1", "w2")
_VECS = ("bq", "bk", "bv", "mod_scale", "mod_shift")


@dataclass
class Block:
    kind: str  # "multi" | "single"
    params: dict  # name -> float32 array

    def p(self, name: str, modality: str) -> np.ndarray:
        if self.kind == "multi":
            return self.params[f"{name}_{modality}"]
        return self.params[name]


@dataclass
class Model:
    cfg: ModelConfig
    blocks: list
    w_final: np.ndarray

    @property
    def table(self) -> R.RotaryTable:
        return R.build_table(self.cfg.head_dim, self.cfg.rope_base)

    def named_tensors(self):
        """``(name, array)`` pairs in declaration order."""
        for i, b in enumerate(self.blocks):
            for name in _block_param_names(b.kind):
                yield f"blocks.{i}.{name}", b.params[name]
        yield "w_final", self.w_final

    def copy(self) -> "Model":
        blocks = [Block(b.kind, {k: v.copy() for k, v in b.params.items()}) for b in self.blocks]
        return Model(self.cfg, blocks, self.w_final.copy())


def _block_param_names(kind: str) -> list:
    suffixes = ("_txt", "_img") if kind == "multi" else ("",)
    return [n + s for s in suffixes for n in _MATS + _VECS]


def _unit_columns(rng: SeededRng, n: int) -> np.ndarray:
    w = sample_gaussian((n, n), rng).astype(np.float64)
    w /= np.linalg.norm(w, axis=0, keepdims=True)
    return w.astype(DTYPE)


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Seeded random weights; projection columns are unit norm."""
    root = SeededRng(seed, WEIGHT_STREAM)
    c = cfg.channels
    blocks = []
    for i in range(cfg.n_layers):
        kind = "multi" if i < cfg.n_multi else "single"
        params = {}
        for name in _block_param_names(kind):
            rng = root.derive(f"blocks.{i}.{name}")
            base = name.split("_")[0]
            if base in ("bq", "bk", "bv"):
                params[name] = np.zeros(c, dtype=DTYPE)
            elif name.startswith("mod_"):
                params[name] = (sample_gaussian((c,), rng) * DTYPE(_MOD_STD)).astype(DTYPE)
            else:
                params[name] = _unit_columns(rng, c)
        blocks.append(Block(kind, params))
    return Model(cfg, blocks, _unit_columns(root.derive("w_final"), c))


# --------------------------------------------------------------------- prompts


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    text: str
    tokens: tuple  # words actually used (after truncation)
    token_ids: tuple  # bucket ids, padded with the pad id up to text_len
    embeddings: np.ndarray  # (text_len, channels)


def tokenize(text: str) -> list:
    return text.lower().split()


def bucket(token: str, vocab_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_buckets


@lru_cache(maxsize=8)
def _embedding_table(vocab_buckets: int, channels: int) -> np.ndarray:
    # last row is the pad embedding
    t = sample_gaussian((vocab_buckets + 1, channels), SeededRng(_EMBED_SEED, vocab_buckets))
    t.setflags(write=False)
    return t


def encode_prompt(text: str, cfg: ModelConfig) -> PromptEmbedding:
    words = tokenize(text)
    if not words:
        raise InputError("prompt is empty")
    words = words[: cfg.text_len]
    ids = [bucket(w, cfg.vocab_buckets) for w in words]
    ids += [cfg.vocab_buckets] * (cfg.text_len - len(ids))
    emb = _embedding_table(cfg.vocab_buckets, cfg.channels)[ids].copy()
    emb.setflags(write=False)
    return PromptEmbedding(text, tuple(words), tuple(ids), emb)


def token_index(prompt: PromptEmbedding, word) -> int:
    """Index of ``word`` (a string or an int index) among the prompt tokens."""
    if isinstance(word, (int, np.integer)):
        if not 0 <= word < len(prompt.tokens):
            raise InputError(f"token index {word} outside prompt {prompt.text!r}")
        return int(word)
    w = word.lower()
    if w not in prompt.tokens:
        raise InputError(f"token {word!r} not in prompt {prompt.text!r}")
    return prompt.tokens.index(w)


# ------------------------------------------------------------------- attention

# A hook substitutes the image-token keys/values of one layer before RoPE.
# Called as hook(t, k_img, v_img) -> (k_img, v_img); it carries `.layer`.
InjectionHook = Callable


class IdentityHook:
    def __init__(self, layer: int):
        self.layer = layer

    def __call__(self, t, k, v):
        return k, v


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    xd = x.astype(np.float64)
    xd /= np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + _EPS)
    return xd.astype(DTYPE)


def _gelu(x: np.ndarray) -> np.ndarray:
    xd = x.astype(np.float64)
    return (0.5 * xd * (1.0 + np.tanh(0.7978845608028654 * xd * (1.0 + 0.044715 * xd * xd)))).astype(DTYPE)


def _linear(x, w, b=None):
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, c = x.shape
    return x.reshape(n, heads, c // heads)


def joint_attention(
    block: Block,
    txt: np.ndarray,
    img: np.ndarray,
    grid: R.PositionGrid,
    table: R.RotaryTable,
    heads: int,
    k_manip: R.Manipulation = R.KEEP,
    hooks: Sequence = (),
    *,
    t: int | None = None,
    layer: int | None = None,
):
    """Joint self-attention over ``[txt; img]`` tokens.

    ``txt`` and ``img`` are the normalised, modulated hidden states. Queries
    always carry their RoPE; ``k_manip`` only changes the key-side positions.
    Returns ``(txt_out, img_out, attn)`` where ``attn`` has shape
    ``(heads, n_txt + n_img, n_txt + n_img)`` with text tokens first.
    """
    n_txt, n_img = txt.shape[0], img.shape[0]
    if n_img != grid.n:
        raise DimensionError(f"{n_img} image tokens but grid has {grid.n}")
    q_t = _linear(txt, block.p("wq", "txt"), block.p("bq", "txt"))
    k_t = _linear(txt, block.p("wk", "txt"), block.p("bk", "txt"))
    v_t = _linear(txt, block.p("wv", "txt"), block.p("bv", "txt"))
    q_i = _linear(img, block.p("wq", "img"), block.p("bq", "img"))
    k_i = _linear(img, block.p("wk", "img"), block.p("bk", "img"))
    v_i = _linear(img, block.p("wv", "img"), block.p("bv", "img"))

    for hook in hooks:
        k_new, v_new = hook(t, k_i, v_i)
        if k_new.shape != k_i.shape or v_new.shape != v_i.shape:
            raise InjectionError(
                f"hook returned K{k_new.shape}/V{v_new.shape}, expected {k_i.shape}", layer, t
            )
        k_i, v_i = as_tensor(k_new), as_tensor(v_new)

    q_i = R.apply_rope(_split_heads(q_i, heads), grid, table)
    k_grid = R.manipulate_positions(grid, k_manip)
    k_i = _split_heads(k_i, heads)
    if k_grid is not None:
        k_i = R.apply_rope(k_i, k_grid, table)

    q = np.concatenate([_split_heads(q_t, heads), q_i]).transpose(1, 0, 2)
    k = np.concatenate([_split_heads(k_t, heads), k_i]).transpose(1, 2, 0)
    v = np.concatenate([_split_heads(v_t, heads), _split_heads(v_i, heads)]).transpose(1, 0, 2)
    n = n_txt + n_img
    d_k = q.shape[-1]
    logits = batched_matmul(q, k)
    attn = softmax_rows(logits.reshape(heads * n, n), 1.0 / np.sqrt(d_k)).reshape(heads, n, n)
    out = batched_matmul(attn, v).transpose(1, 0, 2).reshape(n, -1)
    txt_out = matmul(out[:n_txt], block.p("wo", "txt"))
    img_out = matmul(out[n_txt:], block.p("wo", "img"))
    return txt_out, img_out, attn


def _modulate(h, block, modality, sigma):
    scale = 1.0 + sigma * block.p("mod_scale", modality).astype(np.float64)
    shift = sigma * block.p("mod_shift", modality).astype(np.float64)
    return (h.astype(np.float64) * scale + shift).astype(DTYPE)


def block_forward(block, txt, img, grid, table, heads, sigma, k_manip=R.KEEP, hooks=(), *, t=None, layer=None):
    ht = _modulate(_rmsnorm(txt), block, "txt", sigma)
    hi = _modulate(_rmsnorm(img), block, "img", sigma)
    at, ai, attn = joint_attention(block, ht, hi, grid, table, heads, k_manip, hooks, t=t, layer=layer)
    txt = txt + at
    img = img + ai
    for name, x in (("txt", txt), ("img", img)):
        ff = matmul(_gelu(matmul(_rmsnorm(x), block.p("w1", name))), block.p("w2", name))
        if name == "txt":
            txt = x + ff
        else:
            img = x + ff
    return txt, img, attn


# -------------------------------------------------------------------- sampling


def sigma(t: int, steps: int) -> float:
    return t / steps


def _group_hooks(hooks, n_layers):
    grouped = {}
    for hook in hooks or ():
        layer = getattr(hook, "layer", None)
        if not isinstance(layer, (int, np.integer)) or not 0 <= layer < n_layers:
            raise ConfigError(f"hook references layer {layer!r}; model has {n_layers} layers")
        grouped.setdefault(int(layer), []).append(hook)
    return grouped


def velocity(
    model: Model,
    z: np.ndarray,
    t: int,
    prompt: PromptEmbedding,
    hooks=None,
    k_manips=None,
    capture: dict | None = None,
    steps: int | None = None,
) -> np.ndarray:
    """Rectified-flow velocity at latent ``z`` (shape ``(h, w, C)``), timestep ``t``.

    ``k_manips`` maps layer -> Manipulation (absent layers keep RoPE).
    If ``capture`` is a dict, the attention weights of every layer are stored in it.
    """
    cfg = model.cfg
    steps = steps or cfg.steps_T
    if not 1 <= t <= steps:
        raise ConfigError(f"timestep {t} outside [1, {steps}]")
    if z.ndim != 3 or z.shape[2] != cfg.channels:
        raise DimensionError(f"latent shape {z.shape} incompatible with {cfg.channels} channels")
    if prompt.embeddings.shape != (cfg.text_len, cfg.channels):
        raise DimensionError(f"prompt embedding shape {prompt.embeddings.shape} does not match config")
    h, w, c = z.shape
    grouped = _group_hooks(hooks, cfg.n_layers)
    k_manips = k_manips or {}
    for layer in k_manips:
        if not 0 <= layer < cfg.n_layers:
            raise ConfigError(f"manipulation targets layer {layer}; model has {cfg.n_layers} layers")
    grid = R.grid_positions(h, w)
    table = model.table
    s = sigma(t, steps)
    txt = prompt.embeddings
    img = as_tensor(z.reshape(h * w, c))
    for i, block in enumerate(model.blocks):
        txt, img, attn = block_forward(
            block, txt, img, grid, table, cfg.heads, s,
            k_manips.get(i, R.KEEP), grouped.get(i, ()), t=t, layer=i,
        )
        if capture is not None:
            capture[i] = attn
    v = matmul(_rmsnorm(img), model.w_final)
    return v.reshape(h, w, c)


def initial_noise(cfg: ModelConfig, seed: int, h: int | None = None, w: int | None = None) -> np.ndarray:
    h = h or cfg.grid_h
    w = w or cfg.grid_w
    return sample_gaussian((h, w, cfg.channels), SeededRng(seed, NOISE_STREAM))


def euler_sample(
    model: Model,
    prompt: PromptEmbedding,
    seed: int | None = None,
    steps: int | None = None,
    hooks=None,
    k_manips=None,
    z_T: np.ndarray | None = None,
    grid: tuple | None = None,
) -> list:
    """Integrate from noise (sigma=1) to data (sigma=0); returns ``[z_T, ..., z_0]``."""
    steps = steps or model.cfg.steps_T
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if z_T is None:
        if seed is None:
            raise InputError("need a seed or an explicit z_T")
        z_T = initial_noise(model.cfg, seed, *(grid or (None, None)))
    z = as_tensor(z_T)
    traj = [z]
    for t in range(steps, 0, -1):
        v = velocity(model, z, t, prompt, hooks, k_manips, steps=steps)
        z = euler_step(z, v, t, steps)
        traj.append(z)
    return traj


def euler_step(z, v, t, steps):
    dsig = sigma(t - 1, steps) - sigma(t, steps)
    return (z.astype(np.float64) + dsig * v.astype(np.float64)).astype(DTYPE)


def euler_invert(model: Model, z_0: np.ndarray, prompt: PromptEmbedding, steps: int | None = None) -> np.ndarray:
    """Run the Euler recursion backwards from data to an estimate of the noise."""
    steps = steps or model.cfg.steps_T
    z = as_tensor(z_0)
    if not np.all(np.isfinite(z)):
        raise InputError("latent contains non-finite values")
    for t in range(1, steps + 1):
        v = velocity(model, z, t, prompt, steps=steps)
        dsig = sigma(t - 1, steps) - sigma(t, steps)
        z = (z.astype(np.float64) - dsig * v.astype(np.float64)).astype(DTYPE)
    return z


DECODE_CENTER = 0.5
DECODE_GAIN = 0.25


def decode(z: np.ndarray) -> np.ndarray:
    """Fixed affine codec ``clip(0.5 + z / 4, 0, 1)``, float64 output."""
    return np.clip(DECODE_CENTER + DECODE_GAIN * z.astype(np.float64), 0.0, 1.0)


# --------------------------------------------------------------- serialization

_CFG_LAYOUT = [
    ("n_multi", "I"), ("n_single", "I"), ("heads", "I"), ("head_dim", "I"),
    ("text_len", "I"), ("grid_h", "I"), ("grid_w", "I"), ("vocab_buckets", "I"),
    ("rope_base", "d"), ("guidance_scale", "d"), ("steps_T", "I"),
]
_CFG_FMT = "<" + "".join(code for _, code in _CFG_LAYOUT)


def save_weights(model: Model, path) -> None:
    cfg = model.cfg
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack(_CFG_FMT, *(getattr(cfg, name) for name, _ in _CFG_LAYOUT)))
        for _, arr in model.named_tensors():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise InputError(f"{path}: not a weights file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported weights version {version}")
    off = 8
    values = struct.unpack_from(_CFG_FMT, data, off)
    off += struct.calcsize(_CFG_FMT)
    cfg = ModelConfig(**{name: v for (name, _), v in zip(_CFG_LAYOUT, values)})
    skeleton = _skeleton(cfg)
    out = {}
    for name, arr in skeleton.named_tensors():
        nbytes = arr.size * 4
        if off + nbytes > len(data):
            raise InputError(f"{path}: truncated at {name}")
        out[name] = np.frombuffer(data, dtype="<f4", count=arr.size, offset=off).reshape(arr.shape).astype(DTYPE)
        off += nbytes
    if off != len(data):
        raise InputError(f"{path}: {len(data) - off} trailing bytes")
    for i, b in enumerate(skeleton.blocks):
        for name in b.params:
            b.params[name] = out[f"blocks.{i}.{name}"]
    skeleton.w_final = out["w_final"]
    return skeleton


def _skeleton(cfg: ModelConfig) -> Model:
    c = cfg.channels
    blocks = []
    for i in range(cfg.n_layers):
        kind = "multi" if i < cfg.n_multi else "single"
        params = {}
        for name in _block_param_names(kind):
            is_vec = name.split("_")[0] in ("bq", "bk", "bv") or name.startswith("mod_")
            params[name] = np.zeros(c if is_vec else (c, c), dtype=DTYPE)
        blocks.append(Block(kind, params))
    return Model(cfg, blocks, np.zeros((c, c), dtype=DTYPE))


def with_steps(cfg: ModelConfig, steps: int) -> ModelConfig:
    return replace(cfg, steps_T=steps)

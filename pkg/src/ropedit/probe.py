"""Layer-wise positional-dependency probing.

For every (prompt, seed) a baseline image is sampled; then, one layer at a
time, the same trajectory is re-run with that layer's key-side RoPE removed or
shifted (queries untouched). PSNR against the baseline measures how much the
layer relies on position: low PSNR means position-dependent.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import rope as R
from .errors import ConfigError, DimensionError
from .mmdit import Model, decode, encode_prompt, euler_sample

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """PSNR in dB for images with peak 1; ``PSNR_CAP`` when identical.

    ``mask`` (boolean, shape ``a.shape[:2]``) restricts the comparison to
    the selected pixels.
    """
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    if mask is not None:
        if mask.shape != a.shape[:2]:
            raise DimensionError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
        diff = diff[mask]
        if diff.size == 0:
            raise DimensionError("psnr mask selects no pixels")
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def default_battery(grid_h: int) -> list:
    """Remove, Shift(0,20), Shift(10,10) and a full-height vertical shift."""
    return [R.REMOVE, R.shift(0, 20), R.shift(10, 10), R.shift(grid_h, 0)]


@dataclass
class ProbeSpec:
    prompts: list
    seeds: list
    manipulations: list
    layers: list | None = None  # None -> every layer
    steps: int | None = None

    def validate(self, n_layers: int) -> list:
        if not self.prompts:
            raise ConfigError("probe needs at least one prompt")
        if not self.seeds:
            raise ConfigError("probe needs at least one seed")
        if not self.manipulations:
            raise ConfigError("probe needs at least one manipulation")
        if any(m.kind == "keep" for m in self.manipulations):
            raise ConfigError("keep is the baseline and cannot be probed")
        layers = list(range(n_layers)) if self.layers is None else [int(i) for i in self.layers]
        bad = [i for i in layers if not 0 <= i < n_layers]
        if bad:
            raise ConfigError(f"probe layers {bad} outside [0, {n_layers})")
        if len(set(layers)) != len(layers):
            raise ConfigError("duplicate probe layers")
        return sorted(layers)


@dataclass(frozen=True)
class ProbeRow:
    layer: int
    manipulation: str
    prompt_idx: int
    seed: int
    psnr_db: float


@dataclass
class ProbeReport:
    rows: list = field(default_factory=list)

    def mean_by_layer_manipulation(self) -> dict:
        acc = {}
        for r in self.rows:
            acc.setdefault((r.layer, r.manipulation), []).append(r.psnr_db)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def mean_by_layer(self) -> dict:
        acc = {}
        for r in self.rows:
            acc.setdefault(r.layer, []).append(r.psnr_db)
        return {k: float(np.mean(v)) for k, v in sorted(acc.items())}

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "manipulation", "prompt_idx", "seed", "psnr_db"])
        for r in self.rows:
            w.writerow([r.layer, r.manipulation, r.prompt_idx, r.seed, f"{r.psnr_db:.6f}"])
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        return aggregate_csv(self.mean_by_layer())

    def scatter_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "manipulation", "mean_psnr_db"])
        for (layer, m), v in sorted(self.mean_by_layer_manipulation().items()):
            w.writerow([layer, m, f"{v:.6f}"])
        return buf.getvalue()


def aggregate_csv(means: Mapping) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "mean_psnr_db"])
    for layer, v in sorted(means.items()):
        w.writerow([layer, f"{v:.6f}"])
    return buf.getvalue()


def _probe_one(model: Model, prompt: str, prompt_idx: int, seed: int, layers, manips, steps):
    emb = encode_prompt(prompt, model.cfg)
    base = decode(euler_sample(model, emb, seed, steps)[-1])
    rows = []
    for layer in layers:
        for m in manips:
            img = decode(euler_sample(model, emb, seed, steps, k_manips={layer: m})[-1])
            rows.append(ProbeRow(layer, m.label, prompt_idx, seed, psnr(base, img)))
    return rows


def run_probe(model: Model, spec: ProbeSpec, jobs: int = 1) -> ProbeReport:
    layers = spec.validate(model.cfg.n_layers)
    steps = spec.steps or model.cfg.steps_T
    tasks = [(p, i, int(s)) for i, p in enumerate(spec.prompts) for s in spec.seeds]
    manips = list(spec.manipulations)
    if jobs <= 1:
        chunks = [_probe_one(model, p, i, s, layers, manips, steps) for p, i, s in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(_probe_one, model, p, i, s, layers, manips, steps) for p, i, s in tasks]
            chunks = [f.result() for f in futs]
    order = {m.label: k for k, m in enumerate(manips)}
    rows = sorted(
        (r for chunk in chunks for r in chunk),
        key=lambda r: (r.layer, order[r.manipulation], r.prompt_idx, r.seed),
    )
    return ProbeReport(rows)


# ---------------------------------------------------------------- layer sets


@dataclass(frozen=True)
class LayerSets:
    P: tuple  # most position-dependent
    C: tuple  # most content-similarity-dependent
    L: tuple  # all layers

    def __post_init__(self):
        if set(self.P) & set(self.C):
            raise ConfigError(f"P and C overlap: {sorted(set(self.P) & set(self.C))}")
        if not (set(self.P) | set(self.C)) <= set(self.L):
            raise ConfigError("P and C must be subsets of L")

    def to_dict(self) -> dict:
        return {"P": sorted(self.P), "C": sorted(self.C), "L": sorted(self.L)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSets":
        try:
            P = tuple(sorted(int(i) for i in d["P"]))
            C = tuple(sorted(int(i) for i in d["C"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"layer sets need integer lists P and C: {e}") from None
        L = d.get("L")
        L = tuple(sorted(int(i) for i in L)) if L is not None else tuple(range(max(P + C) + 1))
        return cls(P, C, L)


def _quantile_count(frac: float, n: int) -> int:
    # tolerance guards against 7/57*57 landing a hair above 7
    return math.ceil(frac * n - 1e-9)


def classify_layers(means, p_frac: float, c_frac: float, all_layers: Sequence[int] | None = None) -> LayerSets:
    """Rank layers by mean PSNR; the lowest go to P, the highest to C.

    ``means`` is a ``{layer: mean_psnr}`` mapping or a ``ProbeReport``. Ties
    are broken by ascending layer index, so with equal scores P takes the
    lowest indices and C the highest.
    """
    if isinstance(means, ProbeReport):
        means = means.mean_by_layer()
    if not (0 < p_frac and 0 < c_frac and p_frac + c_frac <= 1):
        raise ConfigError(f"need 0 < p_frac, c_frac and p_frac + c_frac <= 1, got {p_frac}, {c_frac}")
    n = len(means)
    if n < 2:
        raise ConfigError("classification needs at least two layers")
    ranked = sorted(means, key=lambda layer: (means[layer], layer))
    n_p, n_c = _quantile_count(p_frac, n), _quantile_count(c_frac, n)
    if n_p + n_c > n:
        raise ConfigError(f"{n_p} + {n_c} selected layers exceed the {n} available")
    P = tuple(sorted(ranked[:n_p]))
    C = tuple(sorted(ranked[n - n_c:]))
    L = tuple(sorted(all_layers)) if all_layers is not None else tuple(sorted(means))
    return LayerSets(P, C, L)


def read_aggregate_csv(text: str) -> dict:
    """Parse ``layer,mean_psnr_db`` rows; errors name the offending line."""
    lines = text.splitlines()
    if not lines or [h.strip() for h in lines[0].split(",")] != ["layer", "mean_psnr_db"]:
        raise ConfigError("line 1: expected header 'layer,mean_psnr_db'")
    means = {}
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            if len(parts) != 2:
                raise ValueError
            layer, value = int(parts[0]), float(parts[1])
        except ValueError:
            raise ConfigError(f"line {no}: malformed row {line!r}") from None
        if layer in means:
            raise ConfigError(f"line {no}: duplicate layer {layer}")
        if not math.isfinite(value):
            raise ConfigError(f"line {no}: non-finite value")
        means[layer] = value
    if not means:
        raise ConfigError("aggregate CSV has no rows")
    return means

"""Two-axis rotary position embedding and the key-side probe manipulations.

Layout of one head vector of size ``head_dim``: the first half encodes the row
coordinate, the second half the column coordinate. Within each half,
consecutive values ``(x[2j], x[2j+1])`` form a rotation pair turned by
``pos * freqs[j]``. Text tokens sit at the origin, so they are never rotated.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import DTYPE

DEFAULT_BASE = 10000.0


@dataclass(frozen=True)
class RotaryTable:
    head_dim: int
    base: float
    freqs: tuple  # head_dim // 4 values, shared by both axes


def build_table(head_dim: int, base: float = DEFAULT_BASE) -> RotaryTable:
    if head_dim < 4 or head_dim % 4:
        raise ConfigError(f"head_dim must be a positive multiple of 4, got {head_dim}")
    if not base > 1:
        raise ConfigError(f"rotary base must exceed 1, got {base}")
    d = np.arange(head_dim // 4, dtype=np.float64)
    freqs = np.power(float(base), -4.0 * d / head_dim)
    return RotaryTable(head_dim, float(base), tuple(float(f) for f in freqs))


@dataclass(frozen=True, eq=False)
class PositionGrid:
    """Integer ``(row, col)`` coordinates of the image tokens, row-major."""

    h: int
    w: int
    coords: np.ndarray  # (h*w, 2) int64

    def __eq__(self, other):
        return (
            isinstance(other, PositionGrid)
            and (self.h, self.w) == (other.h, other.w)
            and np.array_equal(self.coords, other.coords)
        )

    def __hash__(self):
        return hash((self.h, self.w, self.coords.tobytes()))

    @property
    def n(self) -> int:
        return self.h * self.w

    def span(self):
        """``((min_row, min_col), (max_row, max_col))``."""
        lo = self.coords.min(axis=0)
        hi = self.coords.max(axis=0)
        return (int(lo[0]), int(lo[1])), (int(hi[0]), int(hi[1]))


def grid_positions(h: int, w: int) -> PositionGrid:
    if h < 1 or w < 1:
        raise ConfigError(f"grid dims must be >= 1, got {h}x{w}")
    rows, cols = np.divmod(np.arange(h * w, dtype=np.int64), w)
    coords = np.stack([rows, cols], axis=1)
    coords.setflags(write=False)
    return PositionGrid(h, w, coords)


@dataclass(frozen=True)
class Manipulation:
    kind: str  # "keep" | "remove" | "shift"
    dr: int = 0
    dc: int = 0

    def __post_init__(self):
        if self.kind not in ("keep", "remove", "shift"):
            raise ConfigError(f"unknown manipulation kind {self.kind!r}")
        if self.kind != "shift" and (self.dr or self.dc):
            raise ConfigError(f"{self.kind} takes no offset")

    @property
    def label(self) -> str:
        if self.kind == "shift":
            return f"shift({self.dr},{self.dc})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Manipulation":
        """Parse ``keep``, ``remove`` or ``shift(dr,dc)`` (also ``shift:dr,dc``)."""
        s = text.strip().lower().replace(" ", "")
        if s in ("keep", "remove"):
            return cls(s)
        if s.startswith("shift"):
            body = s[5:].strip("():")
            try:
                dr, dc = (int(v) for v in body.split(","))
            except ValueError:
                raise ConfigError(f"bad shift manipulation {text!r}") from None
            return cls("shift", dr, dc)
        raise ConfigError(f"bad manipulation {text!r}")


KEEP = Manipulation("keep")
REMOVE = Manipulation("remove")


def shift(dr: int, dc: int) -> Manipulation:
    return Manipulation("shift", int(dr), int(dc))


def manipulate_positions(grid: PositionGrid, m: Manipulation) -> PositionGrid | None:
    """Key-side grid after manipulation; ``None`` means skip key rotation.

    Shifted coordinates are neither wrapped nor clamped.
    """
    if m.kind == "keep":
        return grid
    if m.kind == "remove":
        return None
    coords = grid.coords + np.array([m.dr, m.dc], dtype=np.int64)
    coords.setflags(write=False)
    return PositionGrid(grid.h, grid.w, coords)


@lru_cache(maxsize=64)
def _cos_sin(grid: PositionGrid, table: RotaryTable):
    freqs = np.asarray(table.freqs, dtype=np.float64)
    # (n, head_dim // 2): row-axis angles then col-axis angles, one per pair
    ang = np.concatenate(
        [np.outer(grid.coords[:, 0], freqs), np.outer(grid.coords[:, 1], freqs)], axis=1
    )
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, grid: PositionGrid, table: RotaryTable) -> np.ndarray:
    """Rotate ``x[tokens, ..., head_dim]`` by the grid positions.

    Extra middle axes (e.g. heads) share the same per-token angles.
    """
    if x.shape[0] != grid.n or x.shape[-1] != table.head_dim:
        raise DimensionError(
            f"apply_rope: x has shape {x.shape}, grid has {grid.n} tokens, "
            f"table head_dim {table.head_dim}"
        )
    cos, sin = _cos_sin(grid, table)
    expand = (slice(None),) + (None,) * (x.ndim - 2) + (slice(None),)
    cos, sin = cos[expand], sin[expand]
    xd = x.astype(np.float64)
    a = xd[..., 0::2]
    b = xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out.astype(DTYPE)

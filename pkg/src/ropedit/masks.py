"""Attention heatmaps, binary masks and the mask-refiner interface.

Masks are boolean ``(h, w)`` arrays at token-grid resolution.
"""

from __future__ import annotations

from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, EmptyMaskError
from .numerics import SeededRng

DEFAULT_THRESHOLD = 0.3

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def extract_token_heatmap(
    attn: Mapping,
    token_index: int,
    layers: Sequence[int],
    grid: tuple,
    text_len: int,
    head_average: bool = True,
) -> np.ndarray:
    """Attention mass from every image query onto one text key.

    ``attn`` maps layer -> ``(heads, n, n)`` weights with the ``text_len``
    text tokens first. The column is averaged over heads (or head 0 only
    when ``head_average`` is false) and over ``layers``, reshaped to ``grid``
    and min-max normalised. A constant map normalises to all zeros.
    """
    layers = list(layers)
    if not layers:
        raise ConfigError("heatmap needs at least one layer")
    if not 0 <= token_index < text_len:
        raise ConfigError(f"token index {token_index} outside text length {text_len}")
    h, w = grid
    acc = np.zeros(h * w, dtype=np.float64)
    for layer in layers:
        a = attn[layer]
        if a.shape[1] != text_len + h * w:
            raise DimensionError(f"layer {layer} attention has {a.shape[1]} tokens, expected {text_len + h * w}")
        col = a[:, text_len:, token_index].astype(np.float64)
        acc += col.mean(axis=0) if head_average else col[0]
    acc /= len(layers)
    lo, hi = acc.min(), acc.max()
    if hi > lo:
        acc = (acc - lo) / (hi - lo)
    else:
        acc = np.zeros_like(acc)
    return acc.reshape(h, w)


def binarize(heatmap: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Cells with value >= threshold are set."""
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(heatmap) >= threshold


def label_components(mask: np.ndarray, connectivity: int = 4):
    if connectivity not in _STRUCTURE:
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    return ndimage.label(np.asarray(mask, dtype=bool), structure=_STRUCTURE[connectivity])


def largest_component(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Keep only the biggest connected component.

    Ties go to the component whose first cell comes earliest in row-major
    order (labels are assigned in that order, and argmax takes the first).
    """
    labels, n = label_components(mask, connectivity)
    if n == 0:
        raise EmptyMaskError("mask has no set cells")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def sample_foreground_points(mask: np.ndarray, k: int, rng: SeededRng) -> list:
    """``k`` distinct set cells, uniformly; with replacement once ``k`` exceeds the count."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    cells = np.argwhere(np.asarray(mask, dtype=bool))
    if len(cells) == 0:
        raise EmptyMaskError("cannot sample points from an empty mask")
    idx = rng.generator().choice(len(cells), size=k, replace=k > len(cells))
    return [(int(cells[i, 0]), int(cells[i, 1])) for i in idx]


class MaskRefiner(Protocol):
    def refine(self, coarse: np.ndarray, points: list) -> np.ndarray: ...


class IdentityRefiner:
    """Returns the coarse mask unchanged."""

    def refine(self, coarse, points):
        return np.array(coarse, dtype=bool, copy=True)


def refine_checked(refiner: MaskRefiner, coarse: np.ndarray, points: list) -> np.ndarray:
    out = np.asarray(refiner.refine(coarse, points), dtype=bool)
    if out.shape != coarse.shape:
        raise DimensionError(f"refiner returned shape {out.shape}, expected {coarse.shape}")
    return out


def full_mask(h: int, w: int, value: bool = True) -> np.ndarray:
    return np.full((h, w), value, dtype=bool)

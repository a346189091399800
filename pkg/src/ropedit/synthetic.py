"""Hand-built models with known layer roles, used to validate the probe."""

from __future__ import annotations

import numpy as np

from .mmdit import Model, ModelConfig, _skeleton
from .numerics import DTYPE

TWO_LAYER_CONFIG = ModelConfig(
    n_multi=0, n_single=2, heads=1, head_dim=16, text_len=4,
    grid_h=8, grid_w=8, vocab_buckets=256, steps_T=8,
)


def two_layer_model(pos_gain: float = 8.0, content_gain: float = 3.0, value_gain: float = 1.0) -> Model:
    """Layer 0 attends purely by position, layer 1 purely by content.

    Layer 0: queries and keys are the same constant vector (a bias; the
    projections are zero) placed in the two fastest-rotating pairs of each
    axis, so the logit between two tokens depends only on their offset and
    peaks at offset zero.

    Layer 1: queries and keys project the hidden state onto the slowest
    rotating pair of each axis, where rotation angles stay below ~0.03 rad
    over the probed offsets, so logits are governed by content similarity.

    Both layers pass values through a scaled identity; feed-forwards are off.
    """
    cfg = TWO_LAYER_CONFIG
    m = _skeleton(cfg)
    c = cfg.channels
    half = cfg.head_dim // 2
    eye = np.eye(c, dtype=DTYPE)

    pos = m.blocks[0].params
    q0 = np.zeros(c, dtype=DTYPE)
    for base in (0, half):  # row axis, col axis
        q0[base + 0] = pos_gain  # freq 1 pair
        q0[base + 2] = pos_gain  # freq base**-0.25 pair
    pos["bq"] = q0.copy()
    pos["bk"] = q0.copy()
    pos["wv"] = eye * DTYPE(value_gain)
    pos["wo"] = eye.copy()

    con = m.blocks[1].params
    proj = np.zeros((c, c), dtype=DTYPE)
    slow = [half - 2, half - 1, c - 2, c - 1]  # slowest pair on each axis
    for j, dim in enumerate(slow):
        proj[j, dim] = content_gain
        proj[j + 4, dim] = -content_gain if j % 2 else content_gain
    con["wq"] = proj.copy()
    con["wk"] = proj.copy()
    con["wv"] = eye * DTYPE(value_gain)
    con["wo"] = eye.copy()

    m.w_final = eye.copy()
    return m

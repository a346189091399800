"""Independent reference implementations shared by the tests."""

from collections import deque

import numpy as np

from ropedit import rope as R
from ropedit.numerics import batched_matmul, matmul, softmax_rows


def rotate_complex(x, coords, freqs):
    """Straight-line RoPE via complex multiplication, float64."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    nf = len(freqs)
    for tok, (r, c) in enumerate(coords):
        for axis, pos in ((0, r), (1, c)):
            for j, f in enumerate(freqs):
                i = axis * 2 * nf + 2 * j
                z = complex(x[tok, i], x[tok, i + 1]) * np.exp(1j * pos * f)
                out[tok, i], out[tok, i + 1] = z.real, z.imag
    return out


def eq1_attention_one_head(block, txt, img, coords, freqs, key_coords=None, rotate_keys=True):
    """Joint attention for a single head, written out in float64."""
    f64 = lambda a: np.asarray(a, dtype=np.float64)
    P = lambda name, mod: f64(block.p(name, mod))
    q_t = f64(txt) @ P("wq", "txt") + P("bq", "txt")
    k_t = f64(txt) @ P("wk", "txt") + P("bk", "txt")
    v_t = f64(txt) @ P("wv", "txt") + P("bv", "txt")
    q_i = f64(img) @ P("wq", "img") + P("bq", "img")
    k_i = f64(img) @ P("wk", "img") + P("bk", "img")
    v_i = f64(img) @ P("wv", "img") + P("bv", "img")
    q_i = rotate_complex(q_i, coords, freqs)
    if rotate_keys:
        k_i = rotate_complex(k_i, coords if key_coords is None else key_coords, freqs)
    Q = np.vstack([q_t, q_i])
    K = np.vstack([k_t, k_i])
    V = np.vstack([v_t, v_i])
    logits = Q @ K.T / np.sqrt(Q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    A = np.exp(logits)
    A /= A.sum(axis=1, keepdims=True)
    out = A @ V
    n = len(txt)
    return out[:n] @ P("wo", "txt"), out[n:] @ P("wo", "img"), A


def attention_without_key_rotary(block, txt, img, grid, table, heads):
    """Same primitive sequence as the library, but keys are never rotated."""
    def lin(x, name, mod):
        return matmul(x, block.p("w" + name, mod)) + block.p("b" + name, mod)

    def split(x):
        return x.reshape(x.shape[0], heads, -1)

    q_t, k_t, v_t = lin(txt, "q", "txt"), lin(txt, "k", "txt"), lin(txt, "v", "txt")
    q_i, k_i, v_i = lin(img, "q", "img"), lin(img, "k", "img"), lin(img, "v", "img")
    q_i = R.apply_rope(split(q_i), grid, table)
    q = np.concatenate([split(q_t), q_i]).transpose(1, 0, 2)
    k = np.concatenate([split(k_t), split(k_i)]).transpose(1, 2, 0)
    v = np.concatenate([split(v_t), split(v_i)]).transpose(1, 0, 2)
    n = q.shape[1]
    attn = softmax_rows(batched_matmul(q, k).reshape(heads * n, n), 1.0 / np.sqrt(q.shape[-1])).reshape(heads, n, n)
    out = batched_matmul(attn, v).transpose(1, 0, 2).reshape(n, -1)
    nt = txt.shape[0]
    return matmul(out[:nt], block.p("wo", "txt")), matmul(out[nt:], block.p("wo", "img")), attn


def flood_fill_components(mask, connectivity=4):
    """BFS labelling; components listed in order of their first row-major cell."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    if connectivity == 4:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        nbrs = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                cells = []
                queue = deque([(r, c)])
                seen[r, c] = True
                while queue:
                    a, b = queue.popleft()
                    cells.append((a, b))
                    for dr, dc in nbrs:
                        x, y = a + dr, b + dc
                        if 0 <= x < h and 0 <= y < w and mask[x, y] and not seen[x, y]:
                            seen[x, y] = True
                            queue.append((x, y))
                comps.append(cells)
    return comps


def largest_by_flood_fill(mask, connectivity=4):
    comps = flood_fill_components(mask, connectivity)
    if not comps:
        return None
    best = max(comps, key=len)  # max keeps the first of equal-sized components
    out = np.zeros(np.shape(mask), dtype=bool)
    for cell in best:
        out[cell] = True
    return out

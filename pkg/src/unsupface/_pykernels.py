"""NumPy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` must agree with them
exactly (see ``tests/test_kernels.py``).
"""

import numpy as np

# clockwise from top-left; bit i is set when neighbour i >= centre
NEIGHBOUR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _transitions(code):
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


def uniform_bin_table():
    """Map each 8-bit code to its uniform-pattern bin (0..57) or -1."""
    table = np.full(256, -1, dtype=np.int16)
    nxt = 0
    for code in range(256):
        if _transitions(code) <= 2:
            table[code] = nxt
            nxt += 1
    assert nxt == 58
    return table


UNIFORM_BINS = uniform_bin_table()


def iou_matrix(a, b):
    """Pairwise IoU between boxes given as ``(n, 4)`` arrays of ``x, y, w, h``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2 = a[:, 0] + a[:, 2]
    ay2 = a[:, 1] + a[:, 3]
    bx2 = b[:, 0] + b[:, 2]
    by2 = b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, 0][:, None], b[:, 0][None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, 1][:, None], b[:, 1][None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def lbp_codes(gray):
    """Raw 8-neighbour, radius-1 LBP codes with edge-replicated borders."""
    g = np.asarray(gray, dtype=np.float64)
    p = np.pad(g, 1, mode="edge")
    h, w = g.shape
    codes = np.zeros((h, w), dtype=np.uint8)
    for bit, (dy, dx) in enumerate(NEIGHBOUR_OFFSETS):
        nb = p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        codes |= (nb >= g).astype(np.uint8) << bit
    return codes


def lbp_histograms(gray, cell):
    """Concatenated 58-bin uniform LBP histograms over ``cell x cell`` tiles."""
    bins = UNIFORM_BINS[lbp_codes(gray)]
    h, w = bins.shape
    ny, nx = h // cell, w // cell
    out = np.zeros((ny, nx, 58), dtype=np.float64)
    tiles = bins[: ny * cell, : nx * cell].reshape(ny, cell, nx, cell).transpose(0, 2, 1, 3)
    tiles = tiles.reshape(ny, nx, cell * cell)
    for i in range(ny):
        for j in range(nx):
            t = tiles[i, j]
            out[i, j] = np.bincount(t[t >= 0], minlength=58)
    return out.reshape(-1)

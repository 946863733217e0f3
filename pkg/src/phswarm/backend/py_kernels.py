"""Pure-Python (NumPy) implementations of the block-structured kernels.

These are the operations where naive per-block Python loops would dominate the
training budget; the NumPy versions vectorize over blocks by padding to the
widest block, which is exact for every kernel here (padded columns are zero and
contribute nothing, or are sliced away). The Cython backend implements the same
signatures with direct C loops.

Conventions:
- matrices are C-contiguous float64 arrays;
- a "column-blocked" matrix stores one block per column range, with boundaries
  given by an int64 ``offsets`` array of length B+1 (strictly increasing,
  offsets[0] == 0, offsets[-1] == total columns);
- a "row-blocked" matrix stacks B equally sized (p, q) blocks into (B*p, q).
"""

import numpy as np

name = "python"


def _padded(x, offsets):
    """Gather a column-blocked matrix into a dense (rows, B, W) pad, zero-filled."""
    widths = np.diff(offsets)
    w = int(widths.max())
    pos = offsets[:-1][:, None] + np.arange(w)[None, :]
    valid = np.arange(w)[None, :] < widths[:, None]
    gathered = x[:, np.where(valid, pos, 0)]
    gathered *= valid[None, :, :]
    return gathered, valid


def bmm_cc_rb(a, b, offsets):
    """Per block: a_blk @ b_blkᵀ, results stacked along rows.

    a: (ra, C), b: (rb, C) column-blocked. Returns (B*ra, rb).
    """
    ap, _ = _padded(a, offsets)
    bp, _ = _padded(b, offsets)
    out = np.einsum("rkw,skw->krs", ap, bp)
    nb = offsets.shape[0] - 1
    return np.ascontiguousarray(out.reshape(nb * a.shape[0], b.shape[0]))


def bmm_rc_cb(s, x, offsets):
    """Per block: s_blk @ x_blk.

    s: (B*p, q) row-blocked, x: (q, C) column-blocked. Returns (p, C).
    """
    nb = offsets.shape[0] - 1
    p = s.shape[0] // nb
    s3 = s.reshape(nb, p, s.shape[1])
    xp, valid = _padded(x, offsets)
    out3 = np.einsum("kpq,qkw->pkw", s3, xp)
    return np.ascontiguousarray(out3.reshape(p, -1)[:, valid.ravel()])


def bmm_rtc_cb(s, x, offsets):
    """Per block: s_blkᵀ @ x_blk.

    s: (B*p, q) row-blocked, x: (p, C) column-blocked. Returns (q, C).
    """
    nb = offsets.shape[0] - 1
    p = s.shape[0] // nb
    s3 = s.reshape(nb, p, s.shape[1])
    xp, valid = _padded(x, offsets)
    out3 = np.einsum("kpq,pkw->qkw", s3, xp)
    return np.ascontiguousarray(out3.reshape(s.shape[1], -1)[:, valid.ravel()])


def block_colsum(x, offsets):
    """Sum the columns within each block: (r, C) -> (r, B)."""
    return np.ascontiguousarray(np.add.reduceat(x, offsets[:-1], axis=1))


def block_repeat(y, offsets):
    """Repeat each block's single column across the block: (r, B) -> (r, C)."""
    return np.ascontiguousarray(np.repeat(y, np.diff(offsets), axis=1))


def gather_cols(x, idx):
    """Select columns by index, duplicates allowed: (r, C) -> (r, len(idx))."""
    return np.ascontiguousarray(x[:, idx])


def scatter_add_cols(g, idx, total):
    """Adjoint of gather_cols: accumulate columns of g into a (r, total) matrix."""
    out = np.zeros((total, g.shape[0]))
    np.add.at(out, idx, g.T)
    return np.ascontiguousarray(out.T)

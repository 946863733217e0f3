"""Dense 2-D float64 math with reverse-mode automatic differentiation.

The engine is a flat tape: every operation appends a node holding its output
value (a C-contiguous float64 matrix), its parents, and whatever metadata its
backward rule needs. ``grad`` walks the tape once in reverse creation order,
so a backward pass is linear in tape length. Calling ``grad`` twice is
idempotent — each call accumulates into its own scratch space and returns
fresh gradients.

Backward rules are written in terms of the public primitives themselves, so
``grad(..., create_graph=True)`` records the backward pass onto the tape and
the returned gradients can be differentiated again by composition. This is how
training differentiates through the learned-energy gradient that appears
inside the control law; no dedicated higher-order machinery exists.

Finiteness policy: operations whose outputs can leave the finite range from
finite inputs (exp, log, div) validate their results and raise
InvariantError; bounded activations and structural ops skip the check for
speed. Leaf creation validates its input.

Tapes are single-threaded objects; distinct tapes may be used from distinct
threads concurrently. Nodes alias the arrays they were created from — do not
mutate a leaf's buffer while its tape is alive.

Hot block-structured kernels (blocked matmuls, gather/scatter over columns,
block reductions) are delegated to the selected ``phswarm.backend``.
"""

import struct

import numpy as np

from . import backend
from .errors import ContractError, DimensionError, InvariantError

_K = backend.active


def _as_matrix(data, copy=False):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    out = np.ascontiguousarray(arr)
    if copy and out is arr and arr is data:
        out = arr.copy()
    return out


class Tensor:
    """Immutable-by-convention 2-D float64 value with a fixed byte layout."""

    __slots__ = ("data",)

    def __init__(self, data, copy=True):
        arr = _as_matrix(data, copy=copy)
        if not np.isfinite(arr).all():
            raise InvariantError("tensor holds non-finite entries")
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def to_bytes(self):
        """Two little-endian uint32 dims followed by row-major float64 values."""
        r, c = self.data.shape
        return struct.pack("<II", r, c) + self.data.astype("<f8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < 8:
            raise DimensionError("tensor buffer shorter than its 8-byte header")
        r, c = struct.unpack_from("<II", buf, 0)
        if len(buf) != 8 + 8 * r * c:
            raise DimensionError(
                f"tensor buffer length {len(buf)} does not match {r}x{c} header"
            )
        data = np.frombuffer(buf, dtype="<f8", count=r * c, offset=8)
        return cls(data.astype(np.float64).reshape(r, c), copy=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Node:
    """One tape entry: an output value plus how to push gradients to parents."""

    __slots__ = ("tape", "value", "op", "parents", "ctx", "requires_grad", "idx")

    def __init__(self, tape, value, op, parents, ctx=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.idx = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def tensor(self):
        return Tensor(self.value, copy=False)

    # Operator sugar; scalars route through the scalar primitives.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, idx={self.idx})"


class Tape:
    """Recording context for one forward (and optionally backward) pass."""

    def __init__(self):
        self.nodes = []
        self.last_grad_visits = 0

    def leaf(self, value, requires_grad=True):
        if isinstance(value, Tensor):
            arr = value.data
        else:
            arr = _as_matrix(value)
            if not np.isfinite(arr).all():
                raise InvariantError("leaf holds non-finite entries")
        return Node(self, arr, "leaf", (), requires_grad=requires_grad)

    def constant(self, value):
        return self.leaf(value, requires_grad=False)

    def __len__(self):
        return len(self.nodes)


def _tape_of(*args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise ContractError("operation needs at least one tape node argument")


def _lift(tape, x):
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ContractError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _unary(op, a, out, ctx=None):
    return Node(a.tape, out, op, (a,), ctx=ctx, requires_grad=a.requires_grad)


def _binary(op, a, b, out, ctx=None):
    rg = a.requires_grad or b.requires_grad
    return Node(a.tape, out, op, (a, b), ctx=ctx, requires_grad=rg)


def _same_shape(a, b, op):
    if a.value.shape != b.value.shape:
        raise DimensionError(
            f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}"
        )


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise InvariantError(f"{op} produced non-finite values")
    return arr


def _sigmoid_arr(x):
    # tanh form is stable for large |x| and raises no overflow warnings
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_arr(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dims differ {a.value.shape} @ {b.value.shape}"
        )
    return _binary("matmul", a, b, a.value @ b.value)


def transpose(a):
    a = _lift(_tape_of(a), a)
    return _unary("transpose", a, np.ascontiguousarray(a.value.T))


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape(a, b, "add")
    return _binary("add", a, b, a.value + b.value)


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape(a, b, "sub")
    return _binary("sub", a, b, a.value - b.value)


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape(a, b, "mul")
    return _binary("mul", a, b, a.value * b.value)


def div(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value
    return _binary("div", a, b, _finite(out, "div"))


def neg(a):
    a = _lift(_tape_of(a), a)
    return _unary("neg", a, -a.value)


def scale(a, c):
    a = _lift(_tape_of(a), a)
    return _unary("scale", a, a.value * float(c), ctx=float(c))


def add_scalar(a, c):
    a = _lift(_tape_of(a), a)
    return _unary("add_scalar", a, a.value + float(c))


def sigmoid(a):
    a = _lift(_tape_of(a), a)
    return _unary("sigmoid", a, _sigmoid_arr(a.value))


def tanh(a):
    a = _lift(_tape_of(a), a)
    return _unary("tanh", a, np.tanh(a.value))


def swish(a):
    a = _lift(_tape_of(a), a)
    return _unary("swish", a, a.value * _sigmoid_arr(a.value))


def softplus(a):
    a = _lift(_tape_of(a), a)
    return _unary("softplus", a, _softplus_arr(a.value))


SOFTPLUS_POSITIVE_EPS = 1e-6


def softplus_positive(a):
    """ln(1 + e^x) + eps: strictly positive, used where PSD assembly needs it."""
    a = _lift(_tape_of(a), a)
    return _unary(
        "softplus_positive", a, _softplus_arr(a.value) + SOFTPLUS_POSITIVE_EPS
    )


def exp(a):
    a = _lift(_tape_of(a), a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _unary("exp", a, _finite(out, "exp"))


def log(a):
    a = _lift(_tape_of(a), a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _unary("log", a, _finite(out, "log"))


def clamp(a, lo, hi):
    a = _lift(_tape_of(a), a)
    mask = ((a.value > lo) & (a.value < hi)).astype(np.float64)
    return _unary("clamp", a, np.clip(a.value, lo, hi), ctx=mask)


def minimum(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape(a, b, "minimum")
    mask = (a.value <= b.value).astype(np.float64)
    return _binary("minimum", a, b, np.minimum(a.value, b.value), ctx=mask)


def softmax_rows(a):
    """Row-wise softmax, stabilized by subtracting each row's max."""
    a = _lift(_tape_of(a), a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return _unary("softmax_rows", a, e / e.sum(axis=1, keepdims=True))


def row_sums(a):
    """Sum across columns: (r, c) -> (r, 1)."""
    a = _lift(_tape_of(a), a)
    return _unary("row_sums", a, a.value.sum(axis=1, keepdims=True))


def tile_cols(a, ncols):
    """Broadcast a column vector across columns: (r, 1) -> (r, ncols)."""
    a = _lift(_tape_of(a), a)
    if a.value.shape[1] != 1:
        raise DimensionError("tile_cols expects a single-column matrix")
    out = np.ascontiguousarray(np.broadcast_to(a.value, (a.value.shape[0], ncols)))
    return _unary("tile_cols", a, out)


def sum_all(a):
    a = _lift(_tape_of(a), a)
    return _unary("sum_all", a, np.array([[a.value.sum()]]))


def mean_all(a):
    a = _lift(_tape_of(a), a)
    r, c = a.value.shape
    return scale(sum_all(a), 1.0 / (r * c))


def slice_rows(a, r0, r1):
    a = _lift(_tape_of(a), a)
    if not (0 <= r0 <= r1 <= a.value.shape[0]):
        raise DimensionError(f"slice_rows [{r0}:{r1}] outside {a.value.shape}")
    return _unary(
        "slice_rows", a, np.ascontiguousarray(a.value[r0:r1]), ctx=(r0, r1)
    )


def pad_rows(a, r0, total):
    """Embed the matrix at row offset r0 inside a zero (total, c) matrix."""
    a = _lift(_tape_of(a), a)
    r, c = a.value.shape
    if r0 + r > total:
        raise DimensionError("pad_rows target is smaller than the content")
    out = np.zeros((total, c))
    out[r0 : r0 + r] = a.value
    return _unary("pad_rows", a, out, ctx=(r0, total))


def concat_rows(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.shape[1] != b.value.shape[1]:
        raise DimensionError("concat_rows: column counts differ")
    out = np.concatenate([a.value, b.value], axis=0)
    return _binary("concat_rows", a, b, out, ctx=a.value.shape[0])


def gather_cols(a, idx):
    a = _lift(_tape_of(a), a)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    return _unary("gather_cols", a, _K.gather_cols(a.value, idx), ctx=idx)


def scatter_add_cols(a, idx, total):
    a = _lift(_tape_of(a), a)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if idx.shape[0] != a.value.shape[1]:
        raise DimensionError("scatter_add_cols: one index per column required")
    out = _K.scatter_add_cols(a.value, idx, total)
    return _unary("scatter_add_cols", a, out, ctx=idx)


def fold_cols(a, group):
    """Stack each group of `group` consecutive columns vertically.

    (r, B*group) -> (group*r, B); column b of the result is the concatenation
    of the group's columns in order. Pure index permutation.
    """
    a = _lift(_tape_of(a), a)
    r, c = a.value.shape
    if c % group:
        raise DimensionError("fold_cols: columns not divisible by group")
    nb = c // group
    out = np.ascontiguousarray(
        a.value.reshape(r, nb, group).transpose(2, 0, 1).reshape(group * r, nb)
    )
    return _unary("fold_cols", a, out, ctx=group)


def unfold_cols(a, group):
    """Inverse of fold_cols: (group*r, B) -> (r, B*group)."""
    a = _lift(_tape_of(a), a)
    gr, nb = a.value.shape
    if gr % group:
        raise DimensionError("unfold_cols: rows not divisible by group")
    r = gr // group
    out = np.ascontiguousarray(
        a.value.reshape(group, r, nb).transpose(1, 2, 0).reshape(r, nb * group)
    )
    return _unary("unfold_cols", a, out, ctx=group)


def _check_offsets(offsets, total):
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if offsets[0] != 0 or offsets[-1] != total or np.any(np.diff(offsets) <= 0):
        raise DimensionError("offsets must strictly cover all columns")
    return offsets


def bmm_cc_rb(a, b, offsets):
    """Per column-block: a_blk @ b_blkᵀ, stacked along rows: -> (B*ra, rb)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.shape[1] != b.value.shape[1]:
        raise DimensionError("bmm_cc_rb: column counts differ")
    offsets = _check_offsets(offsets, a.value.shape[1])
    return _binary("bmm_cc_rb", a, b, _K.bmm_cc_rb(a.value, b.value, offsets), ctx=offsets)


def bmm_rc_cb(s, x, offsets):
    """Per block: s_blk @ x_blk with s row-blocked (B*p, q), x column-blocked."""
    tape = _tape_of(s, x)
    s, x = _lift(tape, s), _lift(tape, x)
    offsets = _check_offsets(offsets, x.value.shape[1])
    nb = offsets.shape[0] - 1
    if s.value.shape[0] % nb:
        raise DimensionError("bmm_rc_cb: row blocks do not divide evenly")
    return _binary("bmm_rc_cb", s, x, _K.bmm_rc_cb(s.value, x.value, offsets), ctx=offsets)


def bmm_rtc_cb(s, x, offsets):
    """Per block: s_blkᵀ @ x_blk with s row-blocked (B*p, q), x column-blocked."""
    tape = _tape_of(s, x)
    s, x = _lift(tape, s), _lift(tape, x)
    offsets = _check_offsets(offsets, x.value.shape[1])
    nb = offsets.shape[0] - 1
    if s.value.shape[0] % nb:
        raise DimensionError("bmm_rtc_cb: row blocks do not divide evenly")
    return _binary("bmm_rtc_cb", s, x, _K.bmm_rtc_cb(s.value, x.value, offsets), ctx=offsets)


def block_colsum(a, offsets):
    """Sum columns within each block: (r, C) -> (r, B)."""
    a = _lift(_tape_of(a), a)
    offsets = _check_offsets(offsets, a.value.shape[1])
    return _unary("block_colsum", a, _K.block_colsum(a.value, offsets), ctx=offsets)


def block_repeat(a, offsets):
    """Repeat block b's column across block b's width: (r, B) -> (r, C)."""
    a = _lift(_tape_of(a), a)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if a.value.shape[1] != offsets.shape[0] - 1:
        raise DimensionError("block_repeat: one input column per block required")
    return _unary("block_repeat", a, _K.block_repeat(a.value, offsets), ctx=offsets)


# ---------------------------------------------------------------------------
# backward rules
#
# Each rule receives (node, upstream gradient, K) and returns (parent, grad)
# pairs for parents that require gradients. K is either this module (when the
# backward pass is recorded for differentiation through gradients) or the raw
# numpy namespace below; rules are written once against that common surface.


class _RawOps:
    """Array-level mirror of the primitives used inside backward rules."""

    @staticmethod
    def _v(x):
        return x.value if isinstance(x, Node) else x

    def constant(self, x):
        return self._v(x)

    def matmul(self, a, b):
        return self._v(a) @ self._v(b)

    def transpose(self, a):
        return np.ascontiguousarray(self._v(a).T)

    def add(self, a, b):
        return self._v(a) + self._v(b)

    def sub(self, a, b):
        return self._v(a) - self._v(b)

    def mul(self, a, b):
        return self._v(a) * self._v(b)

    def div(self, a, b):
        return self._v(a) / self._v(b)

    def neg(self, a):
        return -self._v(a)

    def scale(self, a, c):
        return self._v(a) * c

    def add_scalar(self, a, c):
        return self._v(a) + c

    def sigmoid(self, a):
        return _sigmoid_arr(self._v(a))

    def row_sums(self, a):
        return self._v(a).sum(axis=1, keepdims=True)

    def tile_cols(self, a, ncols):
        v = self._v(a)
        return np.ascontiguousarray(np.broadcast_to(v, (v.shape[0], ncols)))

    def slice_rows(self, a, r0, r1):
        return np.ascontiguousarray(self._v(a)[r0:r1])

    def pad_rows(self, a, r0, total):
        v = self._v(a)
        out = np.zeros((total, v.shape[1]))
        out[r0 : r0 + v.shape[0]] = v
        return out

    def gather_cols(self, a, idx):
        return _K.gather_cols(self._v(a), idx)

    def scatter_add_cols(self, a, idx, total):
        return _K.scatter_add_cols(self._v(a), idx, total)

    def fold_cols(self, a, group):
        v = self._v(a)
        r, c = v.shape
        nb = c // group
        return np.ascontiguousarray(
            v.reshape(r, nb, group).transpose(2, 0, 1).reshape(group * r, nb)
        )

    def unfold_cols(self, a, group):
        v = self._v(a)
        r = v.shape[0] // group
        nb = v.shape[1]
        return np.ascontiguousarray(
            v.reshape(group, r, nb).transpose(1, 2, 0).reshape(r, nb * group)
        )

    def bmm_cc_rb(self, a, b, offsets):
        return _K.bmm_cc_rb(self._v(a), self._v(b), offsets)

    def bmm_rc_cb(self, s, x, offsets):
        return _K.bmm_rc_cb(self._v(s), self._v(x), offsets)

    def bmm_rtc_cb(self, s, x, offsets):
        return _K.bmm_rtc_cb(self._v(s), self._v(x), offsets)

    def block_colsum(self, a, offsets):
        return _K.block_colsum(self._v(a), offsets)

    def block_repeat(self, a, offsets):
        return _K.block_repeat(self._v(a), offsets)


class _GraphOps:
    """Node-level surface: records the backward computation onto the tape."""

    def __init__(self, tape):
        self.tape = tape

    def constant(self, x):
        if isinstance(x, Node):
            return x
        return self.tape.constant(x)

    def __getattr__(self, item):
        fn = globals()[item]

        def call(*args, **kwargs):
            return fn(*args, **kwargs)

        return call


def _bw_matmul(node, g, K):
    a, b = node.parents
    out = []
    if a.requires_grad:
        out.append((a, K.matmul(g, K.transpose(b))))
    if b.requires_grad:
        out.append((b, K.matmul(K.transpose(a), g)))
    return out


def _bw_transpose(node, g, K):
    return [(node.parents[0], K.transpose(g))]


def _bw_add(node, g, K):
    a, b = node.parents
    out = []
    if a.requires_grad:
        out.append((a, g))
    if b.requires_grad:
        out.append((b, g))
    return out


def _bw_sub(node, g, K):
    a, b = node.parents
    out = []
    if a.requires_grad:
        out.append((a, g))
    if b.requires_grad:
        out.append((b, K.neg(g)))
    return out


def _bw_mul(node, g, K):
    a, b = node.parents
    out = []
    if a.requires_grad:
        out.append((a, K.mul(g, b)))
    if b.requires_grad:
        out.append((b, K.mul(g, a)))
    return out


def _bw_div(node, g, K):
    a, b = node.parents
    out = []
    if a.requires_grad:
        out.append((a, K.div(g, b)))
    if b.requires_grad:
        out.append((b, K.neg(K.div(K.mul(g, node), b))))
    return out


def _bw_neg(node, g, K):
    return [(node.parents[0], K.neg(g))]


def _bw_scale(node, g, K):
    return [(node.parents[0], K.scale(g, node.ctx))]


def _bw_add_scalar(node, g, K):
    return [(node.parents[0], g)]


def _bw_sigmoid(node, g, K):
    # s' = s (1 - s), with s the saved output
    s = node
    return [(node.parents[0], K.mul(g, K.mul(s, K.add_scalar(K.neg(s), 1.0))))]


def _bw_tanh(node, g, K):
    t = node
    return [(node.parents[0], K.mul(g, K.add_scalar(K.neg(K.mul(t, t)), 1.0)))]


def _bw_swish(node, g, K):
    x = node.parents[0]
    s = K.sigmoid(x)
    inner = K.add_scalar(K.mul(x, K.add_scalar(K.neg(s), 1.0)), 1.0)
    return [(x, K.mul(g, K.mul(s, inner)))]


def _bw_softplus(node, g, K):
    x = node.parents[0]
    return [(x, K.mul(g, K.sigmoid(x)))]


def _bw_exp(node, g, K):
    return [(node.parents[0], K.mul(g, node))]


def _bw_log(node, g, K):
    return [(node.parents[0], K.div(g, node.parents[0]))]


def _bw_clamp(node, g, K):
    return [(node.parents[0], K.mul(g, K.constant(node.ctx)))]


def _bw_minimum(node, g, K):
    a, b = node.parents
    mask = node.ctx
    out = []
    if a.requires_grad:
        out.append((a, K.mul(g, K.constant(mask))))
    if b.requires_grad:
        out.append((b, K.mul(g, K.constant(1.0 - mask))))
    return out


def _bw_softmax_rows(node, g, K):
    s = node
    gs = K.mul(g, s)
    corr = K.tile_cols(K.row_sums(gs), node.value.shape[1])
    return [(node.parents[0], K.sub(gs, K.mul(s, corr)))]


def _bw_row_sums(node, g, K):
    return [(node.parents[0], K.tile_cols(g, node.parents[0].value.shape[1]))]


def _bw_tile_cols(node, g, K):
    return [(node.parents[0], K.row_sums(g))]


def _bw_sum_all(node, g, K):
    r, c = node.parents[0].value.shape
    ones_col = K.constant(np.ones((r, 1)))
    return [(node.parents[0], K.matmul(ones_col, K.tile_cols(g, c)))]


def _bw_slice_rows(node, g, K):
    r0, _ = node.ctx
    return [(node.parents[0], K.pad_rows(g, r0, node.parents[0].value.shape[0]))]


def _bw_pad_rows(node, g, K):
    r0, _ = node.ctx
    rows = node.parents[0].value.shape[0]
    return [(node.parents[0], K.slice_rows(g, r0, r0 + rows))]


def _bw_concat_rows(node, g, K):
    a, b = node.parents
    split = node.ctx
    out = []
    if a.requires_grad:
        out.append((a, K.slice_rows(g, 0, split)))
    if b.requires_grad:
        out.append((b, K.slice_rows(g, split, node.value.shape[0])))
    return out


def _bw_gather_cols(node, g, K):
    parent = node.parents[0]
    return [(parent, K.scatter_add_cols(g, node.ctx, parent.value.shape[1]))]


def _bw_scatter_add_cols(node, g, K):
    return [(node.parents[0], K.gather_cols(g, node.ctx))]


def _bw_fold_cols(node, g, K):
    return [(node.parents[0], K.unfold_cols(g, node.ctx))]


def _bw_unfold_cols(node, g, K):
    return [(node.parents[0], K.fold_cols(g, node.ctx))]


def _bw_bmm_cc_rb(node, g, K):
    a, b = node.parents
    offsets = node.ctx
    out = []
    if a.requires_grad:
        out.append((a, K.bmm_rc_cb(g, b, offsets)))
    if b.requires_grad:
        out.append((b, K.bmm_rtc_cb(g, a, offsets)))
    return out


def _bw_bmm_rc_cb(node, g, K):
    s, x = node.parents
    offsets = node.ctx
    out = []
    if s.requires_grad:
        out.append((s, K.bmm_cc_rb(g, x, offsets)))
    if x.requires_grad:
        out.append((x, K.bmm_rtc_cb(s, g, offsets)))
    return out


def _bw_bmm_rtc_cb(node, g, K):
    s, x = node.parents
    offsets = node.ctx
    out = []
    if s.requires_grad:
        out.append((s, K.bmm_cc_rb(x, g, offsets)))
    if x.requires_grad:
        out.append((x, K.bmm_rc_cb(s, g, offsets)))
    return out


def _bw_block_colsum(node, g, K):
    return [(node.parents[0], K.block_repeat(g, node.ctx))]


def _bw_block_repeat(node, g, K):
    return [(node.parents[0], K.block_colsum(g, node.ctx))]


_BACKWARD = {
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "neg": _bw_neg,
    "scale": _bw_scale,
    "add_scalar": _bw_add_scalar,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "swish": _bw_swish,
    "softplus": _bw_softplus,
    "softplus_positive": _bw_softplus,
    "exp": _bw_exp,
    "log": _bw_log,
    "clamp": _bw_clamp,
    "minimum": _bw_minimum,
    "softmax_rows": _bw_softmax_rows,
    "row_sums": _bw_row_sums,
    "tile_cols": _bw_tile_cols,
    "sum_all": _bw_sum_all,
    "slice_rows": _bw_slice_rows,
    "pad_rows": _bw_pad_rows,
    "concat_rows": _bw_concat_rows,
    "gather_cols": _bw_gather_cols,
    "scatter_add_cols": _bw_scatter_add_cols,
    "fold_cols": _bw_fold_cols,
    "unfold_cols": _bw_unfold_cols,
    "bmm_cc_rb": _bw_bmm_cc_rb,
    "bmm_rc_cb": _bw_bmm_rc_cb,
    "bmm_rtc_cb": _bw_bmm_rtc_cb,
    "block_colsum": _bw_block_colsum,
    "block_repeat": _bw_block_repeat,
}

_RAW = _RawOps()


def grad(root, wrt, create_graph=False):
    """Reverse-mode gradients of a scalar root with respect to tape nodes.

    Returns one gradient per entry of ``wrt`` (zeros for unreachable leaves):
    Tensor values by default, or tape nodes when ``create_graph`` is set so
    the result can itself be differentiated. The sweep visits each reachable
    node exactly once; repeated calls are independent and return equal values.
    """
    if not isinstance(root, Node):
        raise ContractError("grad root must be a tape node")
    if root.value.shape != (1, 1):
        raise ContractError(f"grad root must be scalar, got shape {root.value.shape}")
    tape = root.tape
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, Node) or w.tape is not tape:
            raise ContractError("grad targets must be nodes of the root's tape")
        if not w.requires_grad:
            raise ContractError("grad target was created with requires_grad=False")

    K = _GraphOps(tape) if create_graph else _RAW

    def _result(value_or_node):
        if create_graph:
            return value_or_node
        return Tensor(value_or_node, copy=False)

    def _zero(w):
        z = np.zeros(w.value.shape)
        return tape.constant(z) if create_graph else Tensor(z, copy=False)

    if not root.requires_grad:
        tape.last_grad_visits = 0
        return [_zero(w) for w in wrt]

    # Restrict the sweep to ancestors of the root that matter for gradients.
    reachable = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if node.idx in reachable:
            continue
        reachable.add(node.idx)
        for p in node.parents:
            if p.requires_grad and p.idx not in reachable:
                stack.append(p)

    seed = np.ones((1, 1))
    adjoint = {root.idx: tape.constant(seed) if create_graph else seed}
    visits = 0
    for idx in range(root.idx, -1, -1):
        if idx not in adjoint or idx not in reachable:
            continue
        node = tape.nodes[idx]
        visits += 1
        if not node.parents:
            continue
        g = adjoint[idx]
        for parent, gp in _BACKWARD[node.op](node, g, K):
            prev = adjoint.get(parent.idx)
            adjoint[parent.idx] = gp if prev is None else K.add(prev, gp)
    tape.last_grad_visits = visits

    return [_result(adjoint[w.idx]) if w.idx in adjoint else _zero(w) for w in wrt]

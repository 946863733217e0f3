"""Attention-parameterized port-Hamiltonian control policies.

A single parameter set (shared by every robot) defines five self-attention
stacks: two that encode the closed-loop interconnection and damping blocks
J_θ and R_θ, two that encode the learned energy H_θ (kinetic and potential
parts), and one that outputs the exploration standard deviations. Each robot
runs the stacks on its neighborhood view (its own state plus its k-hop
neighbors' states, one column per member in ascending id order), so parameter
shapes never depend on the team size.

The deterministic control is the energy-shaping law

    μ^i = (F^i)† ( Σ_{j∈N} ([J_θ]_{ij} − [R_θ]_{ij}) ∂H_θ/∂x^j
                   − (J^i − R^i) ∂H^i/∂x^i ),

where ∂H_θ/∂x^j gathers every neighborhood energy that x^j enters. The
stochastic policy squashes a Gaussian around μ through tanh.

The batched entry point ``policy_step`` evaluates whole batches of teams on
one tape: all neighborhood views are concatenated column-wise and the
block-structured kernels keep the op count independent of both batch size
and team size. Everything here runs on the autodiff tape so the control can
be differentiated end to end, including through ∂H_θ/∂x (a recorded backward
pass).

Damping assembly follows a weighted-Laplacian pattern: off-diagonal blocks
are −(Z^R_ij + Z^R_ji) and diagonal blocks add back the same mass plus the
robot's own encoding, which makes the dense R_θ symmetric diagonally dominant
with nonnegative diagonal, hence PSD; the R-stack's final activation is
strictly positive to keep the off-diagonal mass nonnegative. J_θ blocks are
antisymmetrized pairwise, so J_θ is skew exactly, in floating point, by
construction.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    ContractError,
    DimensionError,
    InvariantError,
    MatchingError,
)
from .graphs import k_hop

SIGMA_MIN = math.exp(-5.0)
SIGMA_MAX = math.exp(2.0)
LOG_2PI = math.log(2.0 * math.pi)
COND_LIMIT = 1e12

_ACTIVATIONS = {
    "sigmoid": ad.sigmoid,
    "swish": ad.swish,
    "softplus_positive": ad.softplus_positive,
}


@dataclass
class AttentionStackParams:
    """One stack: per layer the projection triplet (A, B, C) and readout D."""

    name: str
    h_dims: tuple
    r_dims: tuple
    d_dims: tuple
    beta: str
    chi: str
    psis: tuple  # per-layer output activation
    layers: list  # dicts with keys A, B, C, D

    @property
    def n_layers(self):
        return len(self.layers)

    def items(self):
        for w, layer in enumerate(self.layers):
            for role in ("A", "B", "C", "D"):
                yield f"{self.name}/{w}/{role}", layer[role]


def _init_stack(rng, name, h_dims, r_dims, d_dims, beta, chi, psis):
    layers = []
    for h, r, d in zip(h_dims, r_dims, d_dims):
        bound = 1.0 / math.sqrt(h)
        layers.append(
            {
                "A": rng.uniform(-bound, bound, size=(r, h)),
                "B": rng.uniform(-bound, bound, size=(r, h)),
                "C": rng.uniform(-bound, bound, size=(r, h)),
                "D": rng.uniform(-bound, bound, size=(d, r)),
            }
        )
    return AttentionStackParams(
        name=name,
        h_dims=tuple(h_dims),
        r_dims=tuple(r_dims),
        d_dims=tuple(d_dims),
        beta=beta,
        chi=chi,
        psis=tuple(psis),
        layers=layers,
    )


@dataclass
class PolicyParams:
    """Shared parameters for the whole team plus scalar policy config."""

    n_x: int
    n_u: int
    k: int
    action_bound: float
    stacks: dict  # name -> AttentionStackParams, names R, J, M, U, VAR
    ham_dim: int = 25

    def items(self):
        for name in ("R", "J", "M", "U", "VAR"):
            yield from self.stacks[name].items()

    def n_parameters(self):
        return sum(arr.size for _, arr in self.items())


def init_policy(seed_or_rng, n_x, n_u, k=1, ham_dim=25, action_bound=1.0):
    """Fresh policy parameters; layer dims follow the reference architecture."""
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    stacks = {
        "R": _init_stack(
            rng, "R", (n_x, 16, 8), (8, 16, 8), (16, 8, n_x),
            "sigmoid", "swish", ("swish", "swish", "softplus_positive"),
        ),
        "J": _init_stack(
            rng, "J", (n_x, 16, 8), (8, 16, 8), (16, 8, n_x),
            "sigmoid", "swish", ("swish", "swish", "swish"),
        ),
        "M": _init_stack(
            rng, "M", (n_x, 16, 8), (16, 8, 8), (16, 8, ham_dim),
            "sigmoid", "swish", ("swish", "swish", "swish"),
        ),
        "U": _init_stack(
            rng, "U", (n_x, 16, 8), (16, 8, 8), (16, 8, ham_dim),
            "sigmoid", "swish", ("swish", "swish", "swish"),
        ),
        "VAR": _init_stack(
            rng, "VAR", (n_x + n_u, 16, 8), (8, 16, 8), (16, 8, n_u),
            "sigmoid", "swish", ("swish", "swish", "swish"),
        ),
    }
    return PolicyParams(
        n_x=n_x, n_u=n_u, k=k, action_bound=action_bound,
        stacks=stacks, ham_dim=ham_dim,
    )


@dataclass(frozen=True)
class NeighborhoodView:
    """What one robot sees: itself plus its k-hop neighbors, id-ordered."""

    owner: int
    ids: np.ndarray  # ascending, includes owner
    x: np.ndarray  # n_x × |ids|, column per member

    def __post_init__(self):
        if self.owner not in self.ids:
            raise ContractError("neighborhood view must contain its owner")
        if self.x.shape[1] != len(self.ids):
            raise DimensionError("one state column per neighborhood member required")


def build_views(x, graph, k):
    """Neighborhood views for every robot of one team state (n × n_x rows)."""
    x = np.asarray(x, dtype=np.float64)
    views = []
    for i in range(graph.n):
        ids = k_hop(graph, i, k)
        views.append(
            NeighborhoodView(owner=i, ids=ids, x=np.ascontiguousarray(x[ids].T))
        )
    return views


# ---------------------------------------------------------------------------
# batched layout


@dataclass
class BatchLayout:
    """Column bookkeeping for a batch of teams evaluated on one tape.

    Views are ordered environment-major then robot-major, so view b is robot
    (b mod n) of environment (b div n) and global state column b. All index
    arrays refer to the concatenated view columns.
    """

    n_envs: int
    n: int
    widths: np.ndarray
    offsets: np.ndarray  # view column offsets, len B*n + 1
    idx_view: np.ndarray  # global state column of each view column
    pair_idx: np.ndarray  # view column of the mirrored (member, owner) entry
    owner_pos: np.ndarray  # view column where each view's owner sits
    owner_mask: np.ndarray  # 1 × total, indicator of owner columns
    member_owner_col: np.ndarray  # global column of the view owner, per view column
    env_offsets: np.ndarray  # robot-column offsets per environment
    _scale_cache: dict = field(default_factory=dict)

    @property
    def total(self):
        return int(self.offsets[-1])

    def attn_scale(self, r):
        """Per-block 1/√|N| mask shaped like the row-blocked score matrix."""
        got = self._scale_cache.get(r)
        if got is None:
            per_block = 1.0 / np.sqrt(self.widths.astype(np.float64))
            col = np.repeat(per_block, r).reshape(-1, 1)
            got = np.ascontiguousarray(np.broadcast_to(col, (col.shape[0], r)))
            self._scale_cache[r] = got
        return got


def build_layout(adjacency, k):
    """Index arrays from a batch of adjacency matrices (B × n × n)."""
    adj = np.asarray(adjacency)
    if adj.ndim == 2:
        adj = adj[None]
    n_envs, n, n2 = adj.shape
    if n != n2:
        raise DimensionError("adjacency batch must be B x n x n")
    reach = np.broadcast_to(np.eye(n, dtype=bool), (n_envs, n, n)).copy()
    a_bool = adj != 0
    for _ in range(k):
        new = (reach.astype(np.int64) @ a_bool.astype(np.int64)) > 0
        if not (new & ~reach).any():
            break
        reach |= new

    b_idx, i_idx, j_idx = np.nonzero(reach)
    total = b_idx.size
    widths = reach.sum(axis=2).reshape(-1).astype(np.int64)
    offsets = np.zeros(n_envs * n + 1, dtype=np.int64)
    np.cumsum(widths, out=offsets[1:])
    pos = np.full((n_envs, n, n), -1, dtype=np.int64)
    pos[b_idx, i_idx, j_idx] = np.arange(total, dtype=np.int64)
    pair_idx = pos[b_idx, j_idx, i_idx]
    if pair_idx.min() < 0:
        raise InvariantError("k-hop reachability lost its symmetry")
    rng_n = np.arange(n)
    owner_pos = pos[:, rng_n, rng_n].reshape(-1)
    owner_mask = np.zeros((1, total))
    owner_mask[0, owner_pos] = 1.0
    return BatchLayout(
        n_envs=n_envs,
        n=n,
        widths=widths,
        offsets=offsets,
        idx_view=(b_idx * n + j_idx).astype(np.int64),
        pair_idx=pair_idx.astype(np.int64),
        owner_pos=owner_pos.astype(np.int64),
        owner_mask=owner_mask,
        member_owner_col=(b_idx * n + i_idx).astype(np.int64),
        env_offsets=np.arange(0, n_envs * n + 1, n, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# stack forward pass (batched, on-tape)


def _stack_forward(stack, leaves, X, layout, tape):
    act_beta = _ACTIVATIONS[stack.beta]
    act_chi = _ACTIVATIONS[stack.chi]
    for w in range(stack.n_layers):
        A = leaves[f"{stack.name}/{w}/A"]
        B = leaves[f"{stack.name}/{w}/B"]
        C = leaves[f"{stack.name}/{w}/C"]
        D = leaves[f"{stack.name}/{w}/D"]
        bq = act_beta(ad.matmul(A, X))
        bk = act_beta(ad.matmul(B, X))
        bv = act_beta(ad.matmul(C, X))
        scores = ad.bmm_cc_rb(bq, bk, layout.offsets)
        scores = ad.mul(scores, tape.constant(layout.attn_scale(stack.r_dims[w])))
        mixed = ad.bmm_rc_cb(ad.softmax_rows(scores), bv, layout.offsets)
        X = _ACTIVATIONS[stack.psis[w]](ad.matmul(D, act_chi(mixed)))
    return X


def _param_leaves(params, tape, requires_grad):
    return {name: tape.leaf(arr, requires_grad=requires_grad)
            for name, arr in params.items()}


def _hamiltonian_terms(z_m, z_u, x_view, n_x):
    """Wire the kinetic/potential encodings into one scalar energy.

    The kinetic diagonal for each view column is the group-sum of the first
    ⌊d/n_x⌋·n_x rows of the kinetic encoding, passed through softplus so the
    quadratic term is nonnegative for every state (positive masses — this is
    also what makes the assembled dissipation act as true damping). The
    potential is the plain sum of all potential-encoding entries. This wiring
    is the single place to change if a different readout of the d-dimensional
    encoding is wanted.
    """
    d = z_m.value.shape[0]
    groups = d // n_x
    if groups < 1:
        raise DimensionError("kinetic encoding narrower than the state dim")
    tape = z_m.tape
    fold = np.tile(np.eye(n_x), (1, groups))
    diag = ad.softplus(
        ad.matmul(tape.constant(fold), ad.slice_rows(z_m, 0, groups * n_x))
    )
    kinetic = ad.sum_all(ad.mul(diag, ad.mul(x_view, x_view)))
    potential = ad.sum_all(z_u)
    return ad.add(kinetic, potential), diag


def _per_view_scalars(mat, layout):
    """Sum a (rows × total) view matrix into one scalar per view: (1 × B·n)."""
    tape = mat.tape
    ones = tape.constant(np.ones((1, mat.value.shape[0])))
    return ad.matmul(ones, ad.block_colsum(mat, layout.offsets))


# ---------------------------------------------------------------------------
# model-side constants


def _model_constants(model):
    """Per-robot pseudo-inverse of F and the open-loop flow matrix.

    Requires constant structure matrices and a linear energy gradient, which
    covers every model this package ships; the matching law itself is exact
    for any such model.
    """
    pinvs, flows = [], []
    for rm in model.models:
        if not rm.is_constant() or rm.dH_lin is None:
            raise ContractError(
                "batched control needs constant J, R, F and a linear energy gradient"
            )
        F = rm.F_const
        gram = F.T @ F
        if not np.isfinite(np.linalg.cond(gram)) or np.linalg.cond(gram) > COND_LIMIT:
            raise MatchingError("input gain F is rank deficient; cannot match")
        pinvs.append(np.linalg.solve(gram, F.T))
        flows.append((rm.J_const - rm.R_const) @ rm.dH_lin)
    same = all(np.array_equal(pinvs[0], p) for p in pinvs[1:]) and all(
        np.array_equal(flows[0], f) for f in flows[1:]
    )
    return pinvs, flows, same


def _open_loop_cols(model, x_cols, flows, homogeneous):
    """(J − R) ∂H/∂x for every robot column of the batch."""
    if homogeneous:
        return flows[0] @ x_cols
    n = model.n
    out = np.empty((model.n_x, x_cols.shape[1]))
    for i, fl in enumerate(flows):
        cols = np.arange(i, x_cols.shape[1], n)
        out[:, cols] = fl @ x_cols[:, cols]
    return out


# ---------------------------------------------------------------------------
# batched policy evaluation


@dataclass
class PolicyStep:
    """Everything one batched policy evaluation produced, still on its tape."""

    tape: ad.Tape
    layout: BatchLayout
    mu: ad.Node  # n_u × B·n, pre-squash mean control
    sigma: ad.Node  # n_u × B·n
    action: ad.Node  # n_u × B·n, tanh-squashed
    log_pi_robot: ad.Node  # 1 × B·n (None in deterministic mode)
    log_pi_env: ad.Node  # 1 × B (None in deterministic mode)
    h_total: ad.Node  # scalar, Σ_i H^i over the whole batch
    param_leaves: dict
    x_leaf: ad.Node

    def actions_matrix(self):
        """Actions as (B, n, n_u) numpy."""
        a = self.action.value
        n_u = a.shape[0]
        return a.T.reshape(self.layout.n_envs, self.layout.n, n_u)


def policy_step(
    params,
    model,
    states,
    adjacency,
    rng=None,
    deterministic=False,
    create_graph=False,
    layout=None,
):
    """Evaluate the policy for a batch of team states on one tape.

    states: (B, n, n_x) or (n, n_x); adjacency matching. When deterministic,
    the action is tanh(μ) and no log-probabilities are produced; otherwise
    rng drives the Gaussian draw. With create_graph=True the whole pipeline
    (including the energy-gradient computation) stays differentiable with
    respect to the parameter leaves.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    n_envs, n, n_x = states.shape
    if n_x != params.n_x:
        raise DimensionError(f"state dim {n_x} != policy n_x {params.n_x}")
    if n != model.n or n_x != model.n_x:
        raise DimensionError("model and state batch disagree on team shape")
    if model.n_u != params.n_u:
        raise DimensionError(
            f"model input dim {model.n_u} != policy n_u {params.n_u}"
        )
    if layout is None:
        layout = build_layout(adjacency, params.k)
    if layout.n_envs != n_envs or layout.n != n:
        raise DimensionError("layout does not match the state batch")

    pinvs, flows, homogeneous = _model_constants(model)
    x_cols = np.ascontiguousarray(states.reshape(n_envs * n, n_x).T)

    tape = ad.Tape()
    leaves = _param_leaves(params, tape, requires_grad=create_graph)
    x_leaf = tape.leaf(x_cols, requires_grad=True)
    xv = ad.gather_cols(x_leaf, layout.idx_view)

    z_r = _stack_forward(params.stacks["R"], leaves, xv, layout, tape)
    z_j = _stack_forward(params.stacks["J"], leaves, xv, layout, tape)
    if z_r.value.min() <= 0.0:
        raise InvariantError("damping encodings must be strictly positive")
    z_m = _stack_forward(params.stacks["M"], leaves, xv, layout, tape)
    z_u = _stack_forward(params.stacks["U"], leaves, xv, layout, tape)
    h_total, _ = _hamiltonian_terms(z_m, z_u, xv, n_x)

    (g_h,) = ad.grad(h_total, [x_leaf], create_graph=create_graph)
    if not create_graph:
        g_h = tape.constant(g_h.data)

    # per-column closed-loop weights: the diagonal of ([J_θ]_ij − [R_θ]_ij)
    own_full = np.ascontiguousarray(
        np.broadcast_to(layout.owner_mask, (n_x, layout.total))
    )
    own = tape.constant(own_full)
    other = tape.constant(1.0 - own_full)
    z_rp = ad.gather_cols(z_r, layout.pair_idx)
    z_jp = ad.gather_cols(z_j, layout.pair_idx)
    pair_sum = ad.add(z_r, z_rp)
    w_other = ad.add(ad.sub(z_j, z_jp), pair_sum)
    col_mass = ad.block_repeat(ad.block_colsum(pair_sum, layout.offsets), layout.offsets)
    w_owner = ad.sub(z_r, col_mass)
    n_u = params.n_u
    w_cols = ad.add(ad.mul(own, w_owner), ad.mul(other, w_other))

    shaped = ad.block_colsum(ad.mul(w_cols, ad.gather_cols(g_h, layout.idx_view)),
                             layout.offsets)
    open_loop = tape.constant(_open_loop_cols(model, x_cols, flows, homogeneous))
    pre = ad.sub(shaped, open_loop)

    if homogeneous:
        mu = ad.matmul(tape.constant(pinvs[0]), pre)
    else:
        total_cols = n_envs * n
        mu = None
        for i, pv in enumerate(pinvs):
            cols = np.arange(i, total_cols, n, dtype=np.int64)
            part = ad.scatter_add_cols(
                ad.matmul(tape.constant(pv), ad.gather_cols(pre, cols)),
                cols, total_cols,
            )
            mu = part if mu is None else ad.add(mu, part)

    # variance network sees each member's state plus the owner's mean action
    a_mean = ad.tanh(mu)
    owner_actions = ad.gather_cols(a_mean, layout.member_owner_col)
    var_in = ad.concat_rows(xv, owner_actions)
    z_var = _stack_forward(params.stacks["VAR"], leaves, var_in, layout, tape)
    sigma = ad.clamp(ad.gather_cols(z_var, layout.owner_pos), SIGMA_MIN, SIGMA_MAX)

    if deterministic:
        return PolicyStep(
            tape=tape, layout=layout, mu=mu, sigma=sigma, action=a_mean,
            log_pi_robot=None, log_pi_env=None, h_total=h_total,
            param_leaves=leaves, x_leaf=x_leaf,
        )

    if rng is None:
        raise ContractError("stochastic policy evaluation needs an rng")
    xi = rng.standard_normal(size=(n_u, n_envs * n))
    u = ad.add(mu, ad.mul(sigma, tape.constant(xi)))
    action = ad.tanh(u)
    gauss_const = tape.constant(-0.5 * xi * xi - 0.5 * LOG_2PI * np.ones_like(xi))
    per_dim = ad.add(ad.neg(ad.log(sigma)), gauss_const)
    tanh_corr = ad.add_scalar(
        ad.scale(ad.add(u, ad.softplus(ad.scale(u, -2.0))), 2.0),
        -2.0 * math.log(2.0),
    )
    per_dim = ad.add(per_dim, tanh_corr)
    ones_u = tape.constant(np.ones((1, n_u)))
    log_pi_robot = ad.matmul(ones_u, per_dim)
    log_pi_env = ad.block_colsum(log_pi_robot, layout.env_offsets)
    return PolicyStep(
        tape=tape, layout=layout, mu=mu, sigma=sigma, action=action,
        log_pi_robot=log_pi_robot, log_pi_env=log_pi_env, h_total=h_total,
        param_leaves=leaves, x_leaf=x_leaf,
    )


# ---------------------------------------------------------------------------
# per-view operations (spec-level surface; also what the protocol exchanges)


def _view_nodes(stack_params_list, view, requires_grad_x=False):
    """Run stacks on one view; returns (tape, x node, dict of outputs)."""
    tape = ad.Tape()
    width = view.x.shape[1]
    # a one-view layout: single block covering all columns
    layout = BatchLayout(
        n_envs=1,
        n=1,
        widths=np.array([width], dtype=np.int64),
        offsets=np.array([0, width], dtype=np.int64),
        idx_view=np.arange(width, dtype=np.int64),
        pair_idx=np.arange(width, dtype=np.int64),
        owner_pos=np.array([int(np.searchsorted(view.ids, view.owner))], dtype=np.int64),
        owner_mask=np.zeros((1, width)),
        member_owner_col=np.zeros(width, dtype=np.int64),
        env_offsets=np.array([0, 1], dtype=np.int64),
    )
    x = tape.leaf(view.x, requires_grad=requires_grad_x)
    outs = {}
    for sp in stack_params_list:
        leaves = {name: tape.leaf(arr, requires_grad=False) for name, arr in sp.items()}
        outs[sp.name] = _stack_forward(sp, leaves, x, layout, tape)
    return tape, x, outs


def attention_stack_forward(stack_params, view):
    """One stack on one neighborhood view; returns d_W × |N| features."""
    if view.x.shape[1] == 0:
        raise ContractError("neighborhood view must be nonempty")
    if view.x.shape[0] != stack_params.h_dims[0]:
        raise DimensionError(
            f"view feature dim {view.x.shape[0]} != stack input dim {stack_params.h_dims[0]}"
        )
    _, _, outs = _view_nodes([stack_params], view)
    return outs[stack_params.name].value.copy()


def encode_view(params, view):
    """Everything robot `view.owner` computes locally in one exchange round.

    Returns the damping and interconnection encodings (one column per
    member), the local energy H^i, and ∂H^i/∂x^j for every member j.
    """
    stacks = [params.stacks[name] for name in ("R", "J", "M", "U")]
    tape, x, outs = _view_nodes(stacks, view, requires_grad_x=True)
    if outs["R"].value.min() <= 0.0:
        raise InvariantError("damping encodings must be strictly positive")
    h_i, _ = _hamiltonian_terms(outs["M"], outs["U"], x, params.n_x)
    (g,) = ad.grad(h_i, [x])
    return {
        "z_r": outs["R"].value.copy(),
        "z_j": outs["J"].value.copy(),
        "h_i": float(h_i.value[0, 0]),
        "grad_h": g.data,
        "ids": view.ids.copy(),
        "owner": view.owner,
    }


def _pair_encoding(enc, j, i):
    """Column of robot j's encoding that refers to robot i."""
    e = enc[j]
    col = int(np.searchsorted(e["ids"], i))
    if col >= len(e["ids"]) or e["ids"][col] != i:
        raise InvariantError(f"robot {i} missing from robot {j}'s neighborhood")
    return col


def assemble_R_blocks(enc):
    """Damping blocks from encodings {owner: {"z_r", "ids"}}.

    Off-diagonal blocks carry −(Z^R_ij + Z^R_ji); each diagonal block absorbs
    the same mass plus the robot's self-encoding, the construction that makes
    the dense matrix diagonally dominant and PSD.
    """
    blocks = {}
    for i, e in enc.items():
        z_i = e["z_r"]
        self_col = _pair_encoding(enc, i, i)
        diag_acc = z_i[:, self_col].copy()
        for c, j in enumerate(e["ids"]):
            j = int(j)
            if j == i:
                continue
            z_ij = z_i[:, c]
            z_ji = enc[j]["z_r"][:, _pair_encoding(enc, j, i)]
            blocks[(i, j)] = np.diag(-(z_ij + z_ji))
            diag_acc += z_ij + z_ji
        blocks[(i, i)] = np.diag(diag_acc)
    return blocks


def assemble_J_blocks(enc):
    """Interconnection blocks from encodings; antisymmetrized, zero diagonal."""
    blocks = {}
    for i, e in enc.items():
        z_i = e["z_j"]
        n_x = z_i.shape[0]
        for c, j in enumerate(e["ids"]):
            j = int(j)
            if j == i:
                blocks[(i, i)] = np.zeros((n_x, n_x))
                continue
            z_ji = enc[j]["z_j"][:, _pair_encoding(enc, j, i)]
            blocks[(i, j)] = np.diag(z_i[:, c] - z_ji)
    return blocks


def build_R_blocks(params, views):
    """Damping blocks (i, j) → n_x × n_x for every in-neighborhood pair."""
    return assemble_R_blocks({v.owner: encode_view(params, v) for v in views})


def build_J_blocks(params, views):
    """Interconnection blocks (i, j) → n_x × n_x, zero on the diagonal."""
    return assemble_J_blocks({v.owner: encode_view(params, v) for v in views})


def assemble_dense(blocks, n, n_x):
    """Dense joint matrix from a sparse block map; absent blocks are zero."""
    out = np.zeros((n * n_x, n * n_x))
    for (i, j), blk in blocks.items():
        out[i * n_x : (i + 1) * n_x, j * n_x : (j + 1) * n_x] = blk
    return out


def hamiltonian_i(params, view):
    """Scalar learned energy of one robot's neighborhood."""
    stacks = [params.stacks[name] for name in ("M", "U")]
    tape, x, outs = _view_nodes(stacks, view)
    h, _ = _hamiltonian_terms(outs["M"], outs["U"], x, params.n_x)
    return float(h.value[0, 0])


def grad_hamiltonian_i(params, view):
    """∂H^i/∂x^j for every member j of the view, one column each."""
    return encode_view(params, view)["grad_h"]


def gathered_energy_gradients(params, views):
    """∂H_θ/∂x^j = Σ_i ∂H^i/∂x^j over all views containing j; (n_x × n)."""
    n = len(views)
    out = np.zeros((params.n_x, n))
    for v in views:
        e = encode_view(params, v)
        for c, j in enumerate(e["ids"]):
            out[:, int(j)] += e["grad_h"][:, c]
    return out


def ida_pbc_control(model, x, j_blocks, r_blocks, grad_h_cols):
    """Generic energy-shaping matching law from explicit target structure.

    x: (n, n_x) states; blocks: maps (i, j) → n_x × n_x; grad_h_cols:
    (n_x, n) gathered target-energy gradients. Returns (n, n_u) controls.
    """
    x = np.asarray(x, dtype=np.float64)
    n = model.n
    mu = np.zeros((n, model.n_u))
    for i, rm in enumerate(model.models):
        F = rm.F(x[i])
        gram = F.T @ F
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise MatchingError("input gain F is rank deficient; cannot match")
        acc = np.zeros(model.n_x)
        for j in range(n):
            jb = j_blocks.get((i, j))
            rb = r_blocks.get((i, j))
            if jb is None and rb is None:
                continue
            blk = (jb if jb is not None else 0.0) - (rb if rb is not None else 0.0)
            acc = acc + blk @ grad_h_cols[:, j]
        acc = acc - (rm.J(x[i]) - rm.R(x[i])) @ rm.dH(x[i])
        mu[i] = np.linalg.solve(gram, F.T @ acc)
    return mu


def mean_control(params, model, state, graph):
    """Deterministic distributed control μ_θ for one team state; (n, n_u)."""
    x = np.asarray(state.x if hasattr(state, "x") else state, dtype=np.float64)
    step = policy_step(
        params, model, x[None], graph.adjacency[None], deterministic=True
    )
    return np.ascontiguousarray(step.mu.value.T)


def dense_mean_control(params, model, state, graph):
    """Oracle path: assemble dense J_θ, R_θ, gathered ∇H_θ, then match."""
    x = np.asarray(state.x if hasattr(state, "x") else state, dtype=np.float64)
    views = build_views(x, graph, params.k)
    jb = build_J_blocks(params, views)
    rb = build_R_blocks(params, views)
    gh = gathered_energy_gradients(params, views)
    return ida_pbc_control(model, x, jb, rb, gh)


def variance_forward(params, view, action):
    """Exploration standard deviations for the view's owner; (n_u,)."""
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape[0] != params.n_u:
        raise DimensionError(f"action must have {params.n_u} entries")
    width = view.x.shape[1]
    aug = np.vstack([view.x, np.tile(action[:, None], (1, width))])
    aug_view = NeighborhoodView(owner=view.owner, ids=view.ids, x=aug)
    z = attention_stack_forward(params.stacks["VAR"], aug_view)
    owner_col = int(np.searchsorted(view.ids, view.owner))
    return np.clip(z[:, owner_col], SIGMA_MIN, SIGMA_MAX)


def sample_action(mu, sigma, rng=None, deterministic=False):
    """Squash a Gaussian draw through tanh; returns (action, log-probability).

    Works on arrays of any matching shape; the log-probability sums over all
    entries. Deterministic mode returns tanh(mu) with no log-probability.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("standard deviations must be positive")
    if deterministic:
        return np.tanh(mu), None
    if rng is None:
        raise ContractError("sampling needs an rng")
    xi = rng.standard_normal(size=mu.shape)
    u = mu + sigma * xi
    action = np.tanh(u)
    return action, float(squashed_log_prob(mu, sigma, u=u))


def squashed_log_prob(mu, sigma, action=None, u=None):
    """log π(a | μ, σ) for the tanh-squashed Gaussian, summed over entries."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if u is None:
        a = np.clip(np.asarray(action, dtype=np.float64), -1 + 1e-12, 1 - 1e-12)
        u = np.arctanh(a)
    xi = (u - mu) / sigma
    gauss = -np.log(sigma) - 0.5 * LOG_2PI - 0.5 * xi * xi
    corr = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return float(np.sum(gauss - corr))

"""Desk-scale multi-robot navigation environment and ablation baselines.

The arena is a 2·arena × 2·arena square. Each robot is a damped planar
double integrator whose state is (position, velocity, goal − position), so
the per-robot state dimension stays constant as the team grows. The team
shares a single scalar reward: the sum of negative robot-goal distances
minus a penalty for every pair of robots in contact. Episodes end at a
fixed step cap; there are no walls (the arena bounds only the spawns).

The baselines mirror the comparison policies: an unstructured dense network
(MLP) and a dense+self-attention network (MSA), both of which hard-code the
team size into their layer shapes, and a graph-attention network (GSA)
that, like the primary policy, is evaluated per neighborhood and therefore
transfers across team sizes unchanged.
"""

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import JointState, compose, navigation_robot, zoh_step
from .errors import ConfigError, ContractError, DimensionError
from .graphs import InteractionGraph, from_radius, k_hop
from .policy import (
    SIGMA_MAX,
    SIGMA_MIN,
    NeighborhoodView,
    _init_stack,
    attention_stack_forward,
    sample_action,
)

__all__ = [
    "NavConfig", "NavEnv", "BaselineParams", "baseline_init",
    "baseline_forward", "baseline_sigma", "baseline_act",
]


# ---------------------------------------------------------------------------
# navigation environment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NavConfig:
    n: int = 4
    arena: float = 1.0          # half-extent of the square arena
    robot_radius: float = 0.15
    goal_radius: float = 0.1    # success bookkeeping only; no reward term
    r_comm: float = 0.45
    collision_penalty: float = -5.0
    max_steps: int = 400
    dt: float = 0.1
    damping: float = 0.25
    u_max: float = 1.0          # force bound that [-1,1] actions scale to

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("need at least one robot")
        if min(self.robot_radius, self.goal_radius, self.r_comm) <= 0:
            raise ConfigError("radii must be positive")
        if self.arena <= self.robot_radius:
            raise ConfigError("arena cannot fit a single robot")
        if self.dt <= 0 or self.max_steps < 1:
            raise ConfigError("need positive step size and episode cap")
        # crude packing feasibility: grid of non-overlap spacings must hold n
        side = 2.0 * (self.arena - self.robot_radius)
        slots = (math.floor(side / (2.0 * self.robot_radius)) + 1) ** 2
        if self.n > 0.9 * slots:
            raise ConfigError(
                f"{self.n} robots cannot spawn without overlap in this arena"
            )


class NavEnv:
    """Shared-reward navigation; pure dynamics, stochastic only at reset."""

    def __init__(self, cfg, rng, record=False):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.rng = rng
        self.n = cfg.n
        self.n_x = 6
        self.n_u = 2
        self.model = compose(
            [navigation_robot(2, damping=cfg.damping) for _ in range(cfg.n)]
        )
        self.record = record
        self.trajectory = []
        self._x = None
        self._goals = None
        self._t = 0

    def _spawn_positions(self):
        cfg = self.cfg
        lim = cfg.arena - cfg.robot_radius
        placed = np.empty((0, 2))
        for _ in range(cfg.n):
            for attempt in range(200):
                p = self.rng.uniform(-lim, lim, size=2)
                if placed.size == 0 or np.all(
                    np.linalg.norm(placed - p, axis=1) > 2.0 * cfg.robot_radius
                ):
                    placed = np.vstack([placed, p])
                    break
            else:
                raise ConfigError("could not place robots without overlap")
        return placed

    def _adjacency(self, positions):
        if self.n == 1:
            return np.zeros((1, 1))
        return from_radius(positions, self.cfg.r_comm).adjacency.copy()

    def _observe(self):
        return self._x.copy(), self._adjacency(self._x[:, :2])

    def reset(self):
        cfg = self.cfg
        positions = self._spawn_positions()
        lim = cfg.arena - cfg.goal_radius
        self._goals = self.rng.uniform(-lim, lim, size=(cfg.n, 2))
        x = np.zeros((cfg.n, self.n_x))
        x[:, :2] = positions
        x[:, 4:6] = self._goals - positions
        self._x = x
        self._t = 0
        self.trajectory = []
        return self._observe()

    def step(self, actions):
        if self._x is None:
            raise ContractError("step before reset")
        cfg = self.cfg
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n, self.n_u):
            raise DimensionError(
                f"actions must be {(self.n, self.n_u)}, got {actions.shape}"
            )
        u = np.clip(actions, -1.0, 1.0) * cfg.u_max
        state = zoh_step(self.model, JointState(x=self._x), u, cfg.dt)
        self._x = np.asarray(state.x)
        self._t += 1

        positions = self._x[:, :2]
        dists = np.linalg.norm(positions - self._goals, axis=1)
        contacts = 0
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if np.linalg.norm(positions[i] - positions[j]) < 2.0 * cfg.robot_radius:
                    contacts += 1
        reward = float(-dists.sum() + contacts * cfg.collision_penalty)
        done = self._t >= cfg.max_steps
        info = {
            "mean_goal_dist": float(dists.mean()),
            "collisions": contacts,
            "at_goal": int(np.sum(dists < cfg.goal_radius)),
        }
        x, adj = self._observe()
        if self.record:
            self.trajectory.append(
                {
                    "t": self._t,
                    "positions": positions.tolist(),
                    "velocities": self._x[:, 2:4].tolist(),
                    "actions": np.clip(actions, -1.0, 1.0).tolist(),
                    "reward": reward,
                    "adjacency": adj.tolist(),
                }
            )
        return x, adj, reward, done, info


# ---------------------------------------------------------------------------
# ablation baselines
# ---------------------------------------------------------------------------


def _dense_init(rng, sizes):
    layers = []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(d_in)
        layers.append(
            (rng.uniform(-bound, bound, size=(d_out, d_in)), np.zeros(d_out))
        )
    return layers


def _dense_forward(layers, v, hidden_swish):
    h = np.asarray(v, dtype=np.float64)
    last = len(layers) - 1
    for li, (w, b) in enumerate(layers):
        if h.shape[0] != w.shape[1]:
            raise DimensionError(
                f"dense layer expects input dim {w.shape[1]}, got {h.shape[0]}"
            )
        h = w @ h + b
        if hidden_swish and li != last:
            h = h / (1.0 + np.exp(-h))
    return h


def _self_attention(tokens):
    """Parameter-free scaled dot-product attention over row tokens."""
    d = tokens.shape[1]
    scores = tokens @ tokens.T / math.sqrt(d)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return (e / e.sum(axis=1, keepdims=True)) @ tokens


@dataclass
class BaselineParams:
    """Comparison policies: 'mlp' and 'msa' bind their shapes to the training
    team size; 'gsa' is a per-neighborhood attention stack and does not."""

    kind: str
    n_train: int
    n_x: int
    n_u: int
    mean_layers: list = None    # dense (W, b) pairs for mlp/msa
    var_layers: list = None
    mean_stack: object = None   # attention stacks for gsa
    var_stack: object = None

    def n_parameters(self):
        total = 0
        for layers in (self.mean_layers, self.var_layers):
            if layers:
                total += sum(w.size + b.size for w, b in layers)
        for stack in (self.mean_stack, self.var_stack):
            if stack is not None:
                total += sum(arr.size for _, arr in stack.items())
        return total


def baseline_init(rng, kind, n, n_x, n_u):
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if kind == "mlp":
        return BaselineParams(
            kind=kind, n_train=n, n_x=n_x, n_u=n_u,
            mean_layers=_dense_init(rng, [n * n_x, n * n_u, n * n_u]),
            var_layers=_dense_init(rng, [n * (n_x + n_u), n * n_u, n * n_u]),
        )
    if kind == "msa":
        return BaselineParams(
            kind=kind, n_train=n, n_x=n_x, n_u=n_u,
            mean_layers=[
                _dense_init(rng, [n * n_x, n * n_x])[0],
                _dense_init(rng, [n * n_x, n * n_u])[0],
            ],
            var_layers=[
                _dense_init(rng, [n * (n_x + n_u), n * n_u])[0],
                _dense_init(rng, [n * n_u, n * n_u])[0],
            ],
        )
    if kind == "gsa":
        swish3 = ("swish", "swish", "swish")
        return BaselineParams(
            kind=kind, n_train=n, n_x=n_x, n_u=n_u,
            mean_stack=_init_stack(
                rng, "GSA", (n_x, 16, 8), (8, 16, 8), (16, 8, n_u),
                beta="sigmoid", chi="swish", psis=swish3,
            ),
            var_stack=_init_stack(
                rng, "GSAV", (n_x + n_u, 16, 8), (8, 16, 8), (16, 8, n_u),
                beta="sigmoid", chi="swish", psis=swish3,
            ),
        )
    raise ContractError(f"unknown baseline kind {kind!r}")


def _check_team(bp, n):
    if bp.kind in ("mlp", "msa") and n != bp.n_train:
        raise DimensionError(
            f"{bp.kind} policy was built for n={bp.n_train} robots and cannot "
            f"process n={n}; its layer shapes bind to the team size"
        )


def _gsa_views(x, adjacency, extra_rows=None):
    graph = InteractionGraph(adjacency)
    views = []
    for i in range(graph.n):
        ids = k_hop(graph, i, 1)
        cols = x[ids].T
        if extra_rows is not None:
            cols = np.vstack([cols, np.tile(extra_rows[i][:, None], (1, len(ids)))])
        views.append(NeighborhoodView(owner=i, ids=ids, x=np.ascontiguousarray(cols)))
    return views


def baseline_forward(bp, x, adjacency=None):
    """Joint mean action (n, n_u) for one team state (n, n_x)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    _check_team(bp, n)
    if bp.kind == "mlp":
        out = _dense_forward(bp.mean_layers, x.ravel(), hidden_swish=True)
        return out.reshape(n, bp.n_u)
    if bp.kind == "msa":
        h = _dense_forward([bp.mean_layers[0]], x.ravel(), hidden_swish=False)
        h = _self_attention(h.reshape(n, bp.n_x)).ravel()
        out = _dense_forward([bp.mean_layers[1]], h, hidden_swish=False)
        return out.reshape(n, bp.n_u)
    if bp.kind == "gsa":
        if adjacency is None:
            raise ContractError("gsa needs the adjacency matrix")
        mu = np.zeros((n, bp.n_u))
        for view in _gsa_views(x, adjacency):
            z = attention_stack_forward(bp.mean_stack, view)
            owner_col = int(np.searchsorted(view.ids, view.owner))
            mu[view.owner] = z[:, owner_col]
        return mu
    raise ContractError(f"unknown baseline kind {bp.kind!r}")


def baseline_sigma(bp, x, mean, adjacency=None):
    """Exploration scales from the matching variance network; (n, n_u)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    _check_team(bp, n)
    squashed = np.tanh(mean)
    if bp.kind == "mlp":
        v = np.concatenate([x, squashed], axis=1).ravel()
        out = _dense_forward(bp.var_layers, v, hidden_swish=True)
    elif bp.kind == "msa":
        v = np.concatenate([x, squashed], axis=1).ravel()
        h = _dense_forward([bp.var_layers[0]], v, hidden_swish=False)
        h = _self_attention(h.reshape(n, bp.n_u)).ravel()
        out = _dense_forward([bp.var_layers[1]], h, hidden_swish=False)
    elif bp.kind == "gsa":
        if adjacency is None:
            raise ContractError("gsa needs the adjacency matrix")
        out = np.zeros((n, bp.n_u))
        for view in _gsa_views(x, adjacency, extra_rows=squashed):
            z = attention_stack_forward(bp.var_stack, view)
            owner_col = int(np.searchsorted(view.ids, view.owner))
            out[view.owner] = z[:, owner_col]
    else:
        raise ContractError(f"unknown baseline kind {bp.kind!r}")
    return np.clip(out.reshape(n, bp.n_u), SIGMA_MIN, SIGMA_MAX)


def baseline_act(bp, x, adjacency=None, rng=None, deterministic=True):
    """Squashed-Gaussian action from a baseline, same contract as the policy."""
    mu = baseline_forward(bp, x, adjacency)
    if deterministic:
        return np.tanh(mu)
    sigma = baseline_sigma(bp, x, mu, adjacency)
    action, _ = sample_action(mu, sigma, rng=rng)
    return action

"""Interaction graphs: radius-based construction and k-hop neighborhoods."""

import numpy as np

from .errors import ContractError, DimensionError


class InteractionGraph:
    """Undirected robot interaction graph. Immutable after construction."""

    __slots__ = ("n", "adjacency")

    def __init__(self, adjacency):
        adj = np.asarray(adjacency)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise DimensionError(f"adjacency must be square, got {adj.shape}")
        adj = (adj != 0).astype(np.int64)
        if np.any(adj != adj.T):
            raise ContractError("adjacency must be symmetric")
        if np.any(np.diag(adj) != 0):
            raise ContractError("adjacency diagonal must be zero")
        adj.setflags(write=False)
        self.n = adj.shape[0]
        self.adjacency = adj

    def neighbors(self, i):
        """Direct neighbors of robot i, ascending, excluding i."""
        return np.flatnonzero(self.adjacency[i])

    def edges(self):
        """Undirected edges as (i, j) pairs with i < j."""
        return np.argwhere(np.triu(self.adjacency, 1))

    def degree(self, i):
        return int(self.adjacency[i].sum())

    def __repr__(self):
        return f"InteractionGraph(n={self.n}, edges={len(self.edges())})"


def from_radius(positions, r_comm):
    """Connect every pair of distinct robots within r_comm meters."""
    if r_comm <= 0:
        raise ContractError("communication radius must be positive")
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError("positions must be an n x d matrix")
    diff = p[:, None, :] - p[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    adj = (dist <= r_comm) & (dist > 0)
    return InteractionGraph(adj)


def k_hop(g, i, k):
    """Robot ids reachable from i in at most k hops, ascending, including i."""
    if not (0 <= i < g.n):
        raise ContractError(f"robot id {i} outside 0..{g.n - 1}")
    if k < 0:
        raise ContractError("hop count must be >= 0")
    reached = np.zeros(g.n, dtype=bool)
    reached[i] = True
    for _ in range(k):
        frontier = g.adjacency[reached].any(axis=0) & ~reached
        if not frontier.any():
            break
        reached |= frontier
    return np.flatnonzero(reached)

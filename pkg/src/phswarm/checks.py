"""Runtime invariant suites: the machinery behind the `check` command.

Five suites, each drawing random (parameters, graph, state) instances and
verifying one structural property of the control law:

  skew                  assembled interconnection matrix satisfies J + Jᵀ = 0
  psd                   assembled damping matrix has min eigenvalue ≥ −1e-9
  sparsity              blocks outside the k-hop neighborhood are exactly zero
  gradient              tape energy gradients match central finite differences
  protocol-equivalence  message-passing control equals the dense computation

Each suite returns a SuiteResult with per-draw counts so a report can name
exactly which property failed and how badly.  Setting the environment
variable PHSWARM_TEST_CORRUPT=J makes the skew suite corrupt its assembled
matrix first — a self-test hook proving a broken construction is caught and
named, not silently passed.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import policy as pol
from .dynamics import compose, double_integrator
from .graphs import InteractionGraph, k_hop
from .protocol import run_protocol

SUITE_NAMES = ("skew", "psd", "sparsity", "gradient", "protocol-equivalence")

PSD_TOLERANCE = 1e-9
GRADIENT_TOLERANCE = 1e-4
GRADIENT_STEP = 1e-5
PROTOCOL_TOLERANCE = 1e-10


@dataclass
class SuiteResult:
    """Outcome of one invariant suite."""

    name: str
    passed: bool
    count: int      # instances checked
    failures: int   # instances that violated the property
    worst: float    # largest violation measure observed (0 means clean)
    detail: str

    def summary(self):
        status = "pass" if self.passed else "FAIL"
        return f"{self.name:<22} {self.count:>5} draws  {status}  {self.detail}"


def _random_graph(rng, n, p=0.45):
    adj = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                adj[i, j] = adj[j, i] = 1.0
    return InteractionGraph(adj)


def _draw_instance(rng, n, k=1):
    """One random (parameters, model, state, graph) tuple for a team of n."""
    dim = int(rng.integers(1, 3))  # per-robot state dim 2 or 4
    model = compose([double_integrator(dim) for _ in range(n)])
    params = pol.init_policy(rng, n_x=2 * dim, n_u=dim, k=k)
    x = rng.normal(size=(n, 2 * dim))
    graph = _random_graph(rng, n)
    return params, model, x, graph


def _team_sizes(draws, max_n=8):
    """Cycle 1..max_n so every team size is exercised."""
    return [1 + (d % max_n) for d in range(draws)]


def check_skew(seed=0, draws=1000):
    """J_θ + J_θᵀ must vanish exactly for every draw."""
    rng = np.random.default_rng(seed)
    corrupt = os.environ.get("PHSWARM_TEST_CORRUPT") == "J"
    worst, failures = 0.0, 0
    for n in _team_sizes(draws):
        params, _, x, graph = _draw_instance(rng, n)
        views = pol.build_views(x, graph, params.k)
        dense = pol.assemble_dense(
            pol.build_J_blocks(params, views), graph.n, params.n_x
        )
        if corrupt:
            dense[0, 0] += 0.5
        violation = float(np.abs(dense + dense.T).max())
        worst = max(worst, violation)
        if violation != 0.0:
            failures += 1
    passed = failures == 0
    detail = (
        "J + Jᵀ = 0 exactly"
        if passed
        else f"J + Jᵀ = 0 violated: max |J + Jᵀ| = {worst:g}"
    )
    return SuiteResult("skew", passed, draws, failures, worst, detail)


def check_psd(seed=1, draws=1000):
    """Min eigenvalue of the assembled damping matrix stays above −1e-9."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for n in _team_sizes(draws):
        params, _, x, graph = _draw_instance(rng, n)
        views = pol.build_views(x, graph, params.k)
        dense = pol.assemble_dense(
            pol.build_R_blocks(params, views), graph.n, params.n_x
        )
        min_eig = float(np.linalg.eigvalsh(dense).min())
        violation = max(0.0, -min_eig - PSD_TOLERANCE)
        worst = max(worst, violation)
        if violation > 0.0:
            failures += 1
    passed = failures == 0
    detail = (
        f"min eigenvalue ≥ -{PSD_TOLERANCE:g}"
        if passed
        else f"R not PSD: eigenvalue below tolerance by {worst:g}"
    )
    return SuiteResult("psd", passed, draws, failures, worst, detail)


def check_sparsity(seed=2, draws=1000, k=1):
    """Blocks between robots outside each other's k-hop hood are exactly zero."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for n in _team_sizes(draws):
        params, _, x, graph = _draw_instance(rng, n, k=k)
        views = pol.build_views(x, graph, k)
        n_x = params.n_x
        violation = 0.0
        for blocks in (
            pol.build_J_blocks(params, views),
            pol.build_R_blocks(params, views),
        ):
            dense = pol.assemble_dense(blocks, n, n_x)
            for i in range(n):
                hood = set(int(j) for j in k_hop(graph, i, k))
                for j in range(n):
                    if j in hood:
                        continue
                    blk = dense[i * n_x : (i + 1) * n_x, j * n_x : (j + 1) * n_x]
                    violation = max(violation, float(np.abs(blk).max()))
        worst = max(worst, violation)
        if violation != 0.0:
            failures += 1
    passed = failures == 0
    detail = (
        "all out-of-neighborhood blocks are zero"
        if passed
        else f"nonzero block outside the neighborhood: max |entry| = {worst:g}"
    )
    return SuiteResult("sparsity", passed, draws, failures, worst, detail)


def _total_energy(params, x, graph, k):
    return sum(
        pol.hamiltonian_i(params, v) for v in pol.build_views(x, graph, k)
    )


def check_gradient(seed=3, draws=100, step=GRADIENT_STEP, tol=GRADIENT_TOLERANCE):
    """Tape gradient of the total energy vs central finite differences."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for n in _team_sizes(draws):
        params, _, x, graph = _draw_instance(rng, n)
        views = pol.build_views(x, graph, params.k)
        got = pol.gathered_energy_gradients(params, views)  # (n_x, n)
        fd = np.zeros_like(got)
        for j in range(n):
            for r in range(params.n_x):
                xp = x.copy()
                xp[j, r] += step
                xm = x.copy()
                xm[j, r] -= step
                fd[r, j] = (
                    _total_energy(params, xp, graph, params.k)
                    - _total_energy(params, xm, graph, params.k)
                ) / (2 * step)
        rel = float(np.abs(got - fd).max() / max(np.abs(fd).max(), 1e-6))
        worst = max(worst, rel)
        if rel >= tol:
            failures += 1
    passed = failures == 0
    detail = (
        f"max relative error {worst:.2e} < {tol:g}"
        if passed
        else f"gradient mismatch: max relative error {worst:.2e} ≥ {tol:g}"
    )
    return SuiteResult("gradient", passed, draws, failures, worst, detail)


def check_protocol_equivalence(seed=4, draws=200, tol=PROTOCOL_TOLERANCE):
    """Three-round message passing reproduces the dense joint control."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for n in _team_sizes(draws):
        params, model, x, graph = _draw_instance(rng, n)
        mu = run_protocol(params, model, x, graph)
        ref = pol.dense_mean_control(params, model, x, graph)
        diff = float(np.abs(mu - ref).max())
        worst = max(worst, diff)
        if diff > tol:
            failures += 1
    passed = failures == 0
    detail = (
        f"max deviation {worst:.2e} ≤ {tol:g}"
        if passed
        else f"distributed control deviates: max {worst:.2e} > {tol:g}"
    )
    return SuiteResult("protocol-equivalence", passed, draws, failures, worst, detail)


def run_all_checks(seed=0, structure_draws=1000, gradient_draws=100, protocol_draws=200):
    """Run every suite with independent seed streams; results in SUITE_NAMES order."""
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(5)]
    return [
        check_skew(seeds[0], structure_draws),
        check_psd(seeds[1], structure_draws),
        check_sparsity(seeds[2], structure_draws),
        check_gradient(seeds[3], gradient_draws),
        check_protocol_equivalence(seeds[4], protocol_draws),
    ]


def format_report(results):
    lines = [r.summary() for r in results]
    overall = "all invariants hold" if all(r.passed for r in results) else (
        "FAILED: " + ", ".join(r.name for r in results if not r.passed)
    )
    lines.append(overall)
    return "\n".join(lines)

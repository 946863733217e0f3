"""Soft actor-critic trainer for the shared team policy.

One parameter vector is trained for the whole team: the policy evaluates
per neighborhood, while a centralized critic scores the joint state-action
pair. Replay records the interaction graph with every transition so that
off-policy updates re-evaluate the policy under the topology that generated
the data. Temperature is auto-tuned toward a joint-action entropy target
with hard clamping.

The critic is an ordinary dense network on the flattened joint input
[x_0; a_0; …; x_{n−1}; a_{n−1}], so its shapes bind to the training-time
team size; only the policy is size-invariant and survives deployment.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, InvariantError, StateError
from .policy import policy_step

__all__ = [
    "Transition", "ReplayBuffer", "CriticParams", "critic_init",
    "critic_forward", "critic_eval", "target_update", "Adam", "SacConfig",
    "TrainState", "init_train_state", "critic_update", "actor_update",
    "temperature_update", "sac_update", "evaluate_policy",
    "train", "TrainResult",
]


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    """One team step. Both endpoint graphs ride along so that updates can
    re-evaluate the policy under the recorded topology."""

    s: np.ndarray          # n × n_x
    a: np.ndarray          # n × n_u
    r: float               # shared scalar reward
    s_next: np.ndarray     # n × n_x
    done: float
    adjacency: np.ndarray       # n × n at s
    adjacency_next: np.ndarray  # n × n at s_next

    def __post_init__(self):
        if not np.isfinite(self.r):
            raise ContractError("transition reward must be finite")
        for adj in (self.adjacency, self.adjacency_next):
            if not np.array_equal(adj, adj.T):
                raise ContractError("recorded adjacency must be symmetric")


class ReplayBuffer:
    """Uniform ring buffer over preallocated arrays, grown geometrically."""

    def __init__(self, capacity, n, n_x, n_u):
        if capacity <= 0:
            raise ContractError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.n, self.n_x, self.n_u = n, n_x, n_u
        self._alloc = 0
        self._size = 0
        self._head = 0
        self._grow(min(self.capacity, 2048))

    def _grow(self, new_alloc):
        def bigger(old, shape):
            arr = np.empty(shape)
            if old is not None:
                arr[: self._size] = old[: self._size]
            return arr

        n, n_x, n_u = self.n, self.n_x, self.n_u
        old = getattr(self, "_s", None)
        self._s = bigger(old, (new_alloc, n, n_x))
        self._a = bigger(getattr(self, "_a", None), (new_alloc, n, n_u))
        self._r = bigger(getattr(self, "_r", None), (new_alloc,))
        self._s2 = bigger(getattr(self, "_s2", None), (new_alloc, n, n_x))
        self._d = bigger(getattr(self, "_d", None), (new_alloc,))
        self._adj = bigger(getattr(self, "_adj", None), (new_alloc, n, n))
        self._adj2 = bigger(getattr(self, "_adj2", None), (new_alloc, n, n))
        self._alloc = new_alloc

    def __len__(self):
        return self._size

    def push(self, t):
        if self._size == self._alloc and self._alloc < self.capacity:
            self._grow(min(self.capacity, 2 * self._alloc))
            # grows only ever happen before the first overwrite, so the live
            # data is the contiguous block [0, size) and writing resumes there
            self._head = self._size
        i = self._head
        self._s[i] = t.s
        self._a[i] = t.a
        self._r[i] = t.r
        self._s2[i] = t.s_next
        self._d[i] = t.done
        self._adj[i] = t.adjacency
        self._adj2[i] = t.adjacency_next
        self._head = (i + 1) % self._alloc
        self._size = min(self._size + 1, self._alloc)

    def sample(self, batch, rng):
        if self._size == 0:
            raise StateError("cannot sample from an empty replay buffer")
        if batch > self._size:
            raise StateError(
                f"batch {batch} exceeds buffer size {self._size}"
            )
        idx = rng.choice(self._size, size=batch, replace=False)
        return {
            "s": self._s[idx].copy(),
            "a": self._a[idx].copy(),
            "r": self._r[idx].copy(),
            "s_next": self._s2[idx].copy(),
            "done": self._d[idx].copy(),
            "adjacency": self._adj[idx].copy(),
            "adjacency_next": self._adj2[idx].copy(),
        }


# ---------------------------------------------------------------------------
# critic
# ---------------------------------------------------------------------------


@dataclass
class CriticParams:
    """Dense value network on the flattened joint state-action vector."""

    n: int
    n_x: int
    n_u: int
    layers: list  # [(W, b), ...]

    @property
    def in_dim(self):
        return self.n * (self.n_x + self.n_u)

    def items(self):
        for li, (w, b) in enumerate(self.layers):
            yield f"{li}/W", w
            yield f"{li}/b", b

    def n_parameters(self):
        return sum(arr.size for _, arr in self.items())


def critic_sizes(n, n_x, n_u):
    d = n_x + n_u
    return [n * d, 2 * n * d, n * d, d, 1]


def critic_init(rng, n, n_x, n_u):
    sizes = critic_sizes(n, n_x, n_u)
    layers = []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(d_in)
        layers.append(
            (
                rng.uniform(-bound, bound, size=(d_out, d_in)),
                np.zeros((d_out, 1)),
            )
        )
    return CriticParams(n=n, n_x=n_x, n_u=n_u, layers=layers)


def joint_input(s, a):
    """Flatten (B, n, n_x) states and (B, n, n_u) actions into critic columns
    [x_0; a_0; x_1; a_1; …] of shape (n(n_x+n_u), B)."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.ndim == 2:
        s, a = s[None], a[None]
    cat = np.concatenate([s, a], axis=2)  # (B, n, n_x+n_u)
    return np.ascontiguousarray(cat.reshape(cat.shape[0], -1).T)


def _swish(z):
    return z / (1.0 + np.exp(-z))


def critic_eval(cp, x_cols):
    """Plain numpy forward pass; (d_in, B) -> (B,) values."""
    h = np.asarray(x_cols, dtype=np.float64)
    if h.shape[0] != cp.in_dim:
        raise DimensionError(
            f"critic expects input dim {cp.in_dim}, got {h.shape[0]}"
        )
    last = len(cp.layers) - 1
    for li, (w, b) in enumerate(cp.layers):
        h = w @ h + b
        if li != last:
            h = _swish(h)
    return h[0]


def critic_forward(cp, s, a):
    """Scalar Q for one joint state-action pair."""
    return float(critic_eval(cp, joint_input(s, a))[0])


def critic_node(tape, weights, x_node, trainable=False):
    """Critic forward on an existing tape.

    weights: CriticParams. With trainable=True the layer tensors become
    gradient leaves and the dict of leaves is returned alongside the output.
    """
    leaves = {}
    h = x_node
    last = len(weights.layers) - 1
    ncols = x_node.value.shape[1]
    for li, (w, b) in enumerate(weights.layers):
        if trainable:
            wn = tape.leaf(w, requires_grad=True)
            bn = tape.leaf(b, requires_grad=True)
            leaves[f"{li}/W"] = wn
            leaves[f"{li}/b"] = bn
        else:
            wn, bn = tape.constant(w), tape.constant(b)
        h = ad.add(ad.matmul(wn, h), ad.tile_cols(bn, ncols))
        if li != last:
            h = ad.swish(h)
    return (h, leaves) if trainable else h


def target_update(online, target, rho):
    """Soft update target ← ρ·online + (1−ρ)·target, in place."""
    if not 0.0 < rho <= 1.0:
        raise ContractError("polyak rho must lie in (0, 1]")
    for (wo, bo), (wt, bt) in zip(online.layers, target.layers):
        wt *= 1.0 - rho
        wt += rho * wo
        bt *= 1.0 - rho
        bt += rho * bo
    return target


def clone_critic(cp):
    return CriticParams(
        n=cp.n, n_x=cp.n_x, n_u=cp.n_u,
        layers=[(w.copy(), b.copy()) for w, b in cp.layers],
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam over a dict of named arrays, updated in place."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[name] -= scale * m / (np.sqrt(v) + self.eps)


# ---------------------------------------------------------------------------
# configuration and train state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    alpha0: float = 5.0
    alpha_min: float = 0.1
    alpha_max: float = 10.0
    rho: float = 0.005
    lr: float = 1e-4
    lr_alpha: float = 1e-5
    batch: int = 1024
    capacity: int = 2_000_000
    warmup: int = 1000
    eval_interval: int = 10_000
    eval_episodes: int = 10
    num_envs: int = 8
    updates_per_step: float = 1.0
    total_steps: int = 100_000
    target_entropy: float = None  # default −n·n_u, resolved at init
    actor_delay: int = 1  # critic updates per actor/temperature update

    def __post_init__(self):
        # gamma = 0 (the purely myopic case) is explicitly meaningful, so the
        # lower bound is inclusive
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("gamma must lie in [0, 1)")
        if not 0.0 < self.rho <= 1.0:
            raise ContractError("rho must lie in (0, 1]")
        if not 0.0 < self.alpha_min <= self.alpha0 <= self.alpha_max:
            raise ContractError("need alpha_min <= alpha0 <= alpha_max")
        if self.batch <= 0 or self.capacity <= 0:
            raise ContractError("batch and capacity must be positive")
        if not isinstance(self.actor_delay, int) or self.actor_delay < 1:
            raise ContractError("actor_delay must be an integer >= 1")


@dataclass
class TrainState:
    policy: object            # PolicyParams, the one shared vector
    q1: CriticParams
    q2: CriticParams
    q1_target: CriticParams
    q2_target: CriticParams
    log_alpha: float
    target_entropy: float
    opt_policy: Adam
    opt_q1: Adam
    opt_q2: Adam
    update_count: int = 0
    last_actor: dict = None   # cached actor diagnostics between delayed steps

    @property
    def alpha(self):
        return math.exp(self.log_alpha)


def init_train_state(rng, policy_params, n, cfg):
    n_x, n_u = policy_params.n_x, policy_params.n_u
    q1 = critic_init(rng, n, n_x, n_u)
    q2 = critic_init(rng, n, n_x, n_u)
    target = cfg.target_entropy
    if target is None:
        target = -float(n * n_u)
    return TrainState(
        policy=policy_params,
        q1=q1, q2=q2,
        q1_target=clone_critic(q1), q2_target=clone_critic(q2),
        log_alpha=math.log(cfg.alpha0),
        target_entropy=target,
        opt_policy=Adam(cfg.lr), opt_q1=Adam(cfg.lr), opt_q2=Adam(cfg.lr),
    )


# ---------------------------------------------------------------------------
# the update rule
# ---------------------------------------------------------------------------


def critic_update(state, model, batch, cfg, rng):
    """One gradient step on both critics toward the entropy-regularized
    bootstrap target; targets use the target copies only."""
    r = batch["r"]
    done = batch["done"]
    alpha = state.alpha

    if cfg.gamma > 0.0:
        nxt = policy_step(
            state.policy, model, batch["s_next"], batch["adjacency_next"],
            rng=rng,
        )
        a_next = nxt.actions_matrix()
        log_pi_next = nxt.log_pi_env.value[0]
        x_next = joint_input(batch["s_next"], a_next)
        q_next = np.minimum(
            critic_eval(state.q1_target, x_next),
            critic_eval(state.q2_target, x_next),
        )
        y = r + cfg.gamma * (1.0 - done) * (q_next - alpha * log_pi_next)
    else:
        y = r.copy()

    x_in = joint_input(batch["s"], batch["a"])
    losses = []
    for cp, opt in ((state.q1, state.opt_q1), (state.q2, state.opt_q2)):
        tape = ad.Tape()
        x_node = tape.constant(x_in)
        q_node, leaves = critic_node(tape, cp, x_node, trainable=True)
        diff = ad.sub(q_node, tape.constant(y[None, :]))
        loss = ad.mean_all(ad.mul(diff, diff))
        grads = ad.grad(loss, list(leaves.values()))
        named = dict(zip(leaves.keys(), (g.data for g in grads)))
        flat = {name: arr for name, arr in cp.items()}
        opt.step(flat, named)
        losses.append(float(loss.value[0, 0]))
    return 0.5 * (losses[0] + losses[1]), float(np.mean(y))


def actor_update(state, model, batch, cfg, rng):
    """Reparameterized policy-gradient step through the frozen critics."""
    alpha = state.alpha
    step = policy_step(
        state.policy, model, batch["s"], batch["adjacency"],
        rng=rng, create_graph=True,
    )
    tape = step.tape
    n = step.layout.n
    folded = ad.fold_cols(ad.concat_rows(step.x_leaf, step.action), n)
    q1 = critic_node(tape, state.q1, folded)
    q2 = critic_node(tape, state.q2, folded)
    q_min = ad.minimum(q1, q2)
    loss = ad.mean_all(ad.sub(ad.scale(step.log_pi_env, alpha), q_min))

    names = list(step.param_leaves.keys())
    grads = ad.grad(loss, [step.param_leaves[k] for k in names])
    named = dict(zip(names, (g.data for g in grads)))
    flat = {name: arr for name, arr in state.policy.items()}
    state.opt_policy.step(flat, named)

    mean_log_pi = float(np.mean(step.log_pi_env.value))
    sigma_mean = float(np.mean(step.sigma.value))
    return float(loss.value[0, 0]), mean_log_pi, sigma_mean


def temperature_update(state, mean_log_pi, cfg):
    """Gradient step on log α toward the target joint entropy, clamped."""
    grad = -(mean_log_pi + state.target_entropy)
    state.log_alpha -= cfg.lr_alpha * grad
    state.log_alpha = min(
        max(state.log_alpha, math.log(cfg.alpha_min)), math.log(cfg.alpha_max)
    )
    return -state.log_alpha * (mean_log_pi + state.target_entropy)


def sac_update(state, model, batch, cfg, rng):
    """One full soft actor-critic update from a sampled batch.

    The critics learn on every call; the actor and temperature move on every
    cfg.actor_delay-th call (delayed policy updates), which lets the critics
    track a slower-moving policy when updates are scarce. Returns a dict of
    diagnostics; raises on non-finite losses rather than continuing a
    corrupted run.
    """
    if batch["s"].shape[0] == 0:
        raise ContractError("sac_update needs a nonempty batch")
    critic_loss, target_mean = critic_update(state, model, batch, cfg, rng)
    if state.update_count % cfg.actor_delay == 0 or state.last_actor is None:
        actor_loss, mean_log_pi, sigma_mean = actor_update(
            state, model, batch, cfg, rng
        )
        alpha_loss = temperature_update(state, mean_log_pi, cfg)
        state.last_actor = {
            "actor_loss": actor_loss,
            "alpha_loss": alpha_loss,
            "mean_log_pi": mean_log_pi,
            "sigma_mean": sigma_mean,
        }
    state.update_count += 1
    target_update(state.q1, state.q1_target, cfg.rho)
    target_update(state.q2, state.q2_target, cfg.rho)
    out = {
        "critic_loss": critic_loss,
        "alpha": state.alpha,
        "target_mean": target_mean,
        **state.last_actor,
    }
    for key, val in out.items():
        if not np.isfinite(val):
            raise InvariantError(f"non-finite {key} = {val}; aborting training")
    return out


# ---------------------------------------------------------------------------
# rollout / evaluation / training loop
# ---------------------------------------------------------------------------


def evaluate_policy(params, env, episodes, deterministic=True, rng=None):
    """Roll deterministic episodes; returns (episode rewards, final infos)."""
    rewards, infos = [], []
    for _ in range(episodes):
        x, adj = env.reset()
        total = 0.0
        info = {}
        while True:
            step = policy_step(
                params, env.model, x[None], adj[None],
                rng=rng, deterministic=deterministic,
            )
            a = step.actions_matrix()[0]
            x, adj, r, done, info = env.step(a)
            total += r
            if done:
                break
        rewards.append(total)
        infos.append(info)
    return np.asarray(rewards), infos


@dataclass
class TrainResult:
    state: TrainState
    metrics: list
    n: int
    env_steps: int


def train(env_factory, cfg, seed, policy_init=None, progress=None):
    """Off-policy training loop; all randomness stems from one seed.

    env_factory(seed_sequence) must build an environment exposing
    reset() -> (x, adjacency), step(a) -> (x, adjacency, r, done, info),
    and n, n_x, n_u, model attributes.
    """
    from .policy import init_policy

    root = np.random.SeedSequence(seed)
    children = root.spawn(4 + cfg.num_envs)
    ss_init, ss_act, ss_buf, ss_eval = children[:4]
    ss_envs = children[4:]
    rng_init = np.random.default_rng(ss_init)
    rng_act = np.random.default_rng(ss_act)
    rng_buf = np.random.default_rng(ss_buf)

    envs = [env_factory(ss) for ss in ss_envs]
    eval_env = env_factory(ss_eval)
    n, n_x, n_u = envs[0].n, envs[0].n_x, envs[0].n_u
    model = envs[0].model

    policy = policy_init
    if policy is None:
        policy = init_policy(rng_init, n_x=n_x, n_u=n_u, k=1)
    state = init_train_state(rng_init, policy, n, cfg)
    buffer = ReplayBuffer(cfg.capacity, n, n_x, n_u)

    obs = [env.reset() for env in envs]
    metrics = []
    env_steps = 0
    next_eval = cfg.eval_interval
    updates_due = 0.0
    last_losses = {}

    while env_steps < cfg.total_steps:
        if env_steps < cfg.warmup:
            actions = rng_act.uniform(-1.0, 1.0, size=(len(envs), n, n_u))
        else:
            xs = np.stack([x for x, _ in obs])
            adjs = np.stack([a for _, a in obs])
            pstep = policy_step(state.policy, model, xs, adjs, rng=rng_act)
            actions = pstep.actions_matrix()

        for ei, env in enumerate(envs):
            x, adj = obs[ei]
            x2, adj2, r, done, _ = env.step(actions[ei])
            buffer.push(
                Transition(
                    s=x, a=actions[ei], r=r, s_next=x2,
                    done=1.0 if done else 0.0,
                    adjacency=adj, adjacency_next=adj2,
                )
            )
            obs[ei] = env.reset() if done else (x2, adj2)
        env_steps += len(envs)

        if env_steps >= cfg.warmup and len(buffer) >= cfg.batch:
            updates_due += len(envs) * cfg.updates_per_step
            while updates_due >= 1.0:
                batch = buffer.sample(cfg.batch, rng_buf)
                last_losses = sac_update(state, model, batch, cfg, rng_act)
                updates_due -= 1.0

        if env_steps >= next_eval or env_steps >= cfg.total_steps:
            rewards, infos = evaluate_policy(
                state.policy, eval_env, cfg.eval_episodes
            )
            record = {
                "step": env_steps,
                "eval_reward_mean": float(rewards.mean()),
                "eval_reward_std": float(rewards.std()),
                "alpha": state.alpha,
                **{k: float(v) for k, v in last_losses.items() if k != "alpha"},
            }
            if infos and isinstance(infos[-1], dict):
                for key in ("mean_goal_dist",):
                    vals = [i[key] for i in infos if key in i]
                    if vals:
                        record[key] = float(np.mean(vals))
            metrics.append(record)
            if progress is not None:
                progress(record)
            while next_eval <= env_steps:
                next_eval += cfg.eval_interval

    return TrainResult(state=state, metrics=metrics, n=n, env_steps=env_steps)

"""Command-line interface: train, evaluate, scale sweeps, invariant checks.

Four subcommands share one flat dotted-key config dialect (e.g. `sac.gamma =
0.97`, one pair per line, `#` comments).  Every key has a default; unknown
keys are rejected before any compute starts, and each run writes a manifest
echoing the fully resolved configuration so results stay auditable.

Exit codes: 0 success, 1 invariant or runtime failure, 2 configuration
error, 3 artifact I/O error.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .checks import format_report, run_all_checks
from .envs import NavConfig, NavEnv
from .errors import ArtifactError, ConfigError, ContractError, PhswarmError
from .graphs import InteractionGraph
from .protocol import ChannelModel, ChannelSession, run_protocol
from .sac import SacConfig, evaluate_policy, train
from .serialize import (
    json_dump,
    jsonl_dump,
    load_checkpoint,
    save_train_state,
)

# Draw counts for the `check` subcommand; module-level so tests can shrink
# them without adding flags the interface does not document.
CHECK_STRUCTURE_DRAWS = 1000
CHECK_GRADIENT_DRAWS = 100
CHECK_PROTOCOL_DRAWS = 200

_ENV_INT_FIELDS = {"n", "max_steps"}
_SAC_INT_FIELDS = {
    "batch", "capacity", "warmup", "eval_interval", "eval_episodes",
    "num_envs", "total_steps",
}


def _default_config():
    """Every recognized key with its default value, flat dotted-key form."""
    resolved = {"seed": 0, "out": "", "env.scenario": "navigation", "env.k": 1}
    for f in dataclasses.fields(NavConfig):
        resolved[f"env.{f.name}"] = f.default
    for f in dataclasses.fields(SacConfig):
        resolved[f"sac.{f.name}"] = f.default
    for key, value in (
        ("channel.p_loss", 0.0),
        ("channel.noise_std", 0.0),
        ("channel.delay_lo", 0),
        ("channel.delay_hi", 0),
    ):
        resolved[key] = value
    return resolved


def _coerce(key, value, default):
    """Coerce a parsed config value onto the default's type, or reject it."""
    if key == "sac.target_entropy":  # the one optional float
        if value is None or value == "none":
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number or none, got {value!r}")
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{key}: unexpected boolean value")
    if isinstance(default, int):
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def parse_config_file(path):
    """Read `key = value` pairs; values parse as JSON scalars, else strings."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"{path}:{ln}: expected `key = value`, got {raw!r}")
        if key in pairs:
            raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
        try:
            pairs[key] = json.loads(value)
        except json.JSONDecodeError:
            pairs[key] = value
    return pairs


def resolve_config(pairs):
    """Merge overrides onto the defaults, rejecting unknown keys up front."""
    resolved = _default_config()
    unknown = sorted(set(pairs) - set(resolved))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in pairs.items():
        resolved[key] = _coerce(key, value, resolved[key])
    if resolved["env.scenario"] != "navigation":
        raise ConfigError(
            f"unknown scenario {resolved['env.scenario']!r}; only navigation is provided"
        )
    return resolved


def _nav_config(resolved, n=None):
    fields = {f.name: resolved[f"env.{f.name}"] for f in dataclasses.fields(NavConfig)}
    if n is not None:
        fields["n"] = n
    return NavConfig(**fields)


def _sac_config(resolved):
    fields = {f.name: resolved[f"sac.{f.name}"] for f in dataclasses.fields(SacConfig)}
    try:
        return SacConfig(**fields)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_delay(text):
    try:
        lo, _, hi = text.partition(":")
        bounds = (int(lo), int(hi))
    except ValueError:
        raise ConfigError(f"--delay expects lo:hi, got {text!r}") from None
    if not 1 <= bounds[0] <= bounds[1]:
        raise ConfigError(f"--delay expects 1 <= lo <= hi, got {text!r}")
    return bounds


def _channel_from_args(args, seed):
    """A ChannelModel when any channel flag is active, else None."""
    p_loss = args.p_loss or 0.0
    noise = args.noise or 0.0
    delay = _parse_delay(args.delay) if args.delay else None
    if p_loss == 0.0 and noise == 0.0 and delay is None:
        return None
    try:
        return ChannelModel(
            p_loss=p_loss, noise_std=noise, delay=delay, seed=seed
        )
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args):
    pairs = parse_config_file(args.config) if args.config else {}
    resolved = resolve_config(pairs)
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.n is not None:
        resolved["env.n"] = args.n
    if args.out is not None:
        resolved["out"] = args.out
    seed = resolved["seed"]
    nav_cfg = _nav_config(resolved)
    sac_cfg = _sac_config(resolved)
    out_dir = resolved["out"] or (
        f"runs/{resolved['env.scenario']}-n{nav_cfg.n}-seed{seed}"
    )
    resolved["out"] = out_dir

    def env_factory(seed_seq):
        return NavEnv(nav_cfg, np.random.default_rng(seed_seq))

    def progress(record):
        print(json.dumps(record), flush=True)

    result = train(env_factory, sac_cfg, seed, progress=progress)

    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    save_train_state(ckpt_path, result.state, config=resolved)
    jsonl_dump(result.metrics, os.path.join(out_dir, "metrics.jsonl"))
    json_dump(resolved, os.path.join(out_dir, "config.json"))
    final = result.metrics[-1] if result.metrics else {}
    print(
        f"trained {result.env_steps} steps (n={result.n}); "
        f"final eval reward {final.get('eval_reward_mean', float('nan')):.2f}; "
        f"artifacts in {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval / scale
# ---------------------------------------------------------------------------


def _protocol_rollouts(params, env, channel, episodes, seed):
    """Deterministic episodes with actions computed over the lossy channel."""
    rewards, infos = [], []
    for ep in range(episodes):
        session = ChannelSession(
            dataclasses.replace(channel, seed=channel.seed + ep)
        )
        x, adj = env.reset()
        total, info, step_idx = 0.0, {}, 0
        while True:
            graph = InteractionGraph(adj)
            mu = run_protocol(
                params, env.model, x, graph,
                channel=session.channel, session=session, step=step_idx,
            )
            x, adj, r, done, info = env.step(np.tanh(mu))
            total += r
            step_idx += 1
            if done:
                break
        rewards.append(total)
        infos.append(info)
    return np.asarray(rewards), infos


def _evaluate(ckpt, n, episodes, seed, channel):
    nav_cfg = _nav_config(
        resolve_config(
            {k: v for k, v in ckpt.config.items() if k.startswith("env.")}
        ),
        n=n,
    )
    env = NavEnv(nav_cfg, np.random.default_rng(seed))
    if channel is None:
        rewards, infos = evaluate_policy(ckpt.policy, env, episodes)
    else:
        rewards, infos = _protocol_rollouts(
            ckpt.policy, env, channel, episodes, seed
        )
    summary = {
        "n": n,
        "episodes": episodes,
        "seed": seed,
        "reward_mean": float(rewards.mean()),
        "reward_std": float(rewards.std()),
        "reward_per_robot": float(rewards.mean() / n),
    }
    dists = [i["mean_goal_dist"] for i in infos if "mean_goal_dist" in i]
    if dists:
        summary["mean_goal_dist"] = float(np.mean(dists))
    if channel is not None:
        summary["channel"] = {
            "p_loss": channel.p_loss,
            "noise_std": channel.noise_std,
            "delay": list(channel.delay) if channel.delay else None,
        }
    return summary


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    n = args.n if args.n is not None else int(ckpt.config.get("env.n", 4))
    episodes = args.episodes if args.episodes is not None else 10
    if episodes < 1 or n < 1:
        raise ConfigError("--n and --episodes must be positive")
    channel = _channel_from_args(args, seed)
    summary = _evaluate(ckpt, n, episodes, seed, channel)
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        json_dump(summary, args.out)
    return 0


def _parse_n_list(text):
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--n expects integers like 4,8,12, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"--n expects positive team sizes, got {text!r}")
    return values


def cmd_scale(args):
    ckpt = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    episodes = args.episodes if args.episodes is not None else 10
    n_list = _parse_n_list(args.n if args.n is not None else "4,8,12,16")
    channel = _channel_from_args(args, seed)
    rows = [_evaluate(ckpt, n, episodes, seed, channel) for n in n_list]
    header = f"{'n':>4}  {'episodes':>8}  {'seed':>6}  {'reward_mean':>12}  {'reward_std':>11}  {'R_per_robot':>11}"
    print(header)
    for row in rows:
        print(
            f"{row['n']:>4}  {row['episodes']:>8}  {row['seed']:>6}  "
            f"{row['reward_mean']:>12.3f}  {row['reward_std']:>11.3f}  "
            f"{row['reward_per_robot']:>11.3f}"
        )
    if args.out:
        jsonl_dump(rows, args.out)
    return 0


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def cmd_check(args):
    seed = args.seed if args.seed is not None else 0
    results = run_all_checks(
        seed,
        structure_draws=CHECK_STRUCTURE_DRAWS,
        gradient_draws=CHECK_GRADIENT_DRAWS,
        protocol_draws=CHECK_PROTOCOL_DRAWS,
    )
    print(format_report(results))
    if args.out:
        jsonl_dump([dataclasses.asdict(r) for r in results], args.out)
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_channel_flags(sub):
    sub.add_argument("--p-loss", type=float, default=None,
                     help="per-pair message drop probability")
    sub.add_argument("--noise", type=float, default=None,
                     help="payload noise standard deviation")
    sub.add_argument("--delay", type=str, default=None, metavar="LO:HI",
                     help="uniform integer delay range in control steps")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="phswarm",
        description="Distributed energy-based control for robot swarms.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="train a navigation policy")
    p_train.add_argument("--config", type=str, default=None,
                         help="flat dotted-key config file")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--n", type=int, default=None, help="team size")
    p_train.add_argument("--out", type=str, default=None,
                         help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = subs.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint", type=str)
    p_eval.add_argument("--n", type=int, default=None,
                        help="team size (default: training size)")
    p_eval.add_argument("--episodes", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", type=str, default=None,
                        help="summary JSON path")
    _add_channel_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_scale = subs.add_parser("scale", help="evaluate one checkpoint at several team sizes")
    p_scale.add_argument("checkpoint", type=str)
    p_scale.add_argument("--n", type=str, default=None,
                         help="comma-separated team sizes, e.g. 4,8,12,16")
    p_scale.add_argument("--episodes", type=int, default=None)
    p_scale.add_argument("--seed", type=int, default=None)
    p_scale.add_argument("--out", type=str, default=None,
                         help="rows as line-delimited JSON")
    _add_channel_flags(p_scale)
    p_scale.set_defaults(func=cmd_scale)

    p_check = subs.add_parser("check", help="run the invariant suites")
    p_check.add_argument("--seed", type=int, default=None)
    p_check.add_argument("--out", type=str, default=None,
                         help="suite results as line-delimited JSON")
    p_check.set_defaults(func=cmd_check)

    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return 3
    except PhswarmError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 1


def run():
    raise SystemExit(main())


if __name__ == "__main__":
    run()

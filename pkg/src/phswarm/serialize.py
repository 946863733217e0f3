"""Binary checkpoints and line-delimited record files.

A checkpoint is a compact binary container: a JSON manifest describing the
network layout (layer dims, activation kinds, neighborhood depth k, action
bound) followed by an ordered list of named tensors.  Each tensor is stored
as two little-endian uint32 dims plus row-major little-endian float64
values.  Policy-only checkpoints hold the five attention stacks; training
checkpoints additionally hold the four critic networks and the temperature.

All file writes are atomic (temp file in the target directory, then rename),
so an interrupted run never leaves a half-written artifact behind.  Metrics
and trajectories are line-delimited JSON records, one object per line.

Every read failure — missing file, truncated payload, manifest/tensor
mismatch — surfaces as ArtifactError so callers can map it to one exit path.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ArtifactError, DimensionError
from .policy import AttentionStackParams, PolicyParams
from .sac import CriticParams

MAGIC = b"PHSW"
FORMAT_VERSION = 1

# Roles within one attention layer, in storage order.
_STACK_ROLES = ("A", "B", "C", "D")
_STACK_ORDER = ("R", "J", "M", "U", "VAR")
_CRITIC_ORDER = ("q1", "q2", "q1_target", "q2_target")


# ---------------------------------------------------------------------------
# atomic file primitives
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, payload):
    """Write payload so the file at path is either complete or absent."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    tmp = None
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".partial-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
        tmp = None
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp is not None:
            try:
                os.remove(tmp)
            except OSError:
                pass


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# line-delimited records
# ---------------------------------------------------------------------------


def _jsonable(obj):
    """Coerce numpy scalars/arrays so records stay plain JSON."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON-serializable")


def jsonl_dump(records, path):
    """Atomically write an iterable of dicts as one JSON object per line."""
    lines = [json.dumps(rec, default=_jsonable, sort_keys=True) for rec in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def jsonl_load(path):
    """Read a line-delimited JSON file back into a list of dicts."""
    text = _read_bytes(path).decode("utf-8")
    records = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{path}:{ln}: invalid record: {exc}") from exc
    return records


def json_dump(obj, path):
    """Atomically write one JSON document (e.g. the resolved-config manifest)."""
    atomic_write_text(path, json.dumps(obj, default=_jsonable, sort_keys=True, indent=2) + "\n")


def json_load(path):
    text = _read_bytes(path).decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: invalid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# named-tensor encoding
# ---------------------------------------------------------------------------


def named_tensor_bytes(items):
    """Encode (name, array) pairs as length-prefixed names + tensor payloads."""
    chunks = []
    for name, arr in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(Tensor(arr).to_bytes())
    return b"".join(chunks)


def _parse_named_tensors(buf, offset, count, path):
    out = {}
    order = []
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            name = buf[offset : offset + name_len].decode("utf-8")
            offset += name_len
            rows, cols = struct.unpack_from("<II", buf, offset)
            size = 8 + 8 * rows * cols
            tensor = Tensor.from_bytes(bytes(buf[offset : offset + size]))
            offset += size
        except (struct.error, UnicodeDecodeError, DimensionError) as exc:
            raise ArtifactError(f"{path}: truncated or corrupt tensor table: {exc}") from exc
        if name in out:
            raise ArtifactError(f"{path}: duplicate tensor name {name!r}")
        out[name] = tensor.data
        order.append(name)
    if offset != len(buf):
        raise ArtifactError(f"{path}: {len(buf) - offset} trailing bytes after tensor table")
    return out, order


def policy_parameter_bytes(params):
    """The policy's full ordered parameter serialization, for byte-level checks."""
    return named_tensor_bytes(params.items())


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything a saved run carries: policy, optional critics, scalars."""

    policy: PolicyParams
    critics: dict = field(default_factory=dict)  # name -> CriticParams
    scalars: dict = field(default_factory=dict)  # log_alpha, target_entropy, ...
    config: dict = field(default_factory=dict)   # resolved run config echo
    manifest: dict = field(default_factory=dict)


def _policy_manifest(params):
    stacks = {}
    for name in _STACK_ORDER:
        sp = params.stacks[name]
        stacks[name] = {
            "h_dims": list(sp.h_dims),
            "r_dims": list(sp.r_dims),
            "d_dims": list(sp.d_dims),
            "beta": sp.beta,
            "chi": sp.chi,
            "psis": list(sp.psis),
        }
    return {
        "n_x": params.n_x,
        "n_u": params.n_u,
        "k": params.k,
        "action_bound": params.action_bound,
        "ham_dim": params.ham_dim,
        "stacks": stacks,
    }


def _critic_manifest(cp):
    return {"n": cp.n, "n_x": cp.n_x, "n_u": cp.n_u, "n_layers": len(cp.layers)}


def save_checkpoint(path, policy, critics=None, scalars=None, config=None):
    """Write a checkpoint file; critics/scalars/config are optional extras."""
    critics = critics or {}
    manifest = {
        "format_version": FORMAT_VERSION,
        "policy": _policy_manifest(policy),
        "critics": {name: _critic_manifest(cp) for name, cp in critics.items()},
        "scalars": dict(scalars or {}),
        "config": dict(config or {}),
    }
    items = list(policy.items())
    for name in _CRITIC_ORDER:
        if name in critics:
            items.extend(
                (f"{name}/{sub}", arr) for sub, arr in critics[name].items()
            )
    unexpected = set(critics) - set(_CRITIC_ORDER)
    if unexpected:
        raise ArtifactError(f"unknown critic names {sorted(unexpected)}")
    body = named_tensor_bytes(items)
    header = MAGIC + struct.pack("<I", FORMAT_VERSION)
    manifest_raw = json.dumps(manifest, default=_jsonable, sort_keys=True).encode("utf-8")
    payload = (
        header
        + struct.pack("<I", len(manifest_raw))
        + manifest_raw
        + struct.pack("<I", len(items))
        + body
    )
    atomic_write_bytes(path, payload)


def _rebuild_policy(meta, tensors, path):
    stacks = {}
    for name in _STACK_ORDER:
        try:
            sm = meta["stacks"][name]
        except KeyError:
            raise ArtifactError(f"{path}: manifest is missing stack {name!r}")
        h_dims, r_dims, d_dims = sm["h_dims"], sm["r_dims"], sm["d_dims"]
        layers = []
        for w, (h, r, d) in enumerate(zip(h_dims, r_dims, d_dims)):
            layer = {}
            expected = {"A": (r, h), "B": (r, h), "C": (r, h), "D": (d, r)}
            for role in _STACK_ROLES:
                key = f"{name}/{w}/{role}"
                if key not in tensors:
                    raise ArtifactError(f"{path}: missing tensor {key!r}")
                arr = tensors.pop(key)
                if arr.shape != expected[role]:
                    raise ArtifactError(
                        f"{path}: tensor {key!r} has shape {arr.shape}, "
                        f"manifest says {expected[role]}"
                    )
                layer[role] = arr
            layers.append(layer)
        stacks[name] = AttentionStackParams(
            name=name,
            h_dims=tuple(h_dims),
            r_dims=tuple(r_dims),
            d_dims=tuple(d_dims),
            beta=sm["beta"],
            chi=sm["chi"],
            psis=tuple(sm["psis"]),
            layers=layers,
        )
    return PolicyParams(
        n_x=int(meta["n_x"]),
        n_u=int(meta["n_u"]),
        k=int(meta["k"]),
        action_bound=float(meta["action_bound"]),
        stacks=stacks,
        ham_dim=int(meta["ham_dim"]),
    )


def _rebuild_critic(name, meta, tensors, path):
    layers = []
    for li in range(int(meta["n_layers"])):
        pair = []
        for sub in ("W", "b"):
            key = f"{name}/{li}/{sub}"
            if key not in tensors:
                raise ArtifactError(f"{path}: missing tensor {key!r}")
            pair.append(tensors.pop(key))
        layers.append((pair[0], pair[1]))
    return CriticParams(
        n=int(meta["n"]), n_x=int(meta["n_x"]), n_u=int(meta["n_u"]), layers=layers
    )


def load_checkpoint(path):
    """Read a checkpoint file back; raises ArtifactError on any corruption."""
    buf = _read_bytes(path)
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ArtifactError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format version {version}")
    (manifest_len,) = struct.unpack_from("<I", buf, 8)
    if len(buf) < 12 + manifest_len + 4:
        raise ArtifactError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buf[12 : 12 + manifest_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt manifest: {exc}") from exc
    offset = 12 + manifest_len
    (count,) = struct.unpack_from("<I", buf, offset)
    tensors, _ = _parse_named_tensors(buf, offset + 4, count, path)

    policy = _rebuild_policy(manifest.get("policy", {}), tensors, path)
    critics = {
        name: _rebuild_critic(name, meta, tensors, path)
        for name, meta in manifest.get("critics", {}).items()
    }
    if tensors:
        raise ArtifactError(
            f"{path}: unexpected tensors {sorted(tensors)} not named in the manifest"
        )
    return Checkpoint(
        policy=policy,
        critics=critics,
        scalars=dict(manifest.get("scalars", {})),
        config=dict(manifest.get("config", {})),
        manifest=manifest,
    )


def load_policy(path):
    """Policy parameters only — the common case for evaluation."""
    return load_checkpoint(path).policy


def save_train_state(path, state, config=None):
    """Checkpoint a SAC training state: policy, four critics, temperature."""
    save_checkpoint(
        path,
        state.policy,
        critics={
            "q1": state.q1,
            "q2": state.q2,
            "q1_target": state.q1_target,
            "q2_target": state.q2_target,
        },
        scalars={
            "log_alpha": state.log_alpha,
            "target_entropy": state.target_entropy,
        },
        config=config,
    )

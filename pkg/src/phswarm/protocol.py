"""Three-round message exchange realizing the distributed controller.

Each control step every robot i exchanges with its k-hop neighbors:

  round 1: its state x^i;
  round 2: what it computed about each neighbor from the received states —
           the cross gradient ∂H^j/∂x^i and the encoding columns Z^R_{ji},
           Z^J_{ji} that robot i needs to antisymmetrize its own blocks;
  round 3: its gathered energy gradient ∂H_θ/∂x^j.

With a perfect channel the result equals the centralized evaluation of the
control law exactly; the rounds only reorganize who computes what.

The channel model covers three impairments, sampled once per link per
control step: an undirected link drops with probability p_loss (both
directions die for the step); a surviving directed link's payloads are
perturbed by N(0, noise_std² I) with probability noise_prob; or delivery is
delayed by a uniform integer number of steps, after which the stale payloads
are delivered and used, unless fresher ones arrived the same step. A missing
message zeroes that neighbor's contribution for the step, which degrades the
law gracefully toward the self-only controller.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, MatchingError
from .graphs import k_hop
from .policy import NeighborhoodView, encode_view, COND_LIMIT


@dataclass(frozen=True)
class Message:
    round: int
    sender: int
    receiver: int
    payload: dict  # arrays keyed by name; contents fixed by the round
    send_step: int = 0


@dataclass(frozen=True)
class ChannelModel:
    """Imperfect-link parameters. Probabilities must lie in [0, 1]."""

    p_loss: float = 0.0
    noise_std: float = 0.0
    delay: tuple = None  # (lo, hi) inclusive step range, or None
    noise_prob: float = 0.1
    delay_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for p in (self.p_loss, self.noise_prob, self.delay_prob):
            if not 0.0 <= p <= 1.0:
                raise ContractError("channel probabilities must lie in [0, 1]")
        if self.delay is not None and not (1 <= self.delay[0] <= self.delay[1]):
            raise ContractError("delay range must satisfy 1 <= lo <= hi")


class ChannelSession:
    """Mutable channel state: the rng, per-step link fates, in-flight payloads."""

    def __init__(self, channel):
        self.channel = channel
        self.rng = np.random.default_rng(channel.seed)
        self.pending = {}  # (round, sender, receiver) -> [(arrival, send_step, payload)]
        self._fate_step = None
        self._fates = {}

    def fates_for(self, links, step):
        """One fate per directed link per control step, drop shared per pair."""
        if self._fate_step != step:
            self._fates = {}
            self._fate_step = step
        ch = self.channel
        missing = [lk for lk in links if lk not in self._fates]
        for s, r in sorted(missing):
            if (r, s) in self._fates and "drop" in self._fates[(r, s)]:
                dropped = self._fates[(r, s)]["drop"]
            else:
                dropped = bool(self.rng.random() < ch.p_loss)
            noisy = bool(self.rng.random() < ch.noise_prob) and ch.noise_std > 0
            delayed = 0
            if ch.delay is not None and self.rng.random() < ch.delay_prob:
                delayed = int(self.rng.integers(ch.delay[0], ch.delay[1] + 1))
            self._fates[(s, r)] = {"drop": dropped, "noise": noisy, "delay": delayed}
        return {lk: self._fates[lk] for lk in links}


def _perturb(payload, rng, std):
    out = {}
    for key, arr in payload.items():
        arr = np.asarray(arr, dtype=np.float64)
        out[key] = arr + rng.normal(0.0, std, size=arr.shape)
    return out


def channel_apply(msgs, channel, session=None, step=0, trace=None):
    """Pass one round's messages through the channel; returns delivered ones.

    Messages dropped this step vanish; delayed ones are queued inside the
    session and re-emitted (stale) once their arrival step is reached, unless
    fresher payloads for the same link arrive at the same step.
    """
    if channel is None:
        return list(msgs)
    if session is None:
        session = ChannelSession(channel)
    if not msgs:
        return []
    links = sorted({(m.sender, m.receiver) for m in msgs})
    fates = session.fates_for(links, step)
    rnd = msgs[0].round
    for m in msgs:
        fate = fates[(m.sender, m.receiver)]
        flags = {
            "dropped": fate["drop"],
            "noisy": fate["noise"],
            "delayed": fate["delay"] > 0 and not fate["drop"],
        }
        if trace is not None:
            trace.append(
                {
                    "step": step, "round": m.round,
                    "sender": m.sender, "receiver": m.receiver, **flags,
                }
            )
        if fate["drop"]:
            continue
        payload = m.payload
        if fate["noise"]:
            payload = _perturb(payload, session.rng, channel.noise_std)
        key = (m.round, m.sender, m.receiver)
        arrival = step + fate["delay"]
        session.pending.setdefault(key, []).append((arrival, step, payload))

    delivered = []
    for (m_round, s, r), queue in list(session.pending.items()):
        if m_round != rnd:
            continue
        arrived = [item for item in queue if item[0] <= step]
        if not arrived:
            continue
        remaining = [item for item in queue if item[0] > step]
        if remaining:
            session.pending[(m_round, s, r)] = remaining
        else:
            del session.pending[(m_round, s, r)]
        _, send_step, payload = max(arrived, key=lambda it: it[1])
        delivered.append(
            Message(round=m_round, sender=s, receiver=r,
                    payload=payload, send_step=send_step)
        )
    return delivered


def _pinv_gain(rm, x_i):
    F = rm.F(x_i)
    gram = F.T @ F
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise MatchingError("input gain F is rank deficient; cannot match")
    return np.linalg.solve(gram, F.T)


def run_protocol(
    params, model, state, graph, channel=None, session=None, step=0, trace=None
):
    """Distributed deterministic control via three message rounds; (n, n_u).

    With channel=None every message is delivered and the result equals the
    centralized mean control; otherwise robots use only what arrived.
    """
    x = np.asarray(state.x if hasattr(state, "x") else state, dtype=np.float64)
    n = graph.n
    if channel is not None and session is None:
        session = ChannelSession(channel)

    hoods = [k_hop(graph, i, params.k) for i in range(n)]

    # round 1: broadcast states
    msgs = [
        Message(round=1, sender=int(j), receiver=i, payload={"x": x[int(j)]},
                send_step=step)
        for i in range(n)
        for j in hoods[i]
        if int(j) != i
    ]
    delivered = channel_apply(msgs, channel, session, step, trace)
    got_state = {(m.sender, m.receiver): m.payload["x"] for m in delivered}

    views, enc = [], []
    for i in range(n):
        ids = [i] + sorted(
            j for j in (int(q) for q in hoods[i]) if j != i and (j, i) in got_state
        )
        ids = np.array(sorted(ids), dtype=np.int64)
        cols = np.stack(
            [x[i] if j == i else got_state[(int(j), i)] for j in ids], axis=1
        )
        view = NeighborhoodView(owner=i, ids=ids, x=np.ascontiguousarray(cols))
        views.append(view)
        enc.append(encode_view(params, view))

    def col_of(e, j):
        pos = int(np.searchsorted(e["ids"], j))
        return pos if pos < len(e["ids"]) and e["ids"][pos] == j else None

    # round 2: cross gradients and encoding columns, j -> i
    msgs = []
    for j in range(n):
        e = enc[j]
        for i_id in e["ids"]:
            i_id = int(i_id)
            if i_id == j:
                continue
            c = col_of(e, i_id)
            msgs.append(
                Message(
                    round=2, sender=j, receiver=i_id, send_step=step,
                    payload={
                        "grad_h": e["grad_h"][:, c],
                        "z_r": e["z_r"][:, c],
                        "z_j": e["z_j"][:, c],
                    },
                )
            )
    delivered = channel_apply(msgs, channel, session, step, trace)
    got_cross = {(m.sender, m.receiver): m.payload for m in delivered}

    gathered = np.zeros((model.n_x, n))
    for i in range(n):
        e = enc[i]
        gathered[:, i] = e["grad_h"][:, col_of(e, i)]
        for j in range(n):
            if j != i and (j, i) in got_cross:
                gathered[:, i] += got_cross[(j, i)]["grad_h"]

    # round 3: gathered gradients, j -> i
    msgs = [
        Message(round=3, sender=int(j), receiver=i,
                payload={"grad": gathered[:, int(j)]}, send_step=step)
        for i in range(n)
        for j in hoods[i]
        if int(j) != i
    ]
    delivered = channel_apply(msgs, channel, session, step, trace)
    got_gathered = {(m.sender, m.receiver): m.payload["grad"] for m in delivered}

    mu = np.zeros((n, model.n_u))
    for i, rm in enumerate(model.models):
        e = enc[i]
        c_self = col_of(e, i)
        z_ii = e["z_r"][:, c_self]
        pair_mass = 2.0 * z_ii
        pre = np.zeros(model.n_x)
        for j in (int(q) for q in e["ids"]):
            if j == i:
                continue
            cross = got_cross.get((j, i))
            grad_j = got_gathered.get((j, i))
            if cross is None or grad_j is None:
                continue
            c_j = col_of(e, j)
            w_ij = (e["z_j"][:, c_j] - cross["z_j"]) + (e["z_r"][:, c_j] + cross["z_r"])
            pair_mass = pair_mass + e["z_r"][:, c_j] + cross["z_r"]
            pre += w_ij * grad_j
        w_ii = z_ii - pair_mass
        pre += w_ii * gathered[:, i]
        pre -= (rm.J(x[i]) - rm.R(x[i])) @ rm.dH(x[i])
        mu[i] = _pinv_gain(rm, x[i]) @ pre
    return mu

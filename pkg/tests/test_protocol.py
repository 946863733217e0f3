"""Message-passing controller: equivalence with the centralized law and
behavior under lossy, noisy, and delayed links."""

import numpy as np
import pytest

from phswarm.dynamics import compose, double_integrator, navigation_robot
from phswarm.errors import ContractError
from phswarm.graphs import InteractionGraph
from phswarm.policy import dense_mean_control, init_policy, mean_control
from phswarm.protocol import (
    ChannelModel,
    ChannelSession,
    Message,
    channel_apply,
    run_protocol,
)


def random_graph(rng, n, p=0.5):
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                a[i, j] = a[j, i] = 1.0
    return InteractionGraph(a)


def setup(seed, n, k=1, dim=1):
    rng = np.random.default_rng(seed)
    model = compose([double_integrator(dim) for _ in range(n)])
    params = init_policy(rng, n_x=2 * dim, n_u=dim, k=k)
    x = rng.normal(size=(n, 2 * dim))
    graph = random_graph(rng, n)
    return params, model, x, graph


# ---------------------------------------------------------------------------
# equivalence with the centralized law
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed,n", [(0, 2), (1, 3), (2, 5), (3, 8)])
def test_perfect_channel_matches_centralized(seed, n):
    params, model, x, graph = setup(seed, n)
    mu = run_protocol(params, model, x, graph)
    np.testing.assert_allclose(mu, dense_mean_control(params, model, x, graph),
                               atol=1e-10)
    np.testing.assert_allclose(mu, mean_control(params, model, x, graph),
                               atol=1e-10)


def test_perfect_channel_matches_centralized_two_hop():
    params, model, x, graph = setup(7, 6, k=2)
    mu = run_protocol(params, model, x, graph)
    np.testing.assert_allclose(mu, dense_mean_control(params, model, x, graph),
                               atol=1e-10)


def test_identity_channel_object_changes_nothing():
    params, model, x, graph = setup(11, 4)
    channel = ChannelModel(p_loss=0.0, noise_std=0.0, delay=None, seed=5)
    mu = run_protocol(params, model, x, graph, channel=channel)
    np.testing.assert_allclose(mu, dense_mean_control(params, model, x, graph),
                               atol=1e-10)


def test_navigation_model_roundtrip():
    rng = np.random.default_rng(21)
    n, dim = 4, 2
    model = compose([navigation_robot(dim) for _ in range(n)])
    params = init_policy(rng, n_x=3 * dim, n_u=dim, k=1)
    x = rng.normal(size=(n, 3 * dim))
    graph = random_graph(rng, n, p=0.7)
    mu = run_protocol(params, model, x, graph)
    np.testing.assert_allclose(mu, dense_mean_control(params, model, x, graph),
                               atol=1e-10)


# ---------------------------------------------------------------------------
# degenerate team sizes and total loss
# ---------------------------------------------------------------------------


def test_single_robot_sends_no_messages():
    params, model, x, _ = setup(4, 1)
    graph = InteractionGraph(np.zeros((1, 1)))
    trace = []
    mu = run_protocol(params, model, x, graph,
                      channel=ChannelModel(seed=0), trace=trace)
    assert trace == []
    np.testing.assert_allclose(mu, dense_mean_control(params, model, x, graph),
                               atol=1e-12)


def test_total_loss_reduces_to_self_only_control():
    params, model, x, graph = setup(5, 5)
    channel = ChannelModel(p_loss=1.0, seed=3)
    mu = run_protocol(params, model, x, graph, channel=channel)
    assert np.all(np.isfinite(mu))
    edgeless = InteractionGraph(np.zeros((graph.n, graph.n)))
    np.testing.assert_allclose(
        mu, dense_mean_control(params, model, x, edgeless), atol=1e-10
    )


# ---------------------------------------------------------------------------
# message accounting
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed,n,k", [(6, 4, 1), (8, 6, 1), (9, 6, 2)])
def test_three_messages_per_neighbor_per_step(seed, n, k):
    from phswarm.graphs import k_hop

    params, model, x, graph = setup(seed, n, k=k)
    trace = []
    run_protocol(params, model, x, graph, channel=ChannelModel(seed=0),
                 trace=trace)
    expected = sum(3 * (len(k_hop(graph, i, k)) - 1) for i in range(n))
    assert len(trace) == expected
    sent = {(r["sender"], r["receiver"], r["round"]) for r in trace}
    assert len(sent) == len(trace)  # no duplicate link/round records
    for rec in trace:
        assert rec["round"] in (1, 2, 3)
        assert set(rec) == {
            "step", "round", "sender", "receiver", "dropped", "noisy", "delayed",
        }


# ---------------------------------------------------------------------------
# channel behavior at the message level
# ---------------------------------------------------------------------------


def test_empirical_drop_rate():
    channel = ChannelModel(p_loss=0.1, seed=42)
    session = ChannelSession(channel)
    n_links = 100_000
    msgs = [
        Message(round=1, sender=2 * i, receiver=2 * i + 1, payload={"x": np.zeros(2)})
        for i in range(n_links)
    ]
    delivered = channel_apply(msgs, channel, session, step=0)
    rate = 1.0 - len(delivered) / n_links
    assert abs(rate - 0.1) < 0.005


def test_drop_fate_is_shared_per_undirected_link():
    channel = ChannelModel(p_loss=0.5, seed=7)
    session = ChannelSession(channel)
    msgs = []
    for i in range(2000):
        a, b = 2 * i, 2 * i + 1
        msgs.append(Message(round=1, sender=a, receiver=b, payload={"x": np.zeros(1)}))
        msgs.append(Message(round=1, sender=b, receiver=a, payload={"x": np.zeros(1)}))
    delivered = channel_apply(msgs, channel, session, step=0)
    seen = {(m.sender, m.receiver) for m in delivered}
    for a, b in ((m.sender, m.receiver) for m in msgs):
        assert ((a, b) in seen) == ((b, a) in seen)


def test_noise_perturbs_surviving_payloads():
    channel = ChannelModel(p_loss=0.0, noise_std=0.05, noise_prob=1.0, seed=1)
    session = ChannelSession(channel)
    base = np.ones(4)
    msgs = [Message(round=1, sender=0, receiver=1, payload={"x": base})]
    (out,) = channel_apply(msgs, channel, session, step=0)
    assert not np.allclose(out.payload["x"], base)
    assert np.max(np.abs(out.payload["x"] - base)) < 0.05 * 6  # 6 sigma

    # noise_std == 0 keeps payloads exact even when the noise fate fires
    quiet = ChannelModel(p_loss=0.0, noise_std=0.0, noise_prob=1.0, seed=1)
    (out,) = channel_apply(msgs, quiet, ChannelSession(quiet), step=0)
    np.testing.assert_array_equal(out.payload["x"], base)


def test_delayed_messages_arrive_stale():
    channel = ChannelModel(delay=(2, 2), delay_prob=1.0, seed=0)
    session = ChannelSession(channel)

    def send(step):
        msgs = [Message(round=1, sender=0, receiver=1,
                        payload={"x": np.array([float(step)])}, send_step=step)]
        return channel_apply(msgs, channel, session, step=step)

    assert send(0) == []          # in flight
    assert send(1) == []
    (out,) = send(2)              # the step-0 payload arrives two steps late
    assert out.send_step == 0
    np.testing.assert_array_equal(out.payload["x"], [0.0])
    (out,) = send(3)
    assert out.send_step == 1


def test_noisy_lossy_protocol_stays_finite_and_differs():
    params, model, x, graph = setup(13, 5)
    clean = run_protocol(params, model, x, graph)
    channel = ChannelModel(p_loss=0.3, noise_std=0.05, delay=(1, 3), seed=9)
    mu = run_protocol(params, model, x, graph, channel=channel)
    assert np.all(np.isfinite(mu))
    assert not np.allclose(mu, clean)


def test_multi_step_session_with_delays_runs():
    params, model, x, graph = setup(17, 4)
    channel = ChannelModel(p_loss=0.2, noise_std=0.01, delay=(1, 5), seed=2)
    session = ChannelSession(channel)
    rng = np.random.default_rng(0)
    for step in range(6):
        mu = run_protocol(params, model, x, graph, channel=channel,
                          session=session, step=step)
        assert np.all(np.isfinite(mu))
        x = x + 0.01 * rng.normal(size=x.shape)


def test_channel_reproducibility():
    params, model, x, graph = setup(19, 5)
    channel = ChannelModel(p_loss=0.25, noise_std=0.02, delay=(1, 4), seed=33)
    a = run_protocol(params, model, x, graph, channel=channel,
                     session=ChannelSession(channel))
    b = run_protocol(params, model, x, graph, channel=channel,
                     session=ChannelSession(channel))
    np.testing.assert_array_equal(a, b)


def test_channel_parameter_validation():
    with pytest.raises(ContractError):
        ChannelModel(p_loss=1.5)
    with pytest.raises(ContractError):
        ChannelModel(noise_prob=-0.1)
    with pytest.raises(ContractError):
        ChannelModel(delay=(0, 5))
    with pytest.raises(ContractError):
        ChannelModel(delay=(4, 2))

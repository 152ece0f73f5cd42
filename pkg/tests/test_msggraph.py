import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from roboduct.clock import EventScheduler
from roboduct.msggraph import (
    BadTopicName, MessageGraph, NoProvider, ProviderFault, QueuePolicy,
    ServiceSpec, ServiceTimeout, TopicSpec, TypeConflict, validate_topic_name,
)


def test_topic_name_validation():
    assert validate_topic_name("/cmd_vel") == "/cmd_vel"
    assert validate_topic_name("/a/b_2/c") == "/a/b_2/c"
    for bad in ("cmd_vel", "/", "/a/", "/a//b", "/a b", "", "/a-b"):
        with pytest.raises(BadTopicName):
            validate_topic_name(bad)


def test_publish_with_no_subscribers_is_fine():
    g = MessageGraph()
    pub = g.advertise(TopicSpec("/cmd_vel", "geometry/Twist"))
    pub.publish({"v": 1.0})  # no error


def test_multi_publisher_same_type_allowed():
    g = MessageGraph()
    p1 = g.advertise(TopicSpec("/tf", "TFMessage"))
    p2 = g.advertise(TopicSpec("/tf", "TFMessage"))
    got = []
    g.subscribe("/tf", callback=lambda env: got.append(env))
    p1.publish({"who": 1})
    p2.publish({"who": 2})
    p1.publish({"who": 3})
    assert [env.payload["who"] for env in got] == [1, 2, 3]


def test_type_conflict():
    g = MessageGraph()
    g.advertise(TopicSpec("/tf", "TFMessage"))
    with pytest.raises(TypeConflict):
        g.advertise(TopicSpec("/tf", "Twist"))


def test_subscribe_fifo_order():
    g = MessageGraph()
    pub = g.advertise(TopicSpec("/x", "T"))
    got = []
    g.subscribe("/x", callback=lambda env: got.append(env.seq))
    for _ in range(3):
        pub.publish({})
    assert got == [1, 2, 3]


def test_drop_oldest_bounded_queue():
    # Hand-stepped oracle: queue_length=2, burst of 5 while stalled ->
    # states [1],[1,2],[2,3],[3,4],[4,5]; drain yields the last 2.
    g = MessageGraph()
    pub = g.advertise(TopicSpec("/x", "T"))
    sub = g.subscribe("/x", QueuePolicy(queue_length=2))
    for _ in range(5):
        pub.publish({})
    assert [env.seq for env in sub.drain()] == [4, 5]
    assert sub.dropped == 3


def test_latched_topic_replays_to_new_subscriber():
    g = MessageGraph()
    pub = g.advertise(TopicSpec("/map", "nav/OccupancyGrid", latched=True))
    pub.publish({"map": 1})
    pub.publish({"map": 2})
    got = []
    g.subscribe("/map", callback=lambda env: got.append(env.payload["map"]))
    assert got == [2]
    pub.publish({"map": 3})
    assert got == [2, 3]


def test_latched_delivery_precedes_later_messages_for_paused_consumer():
    g = MessageGraph()
    pub = g.advertise(TopicSpec("/map", "G", latched=True))
    pub.publish({"v": "retained"})
    sub = g.subscribe("/map", QueuePolicy(queue_length=5))
    pub.publish({"v": "later"})
    assert [env.payload["v"] for env in sub.drain()] == ["retained", "later"]


def test_echo_service():
    g = MessageGraph()
    g.register_service(ServiceSpec("/echo"), lambda req: req)
    assert g.call_service("/echo", {"x": 1}) == {"x": 1}


def test_no_provider():
    g = MessageGraph()
    with pytest.raises(NoProvider):
        g.call_service("/missing", {})


def test_provider_exception_is_provider_fault():
    g = MessageGraph()

    def boom(req):
        raise RuntimeError("kaput")

    g.register_service(ServiceSpec("/boom"), boom)
    with pytest.raises(ProviderFault):
        g.call_service("/boom", {})


def test_slow_provider_times_out_and_late_response_discarded():
    sched = EventScheduler()
    g = MessageGraph(clock=sched.clock)
    pending = []
    g.register_service(ServiceSpec("/slow"), lambda req, respond: pending.append(respond))

    outcomes = []
    g.call_service_async("/slow", {}, timeout_ms=100,
                         callback=lambda err, resp: outcomes.append((err, resp)),
                         scheduler=sched)
    sched.run_for(200 * 1_000_000)
    assert len(outcomes) == 1
    assert isinstance(outcomes[0][0], ServiceTimeout)
    # Provider answers at 2x the timeout: must be dropped, no double delivery.
    pending[0](None, {"late": True})
    assert len(outcomes) == 1


def test_single_provider_per_service():
    from roboduct.msggraph import ServiceConflict
    g = MessageGraph()
    g.register_service(ServiceSpec("/s"), lambda req: req)
    with pytest.raises(ServiceConflict):
        g.register_service(ServiceSpec("/s"), lambda req: req)


def test_snapshot_empty():
    snap = MessageGraph().graph_snapshot()
    assert snap.topics == [] and snap.services == []


def test_snapshot_counts_and_unadvertise_retention():
    g = MessageGraph()
    pub = g.advertise(TopicSpec("/x", "T"))
    g.subscribe("/x")
    snap = g.graph_snapshot()
    assert len(snap.topics) == 1
    spec, pubs, subs = snap.topics[0]
    assert (spec.name, pubs, subs) == ("/x", 1, 1)
    # Unadvertise: publisher count drops to 0, topic retained while subscribed.
    pub.close()
    snap = g.graph_snapshot()
    assert [(t[1], t[2]) for t in snap.topics] == [(0, 1)]


def test_topic_removed_when_fully_released():
    g = MessageGraph()
    pub = g.advertise(TopicSpec("/x", "T"))
    sub = g.subscribe("/x")
    pub.close()
    sub.close()
    assert g.graph_snapshot().topics == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=3), min_size=1, max_size=40),
       st.integers(min_value=1, max_value=8))
def test_per_publisher_fifo_is_increasing_subsequence(publisher_picks, queue_length):
    # Messages from each publisher arrive at each subscriber in seq order,
    # and the received seqs are a subsequence of those published.
    g = MessageGraph()
    pubs = {i: g.advertise(TopicSpec("/t", "T")) for i in set(publisher_picks)}
    got = []
    g.subscribe("/t", QueuePolicy(queue_length=queue_length),
                callback=lambda env: got.append(env))
    published = {i: [] for i in pubs}
    for pick in publisher_picks:
        env = pubs[pick].publish({"p": pick})
        published[pick].append(env.seq)
    for p, seqs in published.items():
        seen = [env.seq for env in got if env.payload["p"] == p]
        assert seen == sorted(seen)
        it = iter(seqs)
        assert all(s in it for s in seen)  # subsequence check


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=10), st.integers(min_value=0, max_value=30))
def test_drop_oldest_property(queue_length, burst):
    g = MessageGraph()
    pub = g.advertise(TopicSpec("/t", "T"))
    sub = g.subscribe("/t", QueuePolicy(queue_length=queue_length))
    for _ in range(burst):
        pub.publish({})
    expected = list(range(max(1, burst - queue_length + 1), burst + 1))
    assert [env.seq for env in sub.drain()] == expected

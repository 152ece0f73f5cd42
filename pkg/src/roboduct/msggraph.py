"""In-process publish/subscribe message graph with topics and services.

This is the local stand-in for a robot middleware graph on both the device
and the cloud side: many-to-many topics with bounded drop-oldest delivery
queues, latched last-value replay, and single-provider request/reply
services with exactly-once completion.
"""

from __future__ import annotations

import inspect
import itertools
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import NS_PER_MS, EventScheduler

_SEGMENT_RE = re.compile(r"^[A-Za-z0-9_]+$")


class GraphError(Exception):
    pass


class BadTopicName(GraphError):
    pass


class TypeConflict(GraphError):
    pass


class ServiceConflict(GraphError):
    pass


class NoProvider(GraphError):
    pass


class ServiceTimeout(GraphError):
    pass


class ProviderFault(GraphError):
    pass


def validate_topic_name(path: str) -> str:
    if not isinstance(path, str) or not path.startswith("/") or path.endswith("/") or path == "/":
        raise BadTopicName(f"bad topic name {path!r}")
    for segment in path[1:].split("/"):
        if not _SEGMENT_RE.match(segment):
            raise BadTopicName(f"bad topic segment {segment!r} in {path!r}")
    return path


@dataclass(frozen=True)
class TopicSpec:
    name: str
    type_name: str
    latched: bool = False

    def __post_init__(self):
        validate_topic_name(self.name)


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    request_type: str = ""
    response_type: str = ""

    def __post_init__(self):
        validate_topic_name(self.name)


@dataclass(frozen=True)
class QueuePolicy:
    queue_length: int = 10
    throttle_rate_ms: int = 0

    def __post_init__(self):
        if self.queue_length < 1:
            raise ValueError("queue_length must be >= 1")


@dataclass(frozen=True)
class MessageEnvelope:
    topic: str
    type_name: str
    seq: int
    stamp_ns: int
    payload: object


@dataclass
class GraphSnapshot:
    topics: list  # (TopicSpec, publisher_count, subscriber_count)
    services: list  # ServiceSpec


class _Topic:
    def __init__(self, spec: TopicSpec):
        self.spec = spec
        self.publishers: set[Publisher] = set()
        self.subscriptions: set[Subscription] = set()
        self.retained: Optional[MessageEnvelope] = None


class Publisher:
    """Handle returned by advertise(); owns a per-publisher seq counter."""

    def __init__(self, graph: "MessageGraph", spec: TopicSpec):
        self._graph = graph
        self.spec = spec
        self._seq = itertools.count(1)
        self.closed = False

    def publish(self, payload, stamp_ns: Optional[int] = None) -> MessageEnvelope:
        if self.closed:
            raise GraphError(f"publisher for {self.spec.name} is closed")
        if stamp_ns is None:
            stamp_ns = self._graph.now_ns()
        env = MessageEnvelope(self.spec.name, self.spec.type_name, next(self._seq), stamp_ns, payload)
        self._graph._fan_out(self, env)
        return env

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._graph._unadvertise(self)


class Subscription:
    """Handle returned by subscribe(); callback or pull-mode consumption."""

    def __init__(self, graph: "MessageGraph", topic: str, policy: QueuePolicy,
                 callback: Optional[Callable[[MessageEnvelope], None]]):
        self._graph = graph
        self.topic = topic
        self.policy = policy
        self.callback = callback
        self.paused = False
        self.closed = False
        self.dropped = 0
        self._queue: deque[MessageEnvelope] = deque()
        self._deliver_lock = threading.Lock()  # per-subscription callback serialization

    def _enqueue(self, env: MessageEnvelope) -> None:
        if len(self._queue) >= self.policy.queue_length:
            self._queue.popleft()
            self.dropped += 1
        self._queue.append(env)

    def _dispatch(self) -> None:
        if self.callback is None or self.paused:
            return
        with self._deliver_lock:
            while True:
                with self._graph._lock:
                    if self.closed or self.paused or not self._queue:
                        return
                    env = self._queue.popleft()
                self.callback(env)

    def drain(self) -> list[MessageEnvelope]:
        with self._graph._lock:
            out = list(self._queue)
            self._queue.clear()
        return out

    def pause(self) -> None:
        self.paused = True

    def resume(self) -> None:
        self.paused = False
        self._dispatch()

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._graph._unsubscribe(self)


class ServiceRegistration:
    def __init__(self, graph: "MessageGraph", spec: ServiceSpec, handler):
        self._graph = graph
        self.spec = spec
        self.handler = handler
        self.closed = False

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._graph._unregister_service(self)


class _Call:
    """One in-flight service call; completes exactly once."""

    def __init__(self, callback):
        self._callback = callback
        self._done = False
        self._lock = threading.Lock()

    def complete(self, error: Optional[GraphError], response) -> bool:
        with self._lock:
            if self._done:
                return False  # late response discarded
            self._done = True
        self._callback(error, response)
        return True


class MessageGraph:
    """Thread-safe topic/service graph with drop-oldest bounded queues."""

    def __init__(self, clock=None):
        self._clock = clock
        self._lock = threading.RLock()
        self._topics: dict[str, _Topic] = {}
        self._services: dict[str, ServiceRegistration] = {}

    def now_ns(self) -> int:
        return self._clock.now_ns() if self._clock is not None else 0

    # -- topics ------------------------------------------------------------

    def advertise(self, spec: TopicSpec) -> Publisher:
        with self._lock:
            topic = self._topics.get(spec.name)
            if topic is None:
                topic = _Topic(spec)
                self._topics[spec.name] = topic
            else:
                if topic.spec.type_name == "":
                    # Topic created by subscribe-before-advertise; adopt the type.
                    topic.spec = TopicSpec(spec.name, spec.type_name, topic.spec.latched)
                if topic.spec.type_name != spec.type_name:
                    raise TypeConflict(
                        f"{spec.name} already advertised as {topic.spec.type_name!r}, "
                        f"got {spec.type_name!r}")
                if spec.latched and not topic.spec.latched:
                    topic.spec = TopicSpec(spec.name, spec.type_name, latched=True)
            pub = Publisher(self, topic.spec)
            topic.publishers.add(pub)
            return pub

    def subscribe(self, topic_name: str, policy: QueuePolicy = QueuePolicy(),
                  callback: Optional[Callable[[MessageEnvelope], None]] = None) -> Subscription:
        validate_topic_name(topic_name)
        with self._lock:
            topic = self._topics.get(topic_name)
            if topic is None:
                # Subscribing before advertisement is legal; type unknown yet.
                topic = _Topic(TopicSpec(topic_name, "", latched=False))
                self._topics[topic_name] = topic
            sub = Subscription(self, topic_name, policy, callback)
            topic.subscriptions.add(sub)
            if topic.retained is not None:
                sub._enqueue(topic.retained)
        sub._dispatch()
        return sub

    def _fan_out(self, pub: Publisher, env: MessageEnvelope) -> None:
        subs: list[Subscription] = []
        with self._lock:
            topic = self._topics.get(env.topic)
            if topic is None:
                return
            if topic.spec.latched:
                topic.retained = env
            subs = [s for s in topic.subscriptions if not s.closed]
            for sub in subs:
                sub._enqueue(env)
        for sub in subs:
            sub._dispatch()

    def _unadvertise(self, pub: Publisher) -> None:
        with self._lock:
            topic = self._topics.get(pub.spec.name)
            if topic is None:
                return
            topic.publishers.discard(pub)
            self._maybe_gc(topic)

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            topic = self._topics.get(sub.topic)
            if topic is None:
                return
            topic.subscriptions.discard(sub)
            self._maybe_gc(topic)

    def _maybe_gc(self, topic: _Topic) -> None:
        if topic.spec.latched and topic.retained is not None:
            # The last value on a latched topic stays replayable for future
            # subscribers even after every publisher and subscriber is gone.
            return
        if not topic.publishers and not topic.subscriptions:
            self._topics.pop(topic.spec.name, None)

    # -- services ----------------------------------------------------------

    def register_service(self, spec: ServiceSpec, handler) -> ServiceRegistration:
        """handler(request) -> response, or handler(request, respond) for
        deferred providers that call respond(error, response) later."""
        with self._lock:
            if spec.name in self._services:
                raise ServiceConflict(f"service {spec.name} already provided")
            reg = ServiceRegistration(self, spec, handler)
            self._services[spec.name] = reg
            return reg

    def _unregister_service(self, reg: ServiceRegistration) -> None:
        with self._lock:
            if self._services.get(reg.spec.name) is reg:
                del self._services[reg.spec.name]

    def call_service_async(self, name: str, request, timeout_ms: int,
                           callback: Callable[[Optional[GraphError], object], None],
                           scheduler: Optional[EventScheduler] = None) -> None:
        """Complete with exactly one of (response, NoProvider, Timeout, ProviderFault).

        With a scheduler, the timeout fires on virtual time; otherwise a
        real timer is armed.
        """
        call = _Call(callback)
        with self._lock:
            reg = self._services.get(name)
        if reg is None:
            call.complete(NoProvider(f"no provider for {name}"), None)
            return

        if scheduler is not None:
            scheduler.schedule_in(timeout_ms * NS_PER_MS,
                                  lambda: call.complete(ServiceTimeout(f"{name} timed out"), None),
                                  key=("svc-timeout", name))
        else:
            timer = threading.Timer(timeout_ms / 1000.0,
                                    lambda: call.complete(ServiceTimeout(f"{name} timed out"), None))
            timer.daemon = True
            timer.start()

        def respond(error, response=None):
            if error is not None and not isinstance(error, GraphError):
                error = ProviderFault(str(error))
            call.complete(error, response)

        try:
            params = len(inspect.signature(reg.handler).parameters)
        except (TypeError, ValueError):
            params = 1
        try:
            if params >= 2:
                reg.handler(request, respond)
            else:
                respond(None, reg.handler(request))
        except GraphError as exc:
            call.complete(exc, None)
        except Exception as exc:  # provider bugs surface as faults, not crashes
            call.complete(ProviderFault(repr(exc)), None)

    def call_service(self, name: str, request, timeout_ms: int = 1000):
        """Blocking convenience wrapper (real-clock timeout)."""
        done = threading.Event()
        result: list = [None, None]

        def on_done(error, response):
            result[0], result[1] = error, response
            done.set()

        self.call_service_async(name, request, timeout_ms, on_done)
        done.wait(timeout_ms / 1000.0 + 5.0)
        if result[0] is not None:
            raise result[0]
        return result[1]

    # -- introspection -----------------------------------------------------

    def graph_snapshot(self) -> GraphSnapshot:
        with self._lock:
            topics = [(t.spec, len(t.publishers), len(t.subscriptions))
                      for t in sorted(self._topics.values(), key=lambda t: t.spec.name)]
            services = sorted((reg.spec for reg in self._services.values()),
                              key=lambda s: s.name)
            return GraphSnapshot(topics=topics, services=list(services))

    def retained_value(self, topic_name: str) -> Optional[MessageEnvelope]:
        with self._lock:
            topic = self._topics.get(topic_name)
            return topic.retained if topic else None

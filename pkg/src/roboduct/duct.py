"""Device-side duct: mirrors topics/services to a remote bridge.

The duct always dials out, never listens. It survives transport loss with
exponential backoff, buffers outbound traffic during outages (drop-oldest,
bounded), and on every (re)connection replays its full registration set so
the remote side converges back to the configured mirror.
"""

from __future__ import annotations

import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

import yaml

from . import wirecodec as wc
from .clock import NS_PER_MS, EventScheduler, ms_to_ns, s_to_ns
from .msggraph import (
    MessageGraph, NoProvider, ProviderFault, QueuePolicy, ServiceSpec,
    TopicSpec, validate_topic_name,
)

log = logging.getLogger(__name__)


class ConfigInvalid(Exception):
    pass


class DuctAuthFailure(Exception):
    pass


@dataclass(frozen=True)
class TopicRule:
    topic: str
    type_name: str
    throttle_rate_ms: Optional[int] = None
    queue_length: int = 10
    latched: bool = False

    def __post_init__(self):
        validate_topic_name(self.topic)


@dataclass(frozen=True)
class BackoffPolicy:
    initial_ms: float = 200.0
    factor: float = 2.0
    max_ms: float = 10_000.0
    jitter_fraction: float = 0.2
    stable_reset_s: float = 30.0

    def delay_ms(self, attempt: int, rng: random.Random) -> float:
        base = min(self.initial_ms * self.factor ** attempt, self.max_ms)
        return base * (1.0 + rng.uniform(-self.jitter_fraction, self.jitter_fraction))


PHASE_CONNECTING = "connecting"
PHASE_SYNCING = "syncing"
PHASE_LIVE = "live"
PHASE_BACKOFF = "backoff"
PHASE_STOPPED = "stopped"


@dataclass
class DuctConfig:
    server_url: str = "ws://localhost:8443"
    route: str = "lab"
    token: Optional[str] = None
    encoding_pref: tuple = (wc.ENCODING_CBOR, wc.ENCODING_JSON)
    local_to_remote: list = field(default_factory=list)  # [TopicRule]
    remote_to_local: list = field(default_factory=list)  # [TopicRule]
    exposed_services: list = field(default_factory=list)  # [str]
    imported_services: list = field(default_factory=list)  # [str]
    reconnect: BackoffPolicy = field(default_factory=BackoffPolicy)
    disconnect_buffer: int = 100
    keepalive_ping_s: float = 15.0

    def validate(self) -> None:
        out_topics = {r.topic for r in self.local_to_remote}
        in_topics = {r.topic for r in self.remote_to_local}
        both = out_topics & in_topics
        if both:
            raise ConfigInvalid(f"topics configured in both directions: {sorted(both)}")
        if len(out_topics) != len(self.local_to_remote) or len(in_topics) != len(self.remote_to_local):
            raise ConfigInvalid("duplicate topic rule")
        for name in itertools.chain(self.exposed_services, self.imported_services):
            validate_topic_name(name)
        if set(self.exposed_services) & set(self.imported_services):
            raise ConfigInvalid("service both exposed and imported")
        for enc in self.encoding_pref:
            if enc not in wc.ENCODINGS:
                raise ConfigInvalid(f"unknown encoding {enc!r}")
        if self.disconnect_buffer < 0:
            raise ConfigInvalid("disconnect_buffer must be >= 0")

    @property
    def path(self) -> str:
        return f"/bridge/{self.route}"

    @classmethod
    def from_dict(cls, d: dict) -> "DuctConfig":
        def rules(items):
            return [TopicRule(**item) for item in items or []]

        cfg = cls(
            server_url=d.get("server_url", "ws://localhost:8443"),
            route=d.get("route", "lab"),
            token=d.get("token"),
            encoding_pref=tuple(d.get("encoding_pref", (wc.ENCODING_CBOR, wc.ENCODING_JSON))),
            local_to_remote=rules(d.get("local_to_remote")),
            remote_to_local=rules(d.get("remote_to_local")),
            exposed_services=list(d.get("exposed_services", [])),
            imported_services=list(d.get("imported_services", [])),
            reconnect=BackoffPolicy(**d.get("reconnect", {})),
            disconnect_buffer=int(d.get("disconnect_buffer", 100)),
            keepalive_ping_s=float(d.get("keepalive_ping_s", 15.0)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "DuctConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass
class DuctStats:
    connects: int = 0
    reconnects: int = 0
    transport_losses: int = 0
    failed_attempts: int = 0
    downtime_ns: int = 0
    buffered_dropped: dict = field(default_factory=dict)  # topic -> dropped count
    sent_frames: int = 0


class DuctClient:
    """Single-owner reconnecting state machine bridging a local graph."""

    def __init__(self, config: DuctConfig, local_graph: MessageGraph,
                 scheduler: EventScheduler,
                 transport_factory: Callable[["DuctClient"], object],
                 seed: int = 0):
        config.validate()
        self.config = config
        self.graph = local_graph
        self.scheduler = scheduler
        self.transport_factory = transport_factory
        self.rng = random.Random(seed)
        self.phase = PHASE_STOPPED
        self.attempt = 0  # consecutive failed connection attempts
        self.session: Optional[wc.SessionParams] = None
        self.transport = None
        self.stats = DuctStats()
        self._connected_at_ns: Optional[int] = None
        self._down_since_ns: Optional[int] = None
        self._retry_event = None
        self._buffers: dict[str, list] = {r.topic: [] for r in config.local_to_remote}
        self._out_rules = {r.topic: r for r in config.local_to_remote}
        self._in_rules = {r.topic: r for r in config.remote_to_local}
        self._local_subs = []
        self._local_pubs: dict[str, object] = {}
        self._local_regs = []
        self._pending_imports: dict[str, Callable] = {}
        self._import_ids = itertools.count(1)
        self.auth_error: Optional[DuctAuthFailure] = None

    # Outbound-only contract: a duct never owns a listening socket.
    def listening_sockets(self) -> list:
        return []

    def now_ns(self) -> int:
        return self.scheduler.clock.now_ns()

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        if self.phase != PHASE_STOPPED:
            return
        for rule in self.config.local_to_remote:
            self._local_subs.append(self.graph.subscribe(
                rule.topic, QueuePolicy(queue_length=max(1, rule.queue_length)),
                callback=self._make_local_forwarder(rule)))
        for name in self.config.imported_services:
            self._local_regs.append(self.graph.register_service(
                ServiceSpec(name), self._make_import_handler(name)))
        self.phase = PHASE_CONNECTING
        self._attempt_connect()

    def stop(self) -> None:
        self.phase = PHASE_STOPPED
        if self._retry_event:
            self._retry_event.cancel()
            self._retry_event = None
        if self.transport is not None:
            try:
                self.transport.close()
            finally:
                self.transport = None
        for sub in self._local_subs:
            sub.close()
        for pub in self._local_pubs.values():
            pub.close()
        for reg in self._local_regs:
            reg.close()

    # -- connection attempts --------------------------------------------------

    def _attempt_connect(self) -> None:
        if self.phase == PHASE_STOPPED:
            return
        self.phase = PHASE_CONNECTING
        transport = self.transport_factory(self)
        if not transport.connect():
            self._attempt_failed()
            return
        self.transport = transport
        self.session = None
        self.phase = PHASE_SYNCING
        hello = wc.make_hello(encodings=self.config.encoding_pref, token=self.config.token)
        transport.send(wc.encode(hello, wc.ENCODING_JSON).data, "hello")

    def _attempt_failed(self) -> None:
        self.stats.failed_attempts += 1
        delay = self.config.reconnect.delay_ms(self.attempt, self.rng)
        self.attempt += 1
        self.phase = PHASE_BACKOFF
        self._retry_event = self.scheduler.schedule_in(
            ms_to_ns(delay), self._attempt_connect, key=("duct-retry",))

    def on_transport_loss(self) -> None:
        if self.phase in (PHASE_STOPPED, PHASE_BACKOFF):
            return
        was_live = self.phase == PHASE_LIVE
        now = self.now_ns()
        self.stats.transport_losses += 1
        self.transport = None
        self.session = None
        if self._down_since_ns is None:
            self._down_since_ns = now
        if (was_live and self._connected_at_ns is not None
                and now - self._connected_at_ns >= s_to_ns(self.config.reconnect.stable_reset_s)):
            self.attempt = 0
        self._connected_at_ns = None
        for respond in list(self._pending_imports.values()):
            respond(ProviderFault("transport lost"), None)
        self._pending_imports.clear()
        delay = self.config.reconnect.delay_ms(self.attempt, self.rng)
        self.phase = PHASE_BACKOFF
        self._retry_event = self.scheduler.schedule_in(
            ms_to_ns(delay), self._attempt_connect, key=("duct-retry",))

    # -- sync ----------------------------------------------------------------

    def build_sync_frames(self) -> tuple[list[wc.WireFrame], list[wc.WireFrame]]:
        """Registration frames, then data frames (latched replay + buffers)."""
        regs: list[wc.WireFrame] = []
        for rule in self.config.local_to_remote:
            regs.append(wc.WireFrame(op=wc.OP_ADVERTISE, topic=rule.topic,
                                     type_name=rule.type_name, latched=rule.latched or None))
        for rule in self.config.remote_to_local:
            regs.append(wc.WireFrame(op=wc.OP_SUBSCRIBE, topic=rule.topic,
                                     throttle_rate_ms=rule.throttle_rate_ms,
                                     queue_length=rule.queue_length))
        for name in self.config.exposed_services:
            regs.append(wc.WireFrame(op=wc.OP_ADVERTISE_SERVICE, service=name,
                                     type_name="service"))
        data: list[wc.WireFrame] = []
        for rule in self.config.local_to_remote:
            if rule.latched:
                env = self.graph.retained_value(rule.topic)
                if env is not None:
                    data.append(self._publish_frame(env))
        for rule in self.config.local_to_remote:
            for env in self._buffers[rule.topic]:
                data.append(self._publish_frame(env))
        return regs, data

    def _sync(self) -> None:
        regs, data = self.build_sync_frames()
        for frame in regs:
            self._send(frame, frame.topic or frame.service or "reg")
        for frame in data:
            self._send(frame, frame.topic)
        for buf in self._buffers.values():
            buf.clear()
        first = self.stats.connects == 0
        self.stats.connects += 1
        if not first:
            self.stats.reconnects += 1
        now = self.now_ns()
        if self._down_since_ns is not None:
            self.stats.downtime_ns += now - self._down_since_ns
            self._down_since_ns = None
        self._connected_at_ns = now
        self.phase = PHASE_LIVE

    # -- frame IO -------------------------------------------------------------

    def _send(self, frame: wc.WireFrame, label: str) -> None:
        encoding = self.session.encoding if self.session else wc.ENCODING_JSON
        self.transport.send(wc.encode(frame, encoding).data, label or "-")
        self.stats.sent_frames += 1

    def _publish_frame(self, env) -> wc.WireFrame:
        return wc.WireFrame(op=wc.OP_PUBLISH, topic=env.topic,
                            msg=env.payload, seq=env.seq, stamp_ns=env.stamp_ns)

    def on_bytes(self, data: bytes) -> None:
        encoding = self.session.encoding if self.session else wc.ENCODING_JSON
        try:
            frame = wc.decode(data, encoding)
        except wc.CodecError as exc:
            log.warning("duct: undecodable frame: %s", exc)
            return
        self.on_frame(frame)

    def on_frame(self, frame: wc.WireFrame) -> None:
        if self.phase == PHASE_SYNCING and self.session is None:
            if frame.op == wc.OP_HELLO:
                self.session = wc.SessionParams(
                    encoding=(frame.encodings or [wc.ENCODING_JSON])[0],
                    protocol_version=(frame.versions or [wc.PROTOCOL_VERSION])[0])
                self._sync()
                return
            if frame.op == wc.OP_STATUS and frame.level == "error":
                # Terminal: server refused us before negotiating. No retries.
                self.auth_error = DuctAuthFailure(frame.text or "rejected by server")
                log.error("duct: %s", self.auth_error)
                self.stop()
                return
        if frame.op == wc.OP_PUBLISH:
            self._inject_remote_publish(frame)
        elif frame.op == wc.OP_CALL_SERVICE:
            self._handle_exposed_call(frame)
        elif frame.op == wc.OP_SERVICE_RESPONSE:
            self._handle_import_response(frame)
        elif frame.op == wc.OP_STATUS:
            log.info("duct: status [%s] %s", frame.level, frame.text)

    def _inject_remote_publish(self, frame: wc.WireFrame) -> None:
        rule = self._in_rules.get(frame.topic)
        if rule is None:
            return
        pub = self._local_pubs.get(frame.topic)
        if pub is None:
            pub = self.graph.advertise(TopicSpec(frame.topic, rule.type_name,
                                                 latched=rule.latched))
            self._local_pubs[frame.topic] = pub
        pub.publish(frame.msg, stamp_ns=frame.stamp_ns)

    def _handle_exposed_call(self, frame: wc.WireFrame) -> None:
        call_id = frame.id

        def on_done(error, response):
            if error is None:
                reply = wc.WireFrame(op=wc.OP_SERVICE_RESPONSE, id=call_id,
                                     result=True, msg=response)
            else:
                reply = wc.WireFrame(op=wc.OP_SERVICE_RESPONSE, id=call_id, result=False,
                                     text=f"{type(error).__name__}: {error}")
            if self.phase == PHASE_LIVE:
                self._send(reply, frame.service or "service")

        self.graph.call_service_async(frame.service, frame.msg, 5_000, on_done,
                                      scheduler=self.scheduler)

    def _handle_import_response(self, frame: wc.WireFrame) -> None:
        respond = self._pending_imports.pop(frame.id, None)
        if respond is None:
            return
        if frame.result:
            respond(None, frame.msg)
        else:
            respond(ProviderFault(frame.text or "remote provider error"), None)

    # -- local graph glue -------------------------------------------------------

    def _make_local_forwarder(self, rule: TopicRule):
        buf = self._buffers[rule.topic]

        def forward(env):
            if self.phase == PHASE_LIVE:
                self._send(self._publish_frame(env), rule.topic)
            else:
                # Offline: buffer drop-oldest up to the disconnect buffer cap.
                if len(buf) >= self.config.disconnect_buffer:
                    if buf:
                        buf.pop(0)
                    self.stats.buffered_dropped[rule.topic] = (
                        self.stats.buffered_dropped.get(rule.topic, 0) + 1)
                    if self.config.disconnect_buffer == 0:
                        return
                buf.append(env)

        return forward

    def _make_import_handler(self, name: str):
        def handler(request, respond):
            if self.phase != PHASE_LIVE:
                respond(NoProvider(f"duct offline, {name} unavailable"), None)
                return
            call_id = f"i{next(self._import_ids)}"
            self._pending_imports[call_id] = respond
            self._send(wc.WireFrame(op=wc.OP_CALL_SERVICE, service=name,
                                    id=call_id, msg=request), name)

        return handler

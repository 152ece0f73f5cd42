"""Cloud-side bridge: relays wire frames between connections and a graph.

The core is transport-agnostic: a serving layer (websocket or the in-memory
test harness) feeds it raw frame bytes and provides a send callable per
connection. All connections multiplex over the single entrypoint the
serving layer owns; routing is by path ("/bridge/<route>"), with each
isolated route backed by its own message graph.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import wirecodec as wc
from .clock import EventScheduler
from .msggraph import (
    MessageGraph, NoProvider, ProviderFault, Publisher, QueuePolicy,
    ServiceRegistration, ServiceSpec, ServiceTimeout, Subscription, TopicSpec,
    TypeConflict,
)

log = logging.getLogger(__name__)

DEFAULT_SERVICE_TIMEOUT_MS = 10_000


class BridgeError(Exception):
    pass


class UnknownPath(BridgeError):
    pass


class AuthFailure(BridgeError):
    pass


@dataclass(frozen=True)
class Route:
    name: str
    isolated: bool = True
    token: Optional[str] = None

    @property
    def path(self) -> str:
        return f"/bridge/{self.name}"


@dataclass
class _SubEntry:
    subscription: Subscription
    throttle_rate_ms: int
    last_sent_ns: Optional[int] = None
    throttled: int = 0


class ConnectionRecord:
    def __init__(self, conn_id: str, route: Route, graph: MessageGraph,
                 send_bytes: Callable[[bytes, str], None],
                 close_cb: Optional[Callable[[], None]]):
        self.conn_id = conn_id
        self.route = route
        self.graph = graph
        self._send_bytes = send_bytes
        self._close_cb = close_cb
        self.session: Optional[wc.SessionParams] = None
        self.authenticated = route.token is None
        self.subscriptions: dict[str, _SubEntry] = {}
        self.advertisements: dict[str, Publisher] = {}
        self.provided_services: dict[str, ServiceRegistration] = {}
        # service calls this connection is *providing* an answer for
        self.inflight_provider: dict[str, Callable] = {}
        self.closed = False


class BridgeCore:
    """Frame-level bridge logic shared by all transports."""

    def __init__(self, routes: list[Route], clock=None,
                 scheduler: Optional[EventScheduler] = None,
                 service_timeout_ms: int = DEFAULT_SERVICE_TIMEOUT_MS):
        self.routes = {r.path: r for r in routes}
        if len(self.routes) != len(routes):
            raise ValueError("duplicate route paths")
        self.clock = clock if clock is not None else (scheduler.clock if scheduler else None)
        self.scheduler = scheduler
        self.service_timeout_ms = service_timeout_ms
        self._shared_graph: Optional[MessageGraph] = None
        self._graphs: dict[str, MessageGraph] = {}
        self._conns: dict[str, ConnectionRecord] = {}
        self._conn_ids = itertools.count(1)
        self._call_ids = itertools.count(1)
        # Populated by the serving layer; introspected by the single-port tests.
        self.listeners: list = []

    def now_ns(self) -> int:
        return self.clock.now_ns() if self.clock is not None else 0

    def graph_for(self, route: Route) -> MessageGraph:
        if route.isolated:
            if route.name not in self._graphs:
                self._graphs[route.name] = MessageGraph(clock=self.clock)
            return self._graphs[route.name]
        if self._shared_graph is None:
            self._shared_graph = MessageGraph(clock=self.clock)
        return self._shared_graph

    def listening_sockets(self) -> list:
        return list(self.listeners)

    def connection_ids(self) -> list[str]:
        return sorted(self._conns)

    def connection_state(self, conn_id: str) -> Optional[ConnectionRecord]:
        return self._conns.get(conn_id)

    # -- connection lifecycle ------------------------------------------------

    def open_connection(self, path: str, send_bytes: Callable[[bytes, str], None],
                        close_cb: Optional[Callable[[], None]] = None) -> str:
        route = self.routes.get(path)
        if route is None:
            raise UnknownPath(f"no route at {path!r}")
        conn_id = f"c{next(self._conn_ids)}"
        self._conns[conn_id] = ConnectionRecord(conn_id, route, self.graph_for(route),
                                                send_bytes, close_cb)
        return conn_id

    def on_bytes(self, conn_id: str, data: bytes) -> None:
        conn = self._conns.get(conn_id)
        if conn is None:
            return
        encoding = conn.session.encoding if conn.session else wc.ENCODING_JSON
        try:
            frame = wc.decode(data, encoding)
        except wc.CodecError as exc:
            self._status(conn, "error", f"undecodable frame: {exc}")
            return
        self.on_frame(conn_id, frame)

    def on_frame(self, conn_id: str, frame: wc.WireFrame) -> None:
        conn = self._conns.get(conn_id)
        if conn is None:
            return
        if conn.session is None:
            self._negotiate(conn, frame)
            if frame.op == wc.OP_HELLO or conn.closed:
                return
            # legacy peer: fall through and process the first frame
        handler = self._HANDLERS.get(frame.op)
        if handler is None:
            self._status(conn, "warning", f"unhandled op {frame.op}")
            return
        handler(self, conn, frame)

    def on_disconnect(self, conn_id: str) -> None:
        conn = self._conns.pop(conn_id, None)
        if conn is None:
            return
        conn.closed = True
        for entry in conn.subscriptions.values():
            entry.subscription.close()
        for pub in conn.advertisements.values():
            pub.close()
        for reg in conn.provided_services.values():
            reg.close()
        # Calls this connection was answering fail back to their callers.
        for respond in list(conn.inflight_provider.values()):
            respond(ProviderFault("provider disconnected"), None)
        conn.subscriptions.clear()
        conn.advertisements.clear()
        conn.provided_services.clear()
        conn.inflight_provider.clear()

    # -- negotiation -----------------------------------------------------------

    def _negotiate(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        if conn.route.token is not None:
            if frame.op != wc.OP_HELLO or frame.token != conn.route.token:
                self._status(conn, "error", "authentication failed")
                self._close(conn)
                return
            conn.authenticated = True
        try:
            conn.session = wc.negotiate(frame)
        except wc.VersionMismatch as exc:
            self._status(conn, "error", str(exc))
            self._close(conn)
            return
        if frame.op == wc.OP_HELLO:
            reply = wc.WireFrame(op=wc.OP_HELLO,
                                 versions=[conn.session.protocol_version],
                                 encodings=[conn.session.encoding])
            # Negotiation frames are always JSON.
            conn._send_bytes(wc.encode(reply, wc.ENCODING_JSON).data, "hello")

    # -- frame handlers ----------------------------------------------------------

    def _send_frame(self, conn: ConnectionRecord, frame: wc.WireFrame, label: str) -> None:
        if conn.closed:
            return
        encoding = conn.session.encoding if conn.session else wc.ENCODING_JSON
        try:
            conn._send_bytes(wc.encode(frame, encoding).data, label)
        except Exception:
            log.exception("send to %s failed", conn.conn_id)

    def _status(self, conn: ConnectionRecord, level: str, text: str) -> None:
        self._send_frame(conn, wc.WireFrame(op=wc.OP_STATUS, level=level, text=text), "status")

    def close_connection(self, conn_id: str) -> None:
        """Server-initiated close: clean up and tell the transport to drop."""
        conn = self._conns.get(conn_id)
        if conn is not None:
            self._close(conn)

    def _close(self, conn: ConnectionRecord) -> None:
        conn.closed = True
        self.on_disconnect(conn.conn_id)
        if conn._close_cb:
            conn._close_cb()

    def _h_advertise(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        if frame.topic in conn.advertisements:
            return
        try:
            spec = TopicSpec(frame.topic, frame.type_name, latched=bool(frame.latched))
            conn.advertisements[frame.topic] = conn.graph.advertise(spec)
        except (TypeConflict, ValueError) as exc:
            self._status(conn, "error", f"advertise {frame.topic}: {exc}")

    def _h_unadvertise(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        pub = conn.advertisements.pop(frame.topic, None)
        if pub:
            pub.close()

    def _h_publish(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        pub = conn.advertisements.get(frame.topic)
        if pub is None:
            self._status(conn, "warning", f"publish on unadvertised topic {frame.topic}")
            return
        stamp = frame.stamp_ns if frame.stamp_ns is not None else self.now_ns()
        pub.publish(frame.msg, stamp_ns=stamp)

    def _h_subscribe(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        if frame.topic in conn.subscriptions:
            return
        throttle = frame.throttle_rate_ms or 0
        entry = _SubEntry(subscription=None, throttle_rate_ms=throttle)  # type: ignore[arg-type]

        def deliver(env):
            now = self.now_ns()
            if entry.throttle_rate_ms:
                if (entry.last_sent_ns is not None
                        and now - entry.last_sent_ns < entry.throttle_rate_ms * 1_000_000):
                    entry.throttled += 1
                    return
            entry.last_sent_ns = now
            self._send_frame(conn, wc.WireFrame(
                op=wc.OP_PUBLISH, topic=env.topic, type_name=env.type_name or None,
                msg=env.payload, seq=env.seq, stamp_ns=env.stamp_ns), env.topic)

        policy = QueuePolicy(queue_length=frame.queue_length or 10)
        entry.subscription = conn.graph.subscribe(frame.topic, policy, callback=deliver)
        conn.subscriptions[frame.topic] = entry

    def _h_unsubscribe(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        entry = conn.subscriptions.pop(frame.topic, None)
        if entry:
            entry.subscription.close()

    def _h_advertise_service(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        if frame.service in conn.provided_services:
            return

        def forward(request, respond):
            sid = f"s{next(self._call_ids)}"
            conn.inflight_provider[sid] = respond
            self._send_frame(conn, wc.WireFrame(op=wc.OP_CALL_SERVICE, service=frame.service,
                                                id=sid, msg=request), frame.service)

        try:
            reg = conn.graph.register_service(ServiceSpec(frame.service, frame.type_name or ""),
                                              forward)
            conn.provided_services[frame.service] = reg
        except Exception as exc:
            self._status(conn, "error", f"advertise_service {frame.service}: {exc}")

    def _h_unadvertise_service(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        reg = conn.provided_services.pop(frame.service, None)
        if reg:
            reg.close()

    def _h_service_response(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        respond = conn.inflight_provider.pop(frame.id, None)
        if respond is None:
            self._status(conn, "warning", f"unknown service call id {frame.id}")
            return
        if frame.result:
            respond(None, frame.msg)
        else:
            respond(ProviderFault(frame.text or "provider error"), None)

    def _h_call_service(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        call_id = frame.id

        def on_done(error, response):
            if error is None:
                reply = wc.WireFrame(op=wc.OP_SERVICE_RESPONSE, id=call_id,
                                     result=True, msg=response)
            else:
                reply = wc.WireFrame(op=wc.OP_SERVICE_RESPONSE, id=call_id, result=False,
                                     text=f"{type(error).__name__}: {error}")
            self._send_frame(conn, reply, frame.service or "service")

        conn.graph.call_service_async(frame.service, frame.msg, self.service_timeout_ms,
                                      on_done, scheduler=self.scheduler)

    def _h_status(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        log.info("status from %s: [%s] %s", conn.conn_id, frame.level, frame.text)

    def _h_hello(self, conn: ConnectionRecord, frame: wc.WireFrame) -> None:
        self._status(conn, "warning", "hello after negotiation ignored")

    _HANDLERS = {
        wc.OP_ADVERTISE: _h_advertise,
        wc.OP_UNADVERTISE: _h_unadvertise,
        wc.OP_PUBLISH: _h_publish,
        wc.OP_SUBSCRIBE: _h_subscribe,
        wc.OP_UNSUBSCRIBE: _h_unsubscribe,
        wc.OP_ADVERTISE_SERVICE: _h_advertise_service,
        wc.OP_UNADVERTISE_SERVICE: _h_unadvertise_service,
        wc.OP_SERVICE_RESPONSE: _h_service_response,
        wc.OP_CALL_SERVICE: _h_call_service,
        wc.OP_STATUS: _h_status,
        wc.OP_HELLO: _h_hello,
    }

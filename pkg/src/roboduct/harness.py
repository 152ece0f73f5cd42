"""In-memory wiring of duct, impaired link and bridge on one virtual clock.

Used by the benchmark runner and the test suite: the duct's transport is a
netsim endpoint, the bridge's "listening socket" is a VirtualListener, and
cloud-side tools attach to the bridge directly. Everything advances through
one EventScheduler, so runs are deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional

from . import wirecodec as wc
from .bridge import BridgeCore
from .clock import EventScheduler
from .duct import DuctClient
from .netsim import LinkProfile, SimLink


class VirtualListener:
    """Stands in for the bridge's single TCP listening socket."""

    def __init__(self, bridge: BridgeCore, addr: str = "virtual:8443"):
        self.addr = addr
        bridge.listeners.append(self)

    def __repr__(self) -> str:
        return f"VirtualListener({self.addr})"


class VirtualPipe:
    """Persistent impaired network path between one duct and the bridge.

    The link outlives individual connections: each duct connect attempt
    opens a fresh bridge connection over the same link, and a link-down
    transition tears the current connection down on both sides at once.
    """

    def __init__(self, bridge: BridgeCore, path: str, scheduler: EventScheduler,
                 profile: LinkProfile, seed: int = 0):
        self.bridge = bridge
        self.path = path
        self.scheduler = scheduler
        self.link = SimLink(profile, scheduler, seed)
        self.duct: Optional[DuctClient] = None
        self.conn_id: Optional[str] = None
        self.active = False

        self.link.endpoint_a.on_receive = self._to_duct
        self.link.endpoint_b.on_receive = self._to_bridge
        self.link.endpoint_a.on_down = self._link_down

    def _to_duct(self, data: bytes, label: str) -> None:
        if self.active and self.duct is not None:
            self.duct.on_bytes(data)

    def _to_bridge(self, data: bytes, label: str) -> None:
        if self.active and self.conn_id is not None:
            self.bridge.on_bytes(self.conn_id, data)

    def _link_down(self) -> None:
        if not self.active:
            return
        self.active = False
        conn_id, self.conn_id = self.conn_id, None
        if conn_id is not None:
            self.bridge.on_disconnect(conn_id)
        if self.duct is not None:
            self.duct.on_transport_loss()

    def _server_closed(self) -> None:
        # Server-initiated close (e.g. auth refusal): the duct notices after
        # one link latency, by which time any status frame has arrived.
        def notify():
            if self.active:
                self.active = False
                self.conn_id = None
                if self.duct is not None:
                    self.duct.on_transport_loss()

        delay = max(1, int(self.link.profile.one_way_latency_ms * 1_000_000) + 1)
        self.scheduler.schedule_in(delay, notify, key=("pipe-close",))

    def transport_factory(self, duct: DuctClient) -> "VirtualTransport":
        self.duct = duct
        return VirtualTransport(self)


class VirtualTransport:
    """The duct-facing side of a VirtualPipe connection attempt."""

    def __init__(self, pipe: VirtualPipe):
        self.pipe = pipe

    def connect(self) -> bool:
        if not self.pipe.link.up:
            return False
        self.pipe.conn_id = self.pipe.bridge.open_connection(
            self.pipe.path,
            lambda data, label: self.pipe.link.endpoint_b.send(data, label),
            close_cb=self.pipe._server_closed)
        self.pipe.active = True
        return True

    def send(self, data: bytes, label: str = "") -> None:
        self.pipe.link.endpoint_a.send(data, label)

    def close(self) -> None:
        if self.pipe.active:
            self.pipe.active = False
            conn_id, self.pipe.conn_id = self.pipe.conn_id, None
            if conn_id is not None:
                self.pipe.bridge.on_disconnect(conn_id)


class CloudClient:
    """Cloud-side tool attached to the bridge in-process (perfect transport)."""

    def __init__(self, bridge: BridgeCore, path: str, token: Optional[str] = None,
                 encoding: str = wc.ENCODING_JSON):
        self.bridge = bridge
        self.encoding = encoding
        self.session: Optional[wc.SessionParams] = None
        self.received: list[wc.WireFrame] = []
        self.on_publish: Optional[Callable[[wc.WireFrame], None]] = None
        self.closed = False
        self._service_results: dict[str, tuple] = {}
        self._call_ids = itertools.count(1)
        self.conn_id = bridge.open_connection(path, self._recv, close_cb=self._on_close)
        hello = wc.make_hello(encodings=[encoding], token=token)
        bridge.on_bytes(self.conn_id, wc.encode(hello, wc.ENCODING_JSON).data)

    def _on_close(self) -> None:
        self.closed = True

    def _recv(self, data: bytes, label: str) -> None:
        encoding = self.session.encoding if self.session else wc.ENCODING_JSON
        frame = wc.decode(data, encoding)
        if frame.op == wc.OP_HELLO and self.session is None:
            self.session = wc.SessionParams(encoding=(frame.encodings or ["json"])[0],
                                            protocol_version=(frame.versions or [1])[0])
            return
        self.received.append(frame)
        if frame.op == wc.OP_SERVICE_RESPONSE:
            self._service_results[frame.id] = (frame.result, frame.msg, frame.text)
        if frame.op == wc.OP_PUBLISH and self.on_publish:
            self.on_publish(frame)

    def _send(self, frame: wc.WireFrame) -> None:
        self.bridge.on_bytes(self.conn_id, wc.encode(frame, self.session.encoding).data)

    def subscribe(self, topic: str, throttle_rate_ms: Optional[int] = None,
                  queue_length: Optional[int] = None) -> None:
        self._send(wc.WireFrame(op=wc.OP_SUBSCRIBE, topic=topic,
                                throttle_rate_ms=throttle_rate_ms,
                                queue_length=queue_length))

    def advertise(self, topic: str, type_name: str, latched: bool = False) -> None:
        self._send(wc.WireFrame(op=wc.OP_ADVERTISE, topic=topic, type_name=type_name,
                                latched=latched or None))

    def publish(self, topic: str, msg, stamp_ns: Optional[int] = None) -> None:
        self._send(wc.WireFrame(op=wc.OP_PUBLISH, topic=topic, msg=msg, stamp_ns=stamp_ns))

    def call_service(self, service: str, request) -> str:
        call_id = f"cc{next(self._call_ids)}"
        self._send(wc.WireFrame(op=wc.OP_CALL_SERVICE, service=service, id=call_id,
                                msg=request))
        return call_id

    def service_result(self, call_id: str) -> Optional[tuple]:
        return self._service_results.get(call_id)

    def publishes(self, topic: Optional[str] = None) -> list[wc.WireFrame]:
        return [f for f in self.received
                if f.op == wc.OP_PUBLISH and (topic is None or f.topic == topic)]

    def disconnect(self) -> None:
        self.bridge.on_disconnect(self.conn_id)

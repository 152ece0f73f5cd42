"""Real websocket transports for the bridge core and the duct client.

The bridge serves every route on one TCP port with path-based websocket
upgrade (TLS optional; in the reference deployment termination happens at
the external entrypoint). The duct side uses a blocking websocket client
in a reader thread plus timer-based scheduling, so the same DuctClient
state machine runs unchanged against real networks.
"""

from __future__ import annotations

import asyncio
import ssl
import threading
from typing import Optional

from websockets.asyncio.server import serve as ws_serve
from websockets.exceptions import ConnectionClosed
from websockets.sync.client import connect as ws_connect

from .bridge import BridgeCore
from .clock import RealClock


class BridgeWsServer:
    """Single-port websocket front end for a BridgeCore."""

    def __init__(self, core: BridgeCore, host: str = "0.0.0.0", port: int = 8443,
                 tls_cert: Optional[str] = None, tls_key: Optional[str] = None):
        self.core = core
        self.host = host
        self.port = port
        self._ssl_context = None
        if tls_cert and tls_key:
            self._ssl_context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            self._ssl_context.load_cert_chain(tls_cert, tls_key)
        self._server = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._ready = threading.Event()
        self._thread: Optional[threading.Thread] = None

    async def _handler(self, connection) -> None:
        path = connection.request.path
        if path not in self.core.routes:
            await connection.close(code=4404, reason=f"unknown path {path}")
            return
        loop = asyncio.get_running_loop()
        outbound: asyncio.Queue = asyncio.Queue()

        def send_bytes(data: bytes, label: str = "") -> None:
            loop.call_soon_threadsafe(outbound.put_nowait, data)

        closing = asyncio.Event()

        def close_cb() -> None:
            loop.call_soon_threadsafe(closing.set)

        conn_id = self.core.open_connection(path, send_bytes, close_cb)

        async def writer():
            while True:
                data = await outbound.get()
                if data is None:
                    break
                await connection.send(data)

        writer_task = asyncio.create_task(writer())

        async def close_watch():
            await closing.wait()
            await connection.close(code=4403, reason="closed by bridge")

        watch_task = asyncio.create_task(close_watch())
        try:
            async for message in connection:
                if isinstance(message, str):
                    message = message.encode("utf-8")
                self.core.on_bytes(conn_id, message)
        except ConnectionClosed:
            pass
        finally:
            self.core.on_disconnect(conn_id)
            outbound.put_nowait(None)
            watch_task.cancel()
            await writer_task

    async def _serve(self) -> None:
        self._server = await ws_serve(self._handler, self.host, self.port,
                                      ssl=self._ssl_context, max_size=16 * 1024 * 1024)
        # Exactly one listening entrypoint: register its sockets for introspection.
        self.core.listeners.extend(self._server.sockets)
        self.port = self._server.sockets[0].getsockname()[1]
        self._ready.set()
        await self._server.wait_closed()

    def start_background(self) -> None:
        def runner():
            self._loop = asyncio.new_event_loop()
            asyncio.set_event_loop(self._loop)
            try:
                self._loop.run_until_complete(self._serve())
            finally:
                self._loop.close()

        self._thread = threading.Thread(target=runner, daemon=True, name="bridge-ws")
        self._thread.start()
        if not self._ready.wait(10):
            raise RuntimeError("bridge websocket server failed to start")

    def run_forever(self) -> None:
        asyncio.run(self._serve_forever())

    async def _serve_forever(self) -> None:
        await self._serve()

    def stop(self) -> None:
        if self._loop and self._server:
            self._loop.call_soon_threadsafe(self._server.close)
        if self._thread:
            self._thread.join(timeout=10)


class RealScheduler:
    """Timer-backed stand-in for EventScheduler in real-clock mode."""

    class _Handle:
        def __init__(self, timer: threading.Timer):
            self._timer = timer

        def cancel(self) -> None:
            self._timer.cancel()

    def __init__(self):
        self.clock = RealClock()

    def schedule_in(self, delay_ns: int, fn, key: tuple = ()) -> "RealScheduler._Handle":
        timer = threading.Timer(max(0, delay_ns) / 1e9, fn)
        timer.daemon = True
        timer.start()
        return self._Handle(timer)

    def schedule_at(self, at_ns: int, fn, key: tuple = ()) -> "RealScheduler._Handle":
        return self.schedule_in(at_ns - self.clock.now_ns(), fn, key)


class WsDuctTransport:
    """Blocking websocket client transport for one duct connection attempt."""

    def __init__(self, duct, url: str):
        self.duct = duct
        self.url = url
        self._ws = None
        self._closed = False

    def connect(self) -> bool:
        try:
            self._ws = ws_connect(self.url, open_timeout=5,
                                  ping_interval=self.duct.config.keepalive_ping_s)
        except Exception:
            return False
        reader = threading.Thread(target=self._read_loop, daemon=True, name="duct-ws-read")
        reader.start()
        return True

    def _read_loop(self) -> None:
        try:
            for message in self._ws:
                if isinstance(message, str):
                    message = message.encode("utf-8")
                self.duct.on_bytes(message)
        except Exception:
            pass
        if not self._closed:
            self.duct.on_transport_loss()

    def send(self, data: bytes, label: str = "") -> None:
        self._ws.send(data)

    def close(self) -> None:
        self._closed = True
        if self._ws is not None:
            try:
                self._ws.close()
            except Exception:
                pass


def ws_transport_factory(url: str):
    """Factory suitable for DuctClient(transport_factory=...)."""

    def factory(duct):
        return WsDuctTransport(duct, url)

    return factory

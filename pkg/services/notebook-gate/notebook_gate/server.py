"""
Run an ASGI app under uvicorn on a background thread.

The listening socket is bound, and TLS material loaded, in the caller's
thread before the handle is returned, so a port clash or a bad certificate
fails fast instead of leaving a half-started server behind.
"""

import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import uvicorn
from starlette.types import ASGIApp

from notebook_gate.errors import StartupError

logger = logging.getLogger(__name__)

STARTUP_TIMEOUT_SECONDS = 10.0


def bind_socket(host: str, port: int) -> socket.socket:
    family = socket.AF_INET6 if ":" in host else socket.AF_INET
    try:
        sock = socket.create_server((host, port), family=family, backlog=2048)
    except OSError as e:
        raise StartupError(f"cannot bind {host}:{port}: {e.strerror or e}") from e
    sock.set_inheritable(True)
    return sock


@dataclass
class ServerHandle:
    """A running server. `shutdown()` stops accepting and drains in-flight requests."""

    server: uvicorn.Server
    sock: socket.socket
    thread: threading.Thread
    scheme: str
    host: str
    port: int
    grace_seconds: float
    _stopped: bool = field(default=False, repr=False)

    @property
    def authority(self) -> str:
        host = f"[{self.host}]" if ":" in self.host else self.host
        return f"{host}:{self.port}"

    @property
    def url(self) -> str:
        return f"{self.scheme}://{self.authority}"

    def wait(self) -> None:
        self.thread.join()

    def shutdown(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        logger.info(f"[SERVE] Shutting down {self.url}")
        self.server.should_exit = True
        self.thread.join(timeout=self.grace_seconds + 5)
        if self.thread.is_alive():
            logger.warning(f"[SERVE] Drain exceeded {self.grace_seconds}s; forcing exit")
            self.server.force_exit = True
            self.thread.join(timeout=5)
        self.sock.close()

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def run_server(
    app: ASGIApp,
    host: str,
    port: int,
    *,
    certfile: Path | None = None,
    keyfile: Path | None = None,
    grace_seconds: float = 30.0,
    name: str = "server",
) -> ServerHandle:
    """Start `app` on host:port (port 0 picks a free port) and return once it accepts connections."""
    config = uvicorn.Config(
        app,
        host=host,
        port=port,
        ssl_certfile=str(certfile) if certfile else None,
        ssl_keyfile=str(keyfile) if keyfile else None,
        log_config=None,
        access_log=False,
        # the client address must be the socket peer, never X-Forwarded-For
        proxy_headers=False,
        lifespan="on",
        timeout_graceful_shutdown=int(max(1, grace_seconds)),
    )
    try:
        # builds the SSL context; bad TLS material raises here
        config.load()
    except (OSError, ValueError) as e:
        raise StartupError(f"{name}: cannot load TLS material: {e}") from e

    sock = bind_socket(host, port)
    bound_port = sock.getsockname()[1]
    server = uvicorn.Server(config)
    thread = threading.Thread(
        target=server.run,
        kwargs={"sockets": [sock]},
        name=f"{name}-{bound_port}",
        daemon=True,
    )
    thread.start()

    deadline = time.monotonic() + STARTUP_TIMEOUT_SECONDS
    while not server.started:
        if not thread.is_alive():
            sock.close()
            raise StartupError(f"{name} on {host}:{bound_port} exited during startup")
        if time.monotonic() > deadline:
            server.should_exit = True
            sock.close()
            raise StartupError(f"{name} on {host}:{bound_port} did not start within {STARTUP_TIMEOUT_SECONDS}s")
        time.sleep(0.01)

    scheme = "https" if certfile else "http"
    logger.info(f"[SERVE] {name} listening on {scheme}://{host}:{bound_port}")
    return ServerHandle(
        server=server,
        sock=sock,
        thread=thread,
        scheme=scheme,
        host=host,
        port=bound_port,
        grace_seconds=grace_seconds,
    )

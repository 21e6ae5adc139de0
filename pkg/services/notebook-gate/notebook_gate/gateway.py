"""
notebook-gate: the web tier, in-process.

One FastAPI app hosts the embed page and its static assets, handles the
password login, and reverse-proxies everything else (HTTP and WebSocket) to
the upstream notebook server. Every request passes the same pipeline:

  1. IP access check         -> 403
  2. password session check  -> 401 (except /auth and /static/)
  3. route dispatch          -> embed page | static | login | proxy
  4. security headers        -> on every response, errors included
  5. Location spoofing       -> internal authorities never reach the client
"""

import logging
import secrets
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass
from enum import Enum
from urllib.parse import urlsplit, urlunsplit

import httpx
from fastapi import FastAPI, Query, Request, WebSocket
from fastapi.responses import HTMLResponse, JSONResponse, RedirectResponse
from fastapi.staticfiles import StaticFiles
from starlette.requests import HTTPConnection
from starlette.types import ASGIApp, Message, Receive, Scope, Send

from notebook_gate.config import GatewayConfig
from notebook_gate.errors import GateError, StartupError
from notebook_gate.notebook import (
    NotebookDocument,
    apply_read_only,
    load_notebook,
    render_embed_page,
    render_login_page,
)
from notebook_gate.proxy import error_response, proxy_http, proxy_websocket, refuse_websocket
from notebook_gate.security import (
    SESSION_COOKIE,
    SessionSigner,
    apply_security_headers,
    evaluate_access,
    spoof_rewrite_all,
    verify_password,
)
from notebook_gate.server import ServerHandle, run_server

logger = logging.getLogger(__name__)

PROXY_METHODS = ["GET", "POST", "PUT", "DELETE", "PATCH", "OPTIONS", "HEAD"]


class Route(str, Enum):
    EMBED_PAGE = "embed_page"
    STATIC = "static"
    PROXY_HTTP = "proxy_http"
    PROXY_WS = "proxy_ws"
    AUTH = "auth"


PUBLIC_ROUTES = frozenset({Route.AUTH, Route.STATIC})


@dataclass(frozen=True)
class RequestContext:
    client_ip: str
    authenticated: bool
    route: Route


def classify_route(scope: Scope) -> Route:
    if scope["type"] == "websocket":
        return Route.PROXY_WS
    path = scope["path"]
    if path == "/":
        return Route.EMBED_PAGE
    if path == "/auth":
        return Route.AUTH
    if path.startswith("/static/"):
        return Route.STATIC
    return Route.PROXY_HTTP


def safe_next(value: str | None) -> str:
    """Only same-site absolute paths are valid post-login targets."""
    if not value or not value.startswith("/") or value.startswith("//") or "\\" in value:
        return "/"
    return value


def rewrite_location(value: str, cfg: GatewayConfig) -> str:
    parts = urlsplit(value)
    if parts.netloc and parts.netloc in cfg.internal_authorities:
        value = urlunsplit((cfg.public_scheme, cfg.advertised_authority, parts.path, parts.query, parts.fragment))
    return spoof_rewrite_all(value, cfg.internal_authorities, cfg.advertised_authority)


# ═══════════════════════════════════════════════════════════
# Shared state
# ═══════════════════════════════════════════════════════════

class GatewayState:
    """Everything a request handler reads. Immutable apart from the lazily created HTTP client."""

    def __init__(self, cfg: GatewayConfig, notebook: NotebookDocument | None = None):
        self.cfg = cfg
        self.header_set = cfg.security_headers
        self.signer = SessionSigner(cfg.cookie_secret or secrets.token_urlsafe(32), cfg.session_ttl)

        doc = notebook if notebook is not None else load_notebook(cfg.notebook_path)
        self.notebook = apply_read_only(doc) if cfg.read_only else doc
        self.embed_page = render_embed_page(self.notebook, cfg)
        self._client: httpx.AsyncClient | None = None

    @property
    def client(self) -> httpx.AsyncClient:
        if self._client is None:
            client = httpx.AsyncClient(
                timeout=httpx.Timeout(self.cfg.proxy_timeout),
                limits=httpx.Limits(max_connections=None, max_keepalive_connections=256),
                follow_redirects=False,
                trust_env=False,
            )
            # upstream sees the client's own headers, not httpx defaults
            for name in ("Accept", "Accept-Encoding", "Connection", "User-Agent"):
                client.headers.pop(name, None)
            self._client = client
        return self._client

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.aclose()
            self._client = None

    def is_authenticated(self, scope: Scope) -> bool:
        if self.cfg.password is None:
            return True
        return self.signer.validate(HTTPConnection(scope).cookies.get(SESSION_COOKIE))


# ═══════════════════════════════════════════════════════════
# Security pipeline
# ═══════════════════════════════════════════════════════════

class GatewayPipeline:
    """Pure ASGI middleware applying access, auth, headers and spoofing around the app."""

    def __init__(self, app: ASGIApp, state: GatewayState):
        self.app = app
        self.state = state

    async def __call__(self, scope: Scope, receive: Receive, send: Send) -> None:
        if scope["type"] not in ("http", "websocket"):
            await self.app(scope, receive, send)
            return

        cfg = self.state.cfg
        started = time.perf_counter()
        client_ip = scope["client"][0] if scope.get("client") else ""
        route = classify_route(scope)
        progress = {"status": 0, "started": False}

        async def secured_send(message: Message) -> None:
            kind = message["type"]
            if kind in ("http.response.start", "websocket.http.response.start"):
                headers = [
                    (k, rewrite_location(v.decode("latin-1"), cfg).encode("latin-1")) if k.lower() == b"location" else (k, v)
                    for k, v in message.get("headers", [])
                ]
                message = {**message, "headers": apply_security_headers(headers, self.state.header_set)}
                progress["status"] = message["status"]
                progress["started"] = True
            elif kind == "websocket.accept":
                message = {**message, "headers": apply_security_headers(message.get("headers") or [], self.state.header_set)}
                progress["status"] = 101
                progress["started"] = True
            elif kind == "websocket.close" and not progress["started"]:
                # closing before accept is a 403 handshake rejection
                progress["status"] = 403
                progress["started"] = True
            await send(message)

        try:
            decision = evaluate_access(cfg.access, client_ip)
            if not decision.allowed:
                logger.warning(f"[ACCESS] Denied {client_ip}: {decision.reason}")
                await self._reject(scope, receive, secured_send, 403, "forbidden")
                return

            context = RequestContext(client_ip, self.state.is_authenticated(scope), route)
            if not context.authenticated and route not in PUBLIC_ROUTES:
                await self._unauthorized(scope, receive, secured_send)
                return

            scope["state"] = {**scope.get("state", {}), "context": context}
            await self.app(scope, receive, secured_send)
        except Exception:
            logger.exception(f"[ACCESS] Unhandled error for {scope.get('method', 'GET')} {scope['path']}")
            if not progress["started"]:
                if scope["type"] == "http":
                    await error_response(500, "internal error")(scope, receive, secured_send)
                else:
                    await secured_send({"type": "websocket.close", "code": 1011})
        finally:
            duration_ms = (time.perf_counter() - started) * 1000
            logger.info(
                f"[ACCESS] client_ip={client_ip} method={scope.get('method', 'GET')} path={scope['path']} "
                f"status={progress['status']} duration_ms={duration_ms:.1f}"
            )

    async def _reject(self, scope: Scope, receive: Receive, send: Send, status: int, detail: str) -> None:
        if scope["type"] == "websocket":
            await refuse_websocket(WebSocket(scope, receive, send), status, detail, close_code=1008)
        else:
            await error_response(status, detail)(scope, receive, send)

    async def _unauthorized(self, scope: Scope, receive: Receive, send: Send) -> None:
        if scope["type"] == "websocket":
            await refuse_websocket(WebSocket(scope, receive, send), 401, "authentication required", close_code=1008)
            return
        connection = HTTPConnection(scope)
        if "text/html" in connection.headers.get("accept", ""):
            query = scope.get("query_string", b"").decode("latin-1")
            next_path = scope["path"] + (f"?{query}" if query else "")
            response = HTMLResponse(render_login_page(safe_next(next_path)), status_code=401)
        else:
            response = JSONResponse({"detail": "authentication required"}, status_code=401)
        await response(scope, receive, send)


# ═══════════════════════════════════════════════════════════
# App
# ═══════════════════════════════════════════════════════════

def _context(connection: HTTPConnection) -> RequestContext:
    return connection.state.context


def create_app(cfg: GatewayConfig, notebook: NotebookDocument | None = None) -> FastAPI:
    state = GatewayState(cfg, notebook)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        await state.aclose()

    # no generated docs: every path other than ours belongs to the upstream
    app = FastAPI(title="notebook-gate", lifespan=lifespan, docs_url=None, redoc_url=None, openapi_url=None)
    app.state.gateway = state
    app.add_middleware(GatewayPipeline, state=state)

    @app.get("/", response_class=HTMLResponse)
    async def embed_page():
        return HTMLResponse(state.embed_page)

    @app.get("/auth", response_class=HTMLResponse)
    async def login_form(next_path: str = Query("/", alias="next")):
        return HTMLResponse(render_login_page(safe_next(next_path)))

    @app.post("/auth")
    async def login(request: Request):
        form = await request.form()
        next_path = safe_next(str(form.get("next") or "/"))
        supplied = str(form.get("password") or "")
        client_ip = _context(request).client_ip

        if cfg.password is not None and not verify_password(cfg.password, supplied):
            logger.warning(f"[AUTH] Failed login from {client_ip}")
            return HTMLResponse(render_login_page(next_path, error="Incorrect password."), status_code=401)

        logger.info(f"[AUTH] Session issued to {client_ip}")
        response = RedirectResponse(next_path, status_code=303)
        response.set_cookie(
            SESSION_COOKIE,
            state.signer.issue(),
            max_age=int(cfg.session_ttl),
            path="/",
            httponly=True,
            samesite="lax",
            secure=cfg.tls.enabled,
        )
        return response

    app.mount("/static", StaticFiles(directory=cfg.effective_static_dir), name="static")

    @app.api_route("/{path:path}", methods=PROXY_METHODS)
    async def proxy(request: Request, path: str):
        return await proxy_http(request, state.client, cfg, _context(request).client_ip)

    @app.websocket("/{path:path}")
    async def proxy_ws(websocket: WebSocket, path: str):
        await proxy_websocket(websocket, cfg, _context(websocket).client_ip)

    return app


def serve(cfg: GatewayConfig) -> ServerHandle:
    """Bind, start and return a handle; fails before returning if anything is wrong."""
    try:
        app = create_app(cfg)
    except (GateError, OSError) as e:
        raise StartupError(f"cannot load notebook {cfg.notebook_path}: {e}") from e

    handle = run_server(
        app,
        cfg.listen_host,
        cfg.listen_port,
        certfile=cfg.tls.certificate_path if cfg.tls.enabled else None,
        keyfile=cfg.tls.private_key_path if cfg.tls.enabled else None,
        grace_seconds=cfg.proxy_timeout,
        name="notebook-gate",
    )
    logger.info(
        f"[SERVE] Serving {cfg.notebook_path.name} as {cfg.public_scheme}://{cfg.advertised_authority} "
        f"-> {cfg.upstream} (read_only={cfg.read_only}, password={'on' if cfg.password else 'off'})"
    )
    return handle

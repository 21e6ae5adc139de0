"""
Reverse proxy to the upstream notebook server, for plain HTTP and for the
WebSocket channels kernels talk over.

Request bodies are streamed upstream with a running byte count, so an
oversized upload is cut off at max_body_bytes without being buffered. Binary
response bodies stream straight back; textual bodies are read once so
internal authorities can be rewritten before they reach the client.
"""

import asyncio
import contextlib
import json
import logging
from collections.abc import AsyncIterator, Iterable

import httpx
from fastapi import Request, WebSocket
from fastapi.responses import JSONResponse, Response, StreamingResponse
from starlette.background import BackgroundTask
from starlette.websockets import WebSocketDisconnect
from websockets.asyncio.client import ClientConnection, connect
from websockets.exceptions import ConnectionClosed, InvalidHandshake, InvalidURI

from notebook_gate.config import GatewayConfig
from notebook_gate.errors import BodyTooLarge, GateError
from notebook_gate.notebook import apply_read_only, parse_notebook, serialize_notebook
from notebook_gate.security import SESSION_COOKIE, spoof_rewrite_all

logger = logging.getLogger(__name__)

HOP_BY_HOP = frozenset({
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "trailers",
    "transfer-encoding",
    "upgrade",
})

# set by the gateway itself, never copied from the client
_GATEWAY_OWNED = frozenset({"host", "x-forwarded-for", "x-forwarded-proto", "x-forwarded-host"})
_WS_HANDSHAKE = frozenset({
    "sec-websocket-key",
    "sec-websocket-version",
    "sec-websocket-extensions",
    "sec-websocket-protocol",
    "sec-websocket-accept",
    "content-length",
    "user-agent",
})

_TEXTUAL_MARKERS = ("json", "javascript", "xml", "html", "css")
CONTENTS_API_PREFIX = "/api/contents"
WRITE_METHODS = frozenset({"PUT", "PATCH", "POST", "DELETE"})


def error_response(status: int, detail: str) -> JSONResponse:
    return JSONResponse({"detail": detail}, status_code=status)


# ═══════════════════════════════════════════════════════════
# Header handling
# ═══════════════════════════════════════════════════════════

def strip_hop_by_hop(pairs: Iterable[tuple[str, str]]) -> list[tuple[str, str]]:
    """Drop hop-by-hop headers, including any named by the Connection header."""
    pairs = list(pairs)
    named = {
        token.strip().lower()
        for name, value in pairs if name.lower() == "connection"
        for token in value.split(",") if token.strip()
    }
    return [(k, v) for k, v in pairs if k.lower() not in HOP_BY_HOP and k.lower() not in named]


def strip_cookie(cookie_header: str, name: str) -> str:
    kept = [part.strip() for part in cookie_header.split(";") if part.strip()]
    return "; ".join(part for part in kept if part.split("=", 1)[0].strip() != name)


def _origin(scheme: str, authority: str) -> str:
    return f"{scheme}://{authority}"


def upstream_request_headers(
    pairs: Iterable[tuple[str, str]],
    cfg: GatewayConfig,
    client_ip: str,
    *,
    drop: frozenset[str] = frozenset(),
) -> list[tuple[str, str]]:
    """Headers to send upstream for a client request.

    Host is left to the HTTP client, which derives it from the upstream URL.
    """
    advertised_origin = _origin(cfg.public_scheme, cfg.advertised_authority)
    upstream_origin = _origin(cfg.upstream_url.scheme, cfg.upstream_authority)
    prior_hops: list[str] = []
    out: list[tuple[str, str]] = []

    for name, value in strip_hop_by_hop(pairs):
        key = name.lower()
        if key in drop:
            continue
        if key == "x-forwarded-for":
            prior_hops.append(value)
            continue
        if key in _GATEWAY_OWNED:
            continue
        if key == "cookie":
            value = strip_cookie(value, SESSION_COOKIE)
            if not value:
                continue
        if key == "origin" and value == advertised_origin:
            value = upstream_origin
        out.append((name, value))

    out.append(("X-Forwarded-For", ", ".join([*prior_hops, client_ip])))
    out.append(("X-Forwarded-Proto", cfg.public_scheme))
    out.append(("X-Forwarded-Host", cfg.advertised_authority))
    return out


def client_response_headers(upstream: httpx.Response, *, drop: Iterable[str] = ()) -> list[tuple[bytes, bytes]]:
    dropped = {d.lower() for d in drop}
    return [
        (k.lower().encode("latin-1"), v.encode("latin-1"))
        for k, v in strip_hop_by_hop(upstream.headers.multi_items())
        if k.lower() not in dropped
    ]


def is_textual(content_type: str) -> bool:
    content_type = content_type.lower()
    return content_type.startswith("text/") or any(marker in content_type for marker in _TEXTUAL_MARKERS)


def upstream_url_for(cfg: GatewayConfig, path: str, query: str, *, websocket: bool = False) -> str:
    base = cfg.upstream_url
    scheme = base.scheme
    if websocket:
        scheme = "wss" if scheme == "https" else "ws"
    prefix = base.path.rstrip("/")
    url = f"{scheme}://{cfg.upstream_authority}{prefix}{path}"
    return f"{url}?{query}" if query else url


# ═══════════════════════════════════════════════════════════
# HTTP
# ═══════════════════════════════════════════════════════════

async def _limited_body(request: Request, limit: int) -> AsyncIterator[bytes]:
    received = 0
    async for chunk in request.stream():
        received += len(chunk)
        if received > limit:
            raise BodyTooLarge(limit)
        if chunk:
            yield chunk


def _has_body(request: Request) -> bool:
    if "transfer-encoding" in request.headers:
        return True
    return request.headers.get("content-length", "0") not in ("", "0")


def _read_only_contents(body: bytes) -> bytes:
    """Mark every cell of a contents-API notebook model read-only."""
    try:
        model = json.loads(body)
    except json.JSONDecodeError:
        return body
    if not isinstance(model, dict) or model.get("type") != "notebook" or not isinstance(model.get("content"), dict):
        return body
    try:
        doc = parse_notebook(json.dumps(model["content"]))
    except GateError as e:
        logger.warning(f"[PROXY] Contents model is not a valid notebook, passing through: {e}")
        return body
    model["content"] = json.loads(serialize_notebook(apply_read_only(doc)))
    return json.dumps(model).encode("utf-8")


async def proxy_http(request: Request, client: httpx.AsyncClient, cfg: GatewayConfig, client_ip: str) -> Response:
    """Forward one HTTP request upstream and relay the response."""
    path = request.url.path
    is_contents = path == CONTENTS_API_PREFIX or path.startswith(CONTENTS_API_PREFIX + "/")

    if cfg.read_only and is_contents and request.method in WRITE_METHODS:
        logger.info(f"[PROXY] Refused {request.method} {path}: notebook is read-only")
        return error_response(403, "notebook is read-only")

    declared = request.headers.get("content-length")
    if declared and declared.isdigit() and int(declared) > cfg.max_body_bytes:
        return error_response(413, f"request body exceeds {cfg.max_body_bytes} bytes")

    target = upstream_url_for(cfg, path, request.url.query)
    headers = upstream_request_headers(request.headers.items(), cfg, client_ip)
    content = _limited_body(request, cfg.max_body_bytes) if _has_body(request) else None

    upstream_request = client.build_request(request.method, target, headers=headers, content=content)
    try:
        upstream = await client.send(upstream_request, stream=True)
    except BodyTooLarge as e:
        return error_response(413, str(e))
    except httpx.TimeoutException:
        logger.warning(f"[PROXY] Upstream timed out after {cfg.proxy_timeout}s: {request.method} {path}")
        return error_response(504, "upstream timed out")
    except httpx.TransportError as e:
        logger.warning(f"[PROXY] Upstream unreachable for {request.method} {path}: {e!r}")
        return error_response(502, "upstream unreachable")

    content_type = upstream.headers.get("content-type", "")
    # HEAD keeps the upstream Content-Length for a body it never sends
    if request.method == "HEAD" or not is_textual(content_type):
        response = StreamingResponse(
            upstream.aiter_raw(),
            status_code=upstream.status_code,
            background=BackgroundTask(upstream.aclose),
        )
        response.raw_headers = client_response_headers(upstream)
        return response

    try:
        body = await upstream.aread()
    except httpx.TimeoutException:
        return error_response(504, "upstream timed out")
    except httpx.TransportError as e:
        logger.warning(f"[PROXY] Upstream dropped the response for {path}: {e!r}")
        return error_response(502, "upstream closed the connection")
    finally:
        await upstream.aclose()

    if cfg.read_only and is_contents and request.method == "GET" and upstream.status_code == 200:
        body = _read_only_contents(body)
    body = spoof_rewrite_all(body, cfg.internal_authorities, cfg.advertised_authority)

    response = Response(content=body, status_code=upstream.status_code)
    # the body was decoded and may have changed length
    response.raw_headers.extend(client_response_headers(upstream, drop=("content-length", "content-encoding")))
    return response


# ═══════════════════════════════════════════════════════════
# WebSocket
# ═══════════════════════════════════════════════════════════

def sendable_close_code(code: int | None) -> int:
    """Map reserved close codes (never valid on the wire) to ones that are."""
    if code is None or code == 1005:
        return 1000
    if code in (1006, 1015):
        return 1011
    return code


async def refuse_websocket(websocket: WebSocket, status: int, detail: str, close_code: int = 1011) -> None:
    """Reject a handshake with an HTTP response when the server supports it, otherwise close."""
    if "websocket.http.response" in websocket.scope.get("extensions", {}):
        await websocket.send_denial_response(error_response(status, detail))
    else:
        await websocket.close(code=close_code, reason=detail[:120])


async def _client_to_upstream(websocket: WebSocket, upstream: ClientConnection) -> None:
    while True:
        message = await websocket.receive()
        if message["type"] == "websocket.disconnect":
            await upstream.close(code=sendable_close_code(message.get("code")), reason=message.get("reason") or "")
            return
        if message.get("text") is not None:
            await upstream.send(message["text"])
        else:
            await upstream.send(message.get("bytes") or b"")


async def _upstream_to_client(websocket: WebSocket, upstream: ClientConnection) -> None:
    with contextlib.suppress(ConnectionClosed):
        async for frame in upstream:
            if isinstance(frame, str):
                await websocket.send_text(frame)
            else:
                await websocket.send_bytes(frame)
    code = sendable_close_code(upstream.close_code)
    with contextlib.suppress(RuntimeError, WebSocketDisconnect):
        await websocket.close(code=code, reason=upstream.close_reason or None)


async def proxy_websocket(websocket: WebSocket, cfg: GatewayConfig, client_ip: str) -> None:
    """Complete the upgrade upstream, then relay frames both ways until either side closes."""
    path = websocket.url.path
    target = upstream_url_for(cfg, path, websocket.url.query, websocket=True)
    headers = upstream_request_headers(websocket.headers.items(), cfg, client_ip, drop=_WS_HANDSHAKE)
    subprotocols = websocket.scope.get("subprotocols") or None

    try:
        upstream = await connect(
            target,
            additional_headers=headers,
            subprotocols=subprotocols,
            open_timeout=cfg.proxy_timeout,
            user_agent_header=None,
            max_size=None,
        )
    except (OSError, asyncio.TimeoutError, InvalidHandshake, InvalidURI) as e:
        logger.warning(f"[WS] Upstream refused {path}: {e!r}")
        await refuse_websocket(websocket, 502, "upstream refused the WebSocket upgrade")
        return

    await websocket.accept(subprotocol=upstream.subprotocol)
    logger.debug(f"[WS] Relaying {path} for {client_ip}")

    to_upstream = asyncio.create_task(_client_to_upstream(websocket, upstream))
    to_client = asyncio.create_task(_upstream_to_client(websocket, upstream))
    try:
        done, pending = await asyncio.wait({to_upstream, to_client}, return_when=asyncio.FIRST_COMPLETED)
        if to_upstream in done and isinstance(to_upstream.exception(), ConnectionClosed):
            # upstream went away mid-send; let the other pump forward its close code
            done, pending = await asyncio.wait({to_client}, timeout=5.0)
        for task in pending:
            task.cancel()
        await asyncio.gather(*pending, return_exceptions=True)
        for task in done:
            error = task.exception()
            if error is not None and not isinstance(error, (ConnectionClosed, WebSocketDisconnect)):
                logger.warning(f"[WS] Relay for {path} ended with {error!r}")
    finally:
        await upstream.close()
    logger.debug(f"[WS] Closed {path} (upstream code {upstream.close_code})")

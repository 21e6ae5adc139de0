"""
Mock notebook server and kernel: a hermetic stand-in for a Jupyter server.

HTTP:
  GET  /                        HTML landing page (links use the server's own authority)
  GET  /tree                    HTML file tree placeholder
  GET  /api/kernels             JSON kernel list
  *    /echo/{path}             echoes the request body; status from ?status=
  GET  /headers                 JSON list of the request headers as received
  GET  /redirect                302 to this server's absolute /tree URL
  GET  /api/contents/{name}     notebook model; PUT/PATCH/DELETE/POST accepted

WebSocket:
  /api/kernels/{id}/channels    execute_request / kernel_info_request
  /echo-ws                      echo; "close:<code>" closes, "burst:<n>" sends n frames

Every HTTP request and every execute is delayed by the configured latency,
which the bench harness uses for calibration.
"""

import ast
import asyncio
import copy
import logging
import operator
from datetime import datetime, timezone
from typing import Any

from fastapi import FastAPI, Request, WebSocket
from fastapi.responses import HTMLResponse, JSONResponse, RedirectResponse, Response
from starlette.websockets import WebSocketDisconnect

from notebook_gate.config import split_host_port
from notebook_gate.errors import GateError
from notebook_gate.kernel_messages import KernelMessage, make_message, make_reply, parse_message, serialize_message
from notebook_gate.server import ServerHandle, run_server

logger = logging.getLogger(__name__)

MOCK_KERNEL_ID = "mock-kernel"

DEMO_NOTEBOOK: dict[str, Any] = {
    "nbformat": 4,
    "nbformat_minor": 5,
    "metadata": {"title": "Mock Notebook", "kernelspec": {"name": "mock", "display_name": "Mock"}},
    "cells": [
        {"cell_type": "markdown", "metadata": {}, "source": "# Arithmetic"},
        {"cell_type": "code", "metadata": {"editable": True}, "source": "1+1", "outputs": [], "execution_count": None},
        {"cell_type": "raw", "metadata": {}, "source": "raw text"},
    ],
}


# ═══════════════════════════════════════════════════════════
# Evaluator
# ═══════════════════════════════════════════════════════════

class EvalError(Exception):
    pass


_BINARY_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}
_UNARY_OPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def evaluate(code: str) -> int:
    """Evaluate integer arithmetic built from +, - and *. Anything else is an EvalError."""
    try:
        tree = ast.parse(code.strip(), mode="eval")
        return _eval_node(tree.body)
    except SyntaxError as e:
        raise EvalError(f"invalid syntax: {e.msg}") from e
    except (RecursionError, MemoryError, ValueError) as e:
        raise EvalError(f"expression too large: {type(e).__name__}") from e


def evaluate_text(code: str) -> str:
    value = evaluate(code)
    try:
        return str(value)
    except ValueError as e:
        # int -> str digit limit
        raise EvalError(str(e)) from e


def _eval_node(node: ast.AST) -> int:
    if isinstance(node, ast.Constant) and type(node.value) is int:
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _BINARY_OPS:
        return _BINARY_OPS[type(node.op)](_eval_node(node.left), _eval_node(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY_OPS:
        return _UNARY_OPS[type(node.op)](_eval_node(node.operand))
    raise EvalError(f"unsupported expression: {ast.dump(node)[:60]}")


# ═══════════════════════════════════════════════════════════
# Kernel session state
# ═══════════════════════════════════════════════════════════

class MockKernel:
    """Execution counters per client session; messages within a session are handled in order."""

    def __init__(self, kernel_id: str = MOCK_KERNEL_ID, latency: float = 0.0):
        self.kernel_id = kernel_id
        self.latency = latency
        self.session = f"kernel-{kernel_id}"
        self.connections = 0
        self._counts: dict[str, int] = {}

    def next_count(self, session: str) -> int:
        self._counts[session] = self._counts.get(session, 0) + 1
        return self._counts[session]

    def _status(self, request: KernelMessage, state: str) -> KernelMessage:
        return make_reply(request, "status", {"execution_state": state}, session=self.session, channel="iopub")

    async def handle(self, request: KernelMessage) -> list[KernelMessage]:
        if request.msg_type == "execute_request":
            return await self.execute(request)
        if request.msg_type == "kernel_info_request":
            return [
                self._status(request, "busy"),
                make_reply(request, "kernel_info_reply", {
                    "status": "ok",
                    "protocol_version": "5.3",
                    "implementation": "notebook-gate-mock",
                    "implementation_version": "0.1.0",
                    "language_info": {"name": "arithmetic", "mimetype": "text/plain", "file_extension": ".txt"},
                    "banner": "notebook-gate mock kernel",
                }, session=self.session, channel="shell"),
                self._status(request, "idle"),
            ]

        reply_type = request.msg_type.removesuffix("_request") + "_reply"
        return [make_reply(request, reply_type, {
            "status": "error",
            "ename": "UnsupportedMessage",
            "evalue": f"mock kernel does not handle {request.msg_type}",
            "traceback": [],
        }, session=self.session, channel="shell")]

    async def execute(self, request: KernelMessage) -> list[KernelMessage]:
        if self.latency:
            await asyncio.sleep(self.latency)

        count = self.next_count(request.header.session)
        code = str(request.content.get("code", ""))
        out = [self._status(request, "busy")]
        try:
            text = evaluate_text(code)
        except EvalError as e:
            error = {"ename": "EvalError", "evalue": str(e), "traceback": [f"EvalError: {e}"]}
            out.append(make_reply(request, "error", error, session=self.session, channel="iopub"))
            out.append(make_reply(request, "execute_reply", {
                "status": "error", "execution_count": count, **error,
            }, session=self.session, channel="shell"))
        else:
            out.append(make_reply(request, "stream", {"name": "stdout", "text": text}, session=self.session, channel="iopub"))
            out.append(make_reply(request, "execute_reply", {
                "status": "ok", "execution_count": count, "user_expressions": {}, "payload": [],
            }, session=self.session, channel="shell"))
        out.append(self._status(request, "idle"))
        return out


def malformed_reply(reason: str, session: str) -> KernelMessage:
    return make_message("error", {
        "ename": "MalformedMessage",
        "evalue": reason,
        "traceback": [],
    }, session, channel="iopub", username="kernel")


# ═══════════════════════════════════════════════════════════
# App
# ═══════════════════════════════════════════════════════════

def create_mock_app(latency: float = 0.0, kernel_id: str = MOCK_KERNEL_ID) -> FastAPI:
    app = FastAPI(title="notebook-gate mock upstream", docs_url=None, redoc_url=None, openapi_url=None)
    kernel = MockKernel(kernel_id, latency)
    notebooks: dict[str, dict[str, Any]] = {"demo.ipynb": copy.deepcopy(DEMO_NOTEBOOK)}
    app.state.kernel = kernel
    app.state.notebooks = notebooks

    @app.middleware("http")
    async def artificial_latency(request: Request, call_next):
        if kernel.latency:
            await asyncio.sleep(kernel.latency)
        return await call_next(request)

    @app.get("/", response_class=HTMLResponse)
    async def landing(request: Request):
        base = f"{request.url.scheme}://{request.url.netloc}"
        return HTMLResponse(
            "<!DOCTYPE html><html><head><title>Mock Notebook Server</title></head><body>"
            f'<p>Mock notebook server. Open the <a href="{base}/tree">file tree</a>.</p>'
            "</body></html>"
        )

    @app.api_route("/tree", methods=["GET", "HEAD"], response_class=HTMLResponse)
    async def tree():
        items = "".join(f"<li>{name}</li>" for name in sorted(notebooks))
        return HTMLResponse(f"<!DOCTYPE html><html><body><ul>{items}</ul></body></html>")

    @app.get("/api/kernels")
    async def list_kernels():
        return [{
            "id": kernel.kernel_id,
            "name": "mock",
            "last_activity": datetime.now(timezone.utc).isoformat(),
            "execution_state": "idle",
            "connections": kernel.connections,
        }]

    @app.api_route("/echo/{path:path}", methods=["GET", "POST", "PUT", "DELETE", "PATCH"])
    async def echo(request: Request, path: str, status: int = 200):
        body = await request.body()
        return Response(
            content=body,
            status_code=status,
            media_type=request.headers.get("content-type", "application/octet-stream"),
            headers={"X-Echo-Method": request.method, "X-Echo-Path": f"/{path}"},
        )

    @app.get("/headers")
    async def headers(request: Request):
        return JSONResponse([[k, v] for k, v in request.headers.items()])

    @app.get("/redirect")
    async def redirect(request: Request):
        return RedirectResponse(f"{request.url.scheme}://{request.url.netloc}/tree", status_code=302)

    @app.api_route("/api/contents/{name}", methods=["GET", "PUT", "PATCH", "DELETE", "POST"])
    async def contents(request: Request, name: str):
        if request.method == "GET":
            if name not in notebooks:
                return JSONResponse({"message": f"No such file: {name}"}, status_code=404)
            return {
                "name": name,
                "path": name,
                "type": "notebook",
                "format": "json",
                "writable": True,
                "content": notebooks[name],
            }
        if request.method == "DELETE":
            notebooks.pop(name, None)
            return Response(status_code=204)
        model = await request.json()
        notebooks[name] = model.get("content", model)
        return {"name": name, "path": name, "type": "notebook"}

    @app.websocket("/api/kernels/{kid}/channels")
    async def channels(websocket: WebSocket, kid: str):
        await websocket.accept()
        kernel.connections += 1
        try:
            while True:
                message = await websocket.receive()
                if message["type"] == "websocket.disconnect":
                    return
                raw = message.get("text") if message.get("text") is not None else (message.get("bytes") or b"")
                try:
                    request = parse_message(raw)
                except GateError as e:
                    logger.warning(f"[MOCK] Malformed message on {kid}: {e}")
                    await websocket.send_text(serialize_message(malformed_reply(str(e), kernel.session)))
                    continue
                for out in await kernel.handle(request):
                    await websocket.send_text(serialize_message(out))
        except WebSocketDisconnect:
            pass
        finally:
            kernel.connections -= 1

    @app.websocket("/echo-ws")
    async def echo_ws(websocket: WebSocket):
        await websocket.accept()
        while True:
            message = await websocket.receive()
            if message["type"] == "websocket.disconnect":
                return
            text = message.get("text")
            if text is None:
                await websocket.send_bytes(message.get("bytes") or b"")
            elif text.startswith("close:"):
                await websocket.close(code=int(text.removeprefix("close:")))
                return
            elif text.startswith("burst:"):
                for i in range(int(text.removeprefix("burst:"))):
                    await websocket.send_text(f"u-{i}")
            else:
                await websocket.send_text(text)

    return app


def mock_kernel_serve(address: str, latency: float = 0.0) -> ServerHandle:
    """Start the mock upstream on `host:port` (port 0 picks a free one)."""
    host, port = split_host_port(address)
    handle = run_server(create_mock_app(latency), host, port, grace_seconds=5.0, name="mock-upstream")
    logger.info(f"[MOCK] Mock upstream at {handle.url} (latency={latency * 1000:.0f}ms)")
    return handle

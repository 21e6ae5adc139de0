"""
Jupyter wire-message envelope and the execute_request round trip.

Messages travel as one JSON document per WebSocket text frame with the
top-level keys header, parent_header, metadata and content (plus the
optional channel name Jupyter's WebSocket bridge adds). HMAC signing is not
part of this subset.
"""

from __future__ import annotations

import asyncio
import json
import logging
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, ValidationError, field_serializer, field_validator
from websockets.asyncio.client import ClientConnection, connect

from notebook_gate.errors import MissingHeaderField, NotJson, SchemaViolation, loc_to_path

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "5.3"
REQUIRED_HEADER_FIELDS = ("msg_id", "msg_type")


class MessageHeader(BaseModel):
    model_config = ConfigDict(extra="allow")

    msg_id: str
    session: str = ""
    username: str = ""
    msg_type: str
    version: str = PROTOCOL_VERSION
    date: str = ""


class KernelMessage(BaseModel):
    model_config = ConfigDict(extra="allow")

    header: MessageHeader
    parent_header: MessageHeader | None = None
    metadata: dict[str, Any] = {}
    content: dict[str, Any] = {}
    channel: str | None = None

    @field_validator("parent_header", mode="before")
    @classmethod
    def empty_parent_is_none(cls, v: Any) -> Any:
        return None if v in (None, {}) else v

    @field_serializer("parent_header")
    def parent_as_mapping(self, v: MessageHeader | None) -> dict[str, Any]:
        return {} if v is None else v.model_dump(mode="json")

    @property
    def msg_type(self) -> str:
        return self.header.msg_type


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def new_msg_id() -> str:
    return uuid.uuid4().hex


def make_message(
    msg_type: str,
    content: dict[str, Any],
    session: str,
    *,
    parent: KernelMessage | None = None,
    channel: str | None = None,
    username: str = "",
) -> KernelMessage:
    return KernelMessage(
        header=MessageHeader(
            msg_id=new_msg_id(),
            session=session,
            username=username,
            msg_type=msg_type,
            version=PROTOCOL_VERSION,
            date=_now(),
        ),
        parent_header=parent.header if parent is not None else None,
        metadata={},
        content=content,
        channel=channel,
    )


def make_reply(
    request: KernelMessage,
    msg_type: str,
    content: dict[str, Any],
    *,
    session: str,
    channel: str,
) -> KernelMessage:
    """A message caused by `request`; its parent_header is the request's header."""
    return make_message(msg_type, content, session, parent=request, channel=channel, username="kernel")


def make_execute_request(code: str, session: str, username: str = "") -> KernelMessage:
    if not session:
        raise ValueError("session must be non-empty")
    return make_message(
        "execute_request",
        {
            "code": code,
            "silent": False,
            "store_history": True,
            "allow_stdin": False,
            "stop_on_error": True,
        },
        session,
        channel="shell",
        username=username,
    )


def serialize_message(msg: KernelMessage) -> str:
    data = msg.model_dump(mode="json")
    if data.get("channel") is None:
        data.pop("channel", None)
    return json.dumps(data)


def parse_message(raw: bytes | str) -> KernelMessage:
    """Parse one wire message; absent metadata/content/parent_header become empty."""
    try:
        data = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise NotJson(str(e)) from e
    if not isinstance(data, dict):
        raise NotJson("message must be a JSON object")

    header = data.get("header")
    if not isinstance(header, dict):
        header = {}
    for name in REQUIRED_HEADER_FIELDS:
        if not header.get(name):
            raise MissingHeaderField(name)

    try:
        return KernelMessage.model_validate({
            **data,
            "header": header,
            "parent_header": data.get("parent_header") or {},
            "metadata": data.get("metadata") or {},
            "content": data.get("content") or {},
        })
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaViolation(loc_to_path(first["loc"]), first["msg"]) from e


def correlate(reply: KernelMessage, request: KernelMessage) -> bool:
    return reply.parent_header is not None and reply.parent_header.msg_id == request.header.msg_id


# ═══════════════════════════════════════════════════════════
# Client-side execute flow
# ═══════════════════════════════════════════════════════════

@dataclass
class ExecutionResult:
    status: Literal["ok", "error"]
    execution_count: int
    stream_text: str = ""
    error_name: str | None = None
    error_traceback: str | None = None
    messages: list[KernelMessage] = field(default_factory=list)

    def __post_init__(self):
        if self.status == "error" and not self.error_name:
            raise ValueError("an error result must name the error")

    @property
    def msg_types(self) -> list[str]:
        return [m.msg_type for m in self.messages]


class KernelClient:
    """Talks to a kernel over the Jupyter WebSocket channel.

    Usage:
        async with KernelClient("ws://host/api/kernels/<id>/channels") as kc:
            result = await kc.execute("1+1")
    """

    def __init__(self, ws_url: str, session: str | None = None, headers: dict[str, str] | None = None, ssl: Any = None):
        self.ws_url = ws_url
        self.session = session or uuid.uuid4().hex
        self.headers = headers or {}
        self.ssl = ssl
        self._ws: ClientConnection | None = None

    async def __aenter__(self) -> KernelClient:
        kwargs: dict[str, Any] = {"additional_headers": self.headers, "max_size": None}
        if self.ssl is not None:
            kwargs["ssl"] = self.ssl
        self._ws = await connect(self.ws_url, **kwargs)
        return self

    async def __aexit__(self, *exc) -> None:
        if self._ws is not None:
            await self._ws.close()

    @property
    def ws(self) -> ClientConnection:
        if self._ws is None:
            raise RuntimeError("KernelClient must be used as 'async with KernelClient(...)'")
        return self._ws

    async def send(self, msg: KernelMessage) -> None:
        await self.ws.send(serialize_message(msg))

    async def receive(self) -> KernelMessage:
        return parse_message(await self.ws.recv())

    async def execute(self, code: str, timeout: float = 10.0) -> ExecutionResult:
        request = make_execute_request(code, self.session)
        await self.send(request)
        return await asyncio.wait_for(self._collect(request), timeout=timeout)

    async def _collect(self, request: KernelMessage) -> ExecutionResult:
        messages: list[KernelMessage] = []
        reply: KernelMessage | None = None
        stream: list[str] = []
        while True:
            msg = await self.receive()
            if not correlate(msg, request):
                logger.debug(f"[KERNEL] Skipping uncorrelated {msg.msg_type}")
                continue
            messages.append(msg)
            if msg.msg_type == "stream" and msg.content.get("name") == "stdout":
                stream.append(msg.content.get("text", ""))
            elif msg.msg_type == "execute_reply":
                reply = msg
            elif msg.msg_type == "status" and msg.content.get("execution_state") == "idle" and reply is not None:
                break

        content = reply.content
        traceback = content.get("traceback")
        return ExecutionResult(
            status=content.get("status", "error"),
            execution_count=content.get("execution_count", 0),
            stream_text="".join(stream),
            error_name=content.get("ename"),
            error_traceback="\n".join(traceback) if traceback else None,
            messages=messages,
        )

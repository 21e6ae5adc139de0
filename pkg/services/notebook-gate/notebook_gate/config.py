"""
Gateway configuration: one JSON document whose keys mirror GatewayConfig.

Every nested model forbids unknown keys so a typo in a security setting is a
startup error, not a silently ignored option. Relative paths resolve against
the directory holding the config file.
"""

import json
import logging
import os
from pathlib import Path
from typing import Annotated, Any
from urllib.parse import urlsplit

import httpx
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PlainSerializer,
    PlainValidator,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from notebook_gate.errors import ConfigNotFound, ConfigParseError, ConfigValidationError, loc_to_path
from notebook_gate.security import (
    AccessPolicy,
    PasswordRecord,
    SecurityHeaderSet,
    default_security_headers,
    merge_security_headers,
)

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "NOTEBOOK_GATE_CONFIG"
PACKAGE_STATIC_DIR = Path(__file__).parent / "static"

DEFAULT_PROXY_TIMEOUT = 30.0
DEFAULT_MAX_BODY_BYTES = 10 * 1024 * 1024
DEFAULT_SESSION_TTL = 8 * 60 * 60


def _resolve_path(v: Path | None, info: ValidationInfo) -> Path | None:
    base_dir = (info.context or {}).get("base_dir")
    if v is not None and not v.is_absolute() and base_dir is not None:
        return Path(base_dir) / v
    return v


def split_host_port(value: str) -> tuple[str, int]:
    """`host:port` or `[v6]:port` -> (host, port)."""
    parts = urlsplit(f"//{value}")
    try:
        port = parts.port
    except ValueError as e:
        raise ValueError(f"'{value}' has an invalid port") from e
    if not parts.hostname or port is None:
        raise ValueError(f"'{value}' must have the form host:port")
    return parts.hostname, port


def _parse_password(v: Any) -> PasswordRecord | None:
    if v is None or isinstance(v, PasswordRecord):
        return v
    if not isinstance(v, str):
        raise ValueError("password must be an 'algorithm:salt:digest' string")
    return PasswordRecord.parse(v)


StoredPassword = Annotated[
    PasswordRecord | None,
    PlainValidator(_parse_password),
    PlainSerializer(lambda r: str(r) if r is not None else None),
]


class TlsSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = False
    certificate_path: Path | None = None
    private_key_path: Path | None = None

    @field_validator("certificate_path", "private_key_path")
    @classmethod
    def resolve_relative(cls, v: Path | None, info: ValidationInfo) -> Path | None:
        return _resolve_path(v, info)

    @model_validator(mode="after")
    def material_is_readable(self) -> "TlsSettings":
        if not self.enabled:
            return self
        for name in ("certificate_path", "private_key_path"):
            path = getattr(self, name)
            if path is None:
                raise ValueError(f"{name} is required when TLS is enabled")
            if not path.is_file() or not os.access(path, os.R_OK):
                raise ValueError(f"{name} '{path}' is not a readable file")
        return self


class GatewayConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    listen_address: str
    advertised_authority: str | None = None
    tls: TlsSettings = TlsSettings()
    upstream: str
    notebook_path: Path
    notebook_url_path: str | None = None
    access: AccessPolicy = AccessPolicy()
    headers: dict[str, str] = {}
    password: StoredPassword = None
    read_only: bool = False
    proxy_timeout: float = Field(DEFAULT_PROXY_TIMEOUT, gt=0)
    max_body_bytes: int = Field(DEFAULT_MAX_BODY_BYTES, gt=0)
    session_ttl: float = Field(DEFAULT_SESSION_TTL, gt=0)
    cookie_secret: str | None = Field(None, min_length=16)
    default_title: str = "Notebook"
    static_dir: Path | None = None

    @model_validator(mode="before")
    @classmethod
    def advertise_listen_address_by_default(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("advertised_authority") is None and "listen_address" in data:
            return {**data, "advertised_authority": data["listen_address"]}
        return data

    @field_validator("notebook_path", "static_dir")
    @classmethod
    def resolve_relative(cls, v: Path | None, info: ValidationInfo) -> Path | None:
        return _resolve_path(v, info)

    @field_validator("listen_address")
    @classmethod
    def listen_address_parses(cls, v: str) -> str:
        split_host_port(v)
        return v

    @field_validator("advertised_authority")
    @classmethod
    def advertised_is_authority(cls, v: str | None) -> str | None:
        if v is None:
            return v
        parts = urlsplit(f"//{v}")
        if not parts.hostname or parts.path or parts.query:
            raise ValueError(f"'{v}' must have the form host[:port]")
        try:
            parts.port
        except ValueError as e:
            raise ValueError(f"'{v}' has an invalid port") from e
        return v

    @field_validator("upstream")
    @classmethod
    def upstream_is_absolute_http(cls, v: str) -> str:
        try:
            url = httpx.URL(v)
        except httpx.InvalidURL as e:
            raise ValueError(f"'{v}' is not a URL ({e})") from e
        if url.scheme not in ("http", "https") or not url.host:
            raise ValueError(f"'{v}' must be an absolute http/https URL")
        return v.rstrip("/")

    @field_validator("notebook_path")
    @classmethod
    def notebook_exists(cls, v: Path) -> Path:
        if not v.is_file():
            raise ValueError(f"notebook '{v}' does not exist")
        return v

    @field_validator("notebook_url_path")
    @classmethod
    def url_path_is_absolute(cls, v: str | None) -> str | None:
        if v is not None and not v.startswith("/"):
            raise ValueError("notebook_url_path must start with '/'")
        return v

    @field_validator("headers")
    @classmethod
    def headers_are_safe(cls, v: dict[str, str]) -> dict[str, str]:
        SecurityHeaderSet(v)
        return v

    # --- Derived values ---

    @property
    def listen_host(self) -> str:
        return split_host_port(self.listen_address)[0]

    @property
    def listen_port(self) -> int:
        return split_host_port(self.listen_address)[1]

    @property
    def public_scheme(self) -> str:
        return "https" if self.tls.enabled else "http"

    @property
    def upstream_url(self) -> httpx.URL:
        return httpx.URL(self.upstream)

    @property
    def upstream_authority(self) -> str:
        return self.upstream_url.netloc.decode("ascii")

    @property
    def internal_authorities(self) -> list[str]:
        """Authorities that must never reach a client: the upstream's and our own listen address."""
        return [a for a in (self.upstream_authority, self.listen_address) if a != self.advertised_authority]

    @property
    def security_headers(self) -> SecurityHeaderSet:
        return merge_security_headers(default_security_headers(), self.headers)

    @property
    def effective_static_dir(self) -> Path:
        return self.static_dir or PACKAGE_STATIC_DIR


def _reason(error: dict) -> str:
    if error["type"] == "extra_forbidden":
        return "unknown key"
    return error["msg"].removeprefix("Value error, ")


def build_config(data: dict[str, Any], base_dir: Path | None = None) -> GatewayConfig:
    try:
        return GatewayConfig.model_validate(data, context={"base_dir": base_dir})
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigValidationError(loc_to_path(first["loc"]), _reason(first)) from e


def load_config(path: str | os.PathLike) -> GatewayConfig:
    """Read, default and validate a gateway config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFound(str(path))

    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ConfigParseError(raw.count(b"\n", 0, e.start) + 1, "file is not UTF-8 text") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(e.lineno, e.msg) from e
    if not isinstance(data, dict):
        raise ConfigValidationError("<root>", "config must be a JSON object")

    cfg = build_config(data, base_dir=path.resolve().parent)
    logger.debug(f"Loaded config from {path}: listen={cfg.listen_address} upstream={cfg.upstream}")
    return cfg

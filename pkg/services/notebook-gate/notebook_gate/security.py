"""
Defense-in-depth layers as policy data plus pure enforcement functions.

  Security headers      -> SecurityHeaderSet, default_security_headers, apply_security_headers
  URL / port spoofing   -> spoof_rewrite, spoof_rewrite_all
  IP white/blacklisting -> AccessPolicy, evaluate_access
  Password auth/hashing -> PasswordRecord, hash_password, verify_password, SessionSigner

TLS settings live with the rest of the startup configuration in config.py,
and read-only cells are a notebook transform in notebook.py.
"""

from __future__ import annotations

import hashlib
import hmac
import ipaddress
import logging
import re
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from typing import Annotated, Any, Literal

from itsdangerous import BadSignature, TimestampSigner
from pydantic import BaseModel, ConfigDict, PlainSerializer, PlainValidator

from notebook_gate.errors import UnsupportedAlgorithm

logger = logging.getLogger(__name__)

IPNetwork = ipaddress.IPv4Network | ipaddress.IPv6Network
IPAddress = ipaddress.IPv4Address | ipaddress.IPv6Address


# ═══════════════════════════════════════════════════════════
# IP whitelisting / blacklisting
# ═══════════════════════════════════════════════════════════

def parse_cidr(value: Any) -> IPNetwork:
    """Parse `a.b.c.d/nn` or an IPv6 block. Host bits may be set; a bare
    address is treated as a single-host block."""
    if isinstance(value, (ipaddress.IPv4Network, ipaddress.IPv6Network)):
        return value
    if not isinstance(value, str):
        raise ValueError(f"expected a CIDR string, got {type(value).__name__}")
    try:
        return ipaddress.ip_network(value.strip(), strict=False)
    except ValueError as e:
        raise ValueError(f"'{value}' is not a valid IPv4/IPv6 CIDR block ({e})") from e


CidrBlock = Annotated[IPNetwork, PlainValidator(parse_cidr), PlainSerializer(str)]


class AccessPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    whitelist: list[CidrBlock] = []
    blacklist: list[CidrBlock] = []


@dataclass(frozen=True)
class AccessDecision:
    allowed: bool
    reason: str = ""


ALLOW = AccessDecision(True)


def _normalize_client(client: str | IPAddress) -> IPAddress:
    addr = ipaddress.ip_address(client) if isinstance(client, str) else client
    # dual-stack listeners report IPv4 peers as ::ffff:a.b.c.d
    if isinstance(addr, ipaddress.IPv6Address) and addr.ipv4_mapped is not None:
        return addr.ipv4_mapped
    return addr


def evaluate_access(policy: AccessPolicy, client: str | IPAddress) -> AccessDecision:
    """Blacklist wins over whitelist; an empty whitelist admits everyone."""
    try:
        addr = _normalize_client(client)
    except ValueError:
        return AccessDecision(False, f"unparseable client address '{client}'")

    for block in policy.blacklist:
        if addr in block:
            return AccessDecision(False, f"{addr} is blacklisted by {block}")

    if not policy.whitelist:
        return ALLOW

    for block in policy.whitelist:
        if addr in block:
            return ALLOW
    return AccessDecision(False, f"{addr} is not whitelisted")


# ═══════════════════════════════════════════════════════════
# Security headers
# ═══════════════════════════════════════════════════════════

_TOKEN = re.compile(r"^[!#$%&'*+.^_`|~0-9A-Za-z-]+$")
# visible ASCII, space, tab and obs-text
_FIELD_VALUE = re.compile(r"^[\t\x20-\x7e\x80-\xff]*$")

DEFAULT_CSP = (
    "default-src 'self'; "
    "script-src 'self' 'unsafe-inline' 'unsafe-eval'; "
    "style-src 'self' 'unsafe-inline'; "
    "img-src 'self' data: blob:; "
    "connect-src 'self' ws: wss:; "
    "frame-ancestors 'self'; "
    "object-src 'none'; "
    "base-uri 'self'"
)


class SecurityHeaderSet(Mapping[str, str]):
    """Ordered header-name -> value map, unique by case-insensitive name.

    Construction rejects values containing CR or LF, which would otherwise
    allow response splitting.
    """

    def __init__(self, headers: Mapping[str, str] | Iterable[tuple[str, str]] = ()):
        self._items: dict[str, tuple[str, str]] = {}
        pairs = headers.items() if isinstance(headers, Mapping) else headers
        for name, value in pairs:
            self._check(name, value)
            key = name.lower()
            if key in self._items:
                raise ValueError(f"duplicate header name '{name}'")
            self._items[key] = (name, value)

    @staticmethod
    def _check(name: str, value: str) -> None:
        if not isinstance(name, str) or not _TOKEN.match(name):
            raise ValueError(f"invalid header name '{name}'")
        if not isinstance(value, str):
            raise ValueError(f"header '{name}' value must be text")
        if "\r" in value or "\n" in value:
            raise ValueError(f"header '{name}' value contains CR or LF")
        if not _FIELD_VALUE.match(value):
            raise ValueError(f"header '{name}' value must be printable latin-1 text")

    def __getitem__(self, name: str) -> str:
        return self._items[name.lower()][1]

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and name.lower() in self._items

    def __iter__(self) -> Iterator[str]:
        return (name for name, _ in self._items.values())

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        return f"SecurityHeaderSet({dict(self.items())!r})"

    def merge(self, overrides: Mapping[str, str]) -> SecurityHeaderSet:
        """Override values in place (keeping order); new names are appended."""
        merged = {key: pair for key, pair in self._items.items()}
        for name, value in overrides.items():
            self._check(name, value)
            key = name.lower()
            original_name = merged[key][0] if key in merged else name
            merged[key] = (original_name, value)
        return SecurityHeaderSet(merged.values())

    def raw(self) -> list[tuple[bytes, bytes]]:
        return [(name.lower().encode("latin-1"), value.encode("latin-1")) for name, value in self._items.values()]


def default_security_headers() -> SecurityHeaderSet:
    return SecurityHeaderSet([
        ("Strict-Transport-Security", "max-age=31536000; includeSubDomains"),
        ("Content-Security-Policy", DEFAULT_CSP),
        ("X-Content-Type-Options", "nosniff"),
        ("X-Frame-Options", "SAMEORIGIN"),
        ("Referrer-Policy", "no-referrer"),
    ])


def apply_security_headers(
    raw_headers: Iterable[tuple[bytes, bytes]],
    header_set: SecurityHeaderSet,
) -> list[tuple[bytes, bytes]]:
    """Return ASGI response headers carrying every header in the set.

    Upstream headers with the same name are dropped, never duplicated.
    """
    owned = {name.lower().encode("latin-1") for name in header_set}
    kept = [(k, v) for k, v in raw_headers if k.lower() not in owned]
    return kept + header_set.raw()


# ═══════════════════════════════════════════════════════════
# URL / port spoofing
# ═══════════════════════════════════════════════════════════

def spoof_rewrite(text_body: str | bytes, internal_authority: str, advertised_authority: str) -> str | bytes:
    """Replace every occurrence of the internal authority with the advertised one.

    Bodies without an occurrence are returned as the same object.
    """
    if not internal_authority or internal_authority == advertised_authority:
        return text_body
    if isinstance(text_body, bytes):
        needle = internal_authority.encode("utf-8")
        if needle not in text_body:
            return text_body
        return text_body.replace(needle, advertised_authority.encode("utf-8"))
    if internal_authority not in text_body:
        return text_body
    return text_body.replace(internal_authority, advertised_authority)


def spoof_rewrite_all(text_body: str | bytes, internal_authorities: Iterable[str], advertised_authority: str) -> str | bytes:
    # longest first so "host:8888" is not clobbered by a shorter "host"
    for internal in sorted(set(internal_authorities), key=len, reverse=True):
        text_body = spoof_rewrite(text_body, internal, advertised_authority)
    return text_body


# ═══════════════════════════════════════════════════════════
# Password hashing and authentication
# ═══════════════════════════════════════════════════════════

PasswordAlgorithm = Literal["sha1", "sha256"]
DIGEST_HEX_LENGTH: dict[str, int] = {"sha1": 40, "sha256": 64}
MIN_STORED_SALT_HEX = 12
_HEX = re.compile(r"^[0-9a-fA-F]+$")


@dataclass(frozen=True)
class PasswordRecord:
    """A salted password digest in Jupyter's `algorithm:salt:digest` form."""

    algorithm: PasswordAlgorithm
    salt: str
    digest: str

    def __post_init__(self):
        if self.algorithm not in DIGEST_HEX_LENGTH:
            raise UnsupportedAlgorithm(self.algorithm)
        if not _HEX.match(self.salt):
            raise ValueError("salt must be non-empty hex")
        expected = DIGEST_HEX_LENGTH[self.algorithm]
        if len(self.digest) != expected or not _HEX.match(self.digest):
            raise ValueError(f"{self.algorithm} digest must be {expected} hex characters")

    @classmethod
    def parse(cls, text: str) -> PasswordRecord:
        """Parse a stored record. Stored salts must be at least 12 hex characters."""
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ValueError("password record must have the form algorithm:salt:digest")
        algorithm, salt, digest = parts
        if len(salt) < MIN_STORED_SALT_HEX:
            raise ValueError(f"stored salt must be at least {MIN_STORED_SALT_HEX} hex characters")
        return cls(algorithm, salt, digest.lower())  # type: ignore[arg-type]

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.salt}:{self.digest}"


def _digest(password: str, salt: str, algorithm: str) -> str:
    if algorithm not in DIGEST_HEX_LENGTH:
        raise UnsupportedAlgorithm(algorithm)
    h = hashlib.new(algorithm)
    h.update(password.encode("utf-8") + salt.encode("utf-8"))
    return h.hexdigest()


def hash_password(password: str, salt: str, algorithm: str = "sha256") -> PasswordRecord:
    if not salt or not _HEX.match(salt):
        raise ValueError("salt must be non-empty hex")
    return PasswordRecord(algorithm, salt, _digest(password, salt, algorithm))  # type: ignore[arg-type]


def verify_password(record: PasswordRecord, supplied: str) -> bool:
    computed = _digest(supplied, record.salt, record.algorithm)
    return hmac.compare_digest(computed.encode("ascii"), record.digest.lower().encode("ascii"))


SESSION_COOKIE = "notebook_gate_session"


class SessionSigner:
    """Issues and checks the signed, expiring cookie set after a password login."""

    def __init__(self, secret: str, ttl_seconds: float):
        self._signer = TimestampSigner(secret, salt="notebook-gate.session")
        self.ttl_seconds = ttl_seconds

    def issue(self) -> str:
        return self._signer.sign(b"authenticated").decode("ascii")

    def validate(self, token: str | None) -> bool:
        if not token:
            return False
        try:
            self._signer.unsign(token, max_age=self.ttl_seconds)
        except BadSignature:
            # SignatureExpired is a BadSignature too
            return False
        return True


def merge_security_headers(base: SecurityHeaderSet, overrides: Mapping[str, str]) -> SecurityHeaderSet:
    return base.merge(overrides)

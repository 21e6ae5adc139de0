import socket
from pathlib import Path

import httpx
import polars as pl
import pytest
import trustme

from notebook_gate.bench import MEDIAN_ROW
from notebook_gate.config import build_config
from notebook_gate.gateway import create_app, serve
from notebook_gate.mock_kernel import mock_kernel_serve

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def anyio_backend():
    return "asyncio"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def mock_upstream():
    """One mock notebook server for the whole run."""
    with mock_kernel_serve("127.0.0.1:0") as handle:
        yield handle


@pytest.fixture
def free_port() -> int:
    """A port nothing listens on (bound, then released)."""
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def make_config():
    """GatewayConfig factory; anything not given gets a test default."""

    def _make(**overrides):
        data = {
            "listen_address": "127.0.0.1:0",
            "upstream": "http://127.0.0.1:1",
            "notebook_path": str(FIXTURES / "one_cell.ipynb"),
            **overrides,
        }
        return build_config(data)

    return _make


@pytest.fixture
def asgi_client():
    """httpx client driving a gateway app in-process from a chosen client IP."""
    def _client(cfg, client_ip: str = "127.0.0.1") -> httpx.AsyncClient:
        transport = httpx.ASGITransport(app=create_app(cfg), client=(client_ip, 40123))
        return httpx.AsyncClient(transport=transport, base_url="http://testserver")

    return _client


@pytest.fixture
def gateway(make_config, mock_upstream):
    """Start real gateways in front of the mock upstream; all are shut down afterwards."""
    handles = []

    def _serve(**overrides):
        overrides.setdefault("upstream", mock_upstream.url)
        handle = serve(make_config(**overrides))
        handles.append(handle)
        return handle

    yield _serve
    for handle in handles:
        handle.shutdown()


@pytest.fixture(scope="session")
def tls_material(tmp_path_factory):
    """A throwaway CA and a localhost certificate it signed."""
    ca = trustme.CA()
    cert = ca.issue_cert("127.0.0.1", "localhost")
    d = tmp_path_factory.mktemp("tls")
    cert_path = d / "cert.pem"
    key_path = d / "key.pem"
    ca_path = d / "ca.pem"
    cert_path.write_bytes(b"".join(blob.bytes() for blob in cert.cert_chain_pems))
    cert.private_key_pem.write_to_path(str(key_path))
    ca.cert_pem.write_to_path(str(ca_path))
    return {"cert": cert_path, "key": key_path, "ca": ca_path, "ca_obj": ca}


@pytest.fixture
def make_results():
    """Bench results frame with one row per level and the same figures on every row."""

    def _make(levels, p50=10.0, p99=20.0, rps=100.0, cpu=50.0, rss=100 * 1024 * 1024, repetition=MEDIAN_ROW):
        n = len(levels)
        return pl.DataFrame({
            "connections": levels,
            "repetition": [repetition] * n,
            "completed": [1000] * n,
            "failed": [0] * n,
            "p50_ms": [p50] * n,
            "p90_ms": [p50 * 1.5] * n,
            "p99_ms": [p99] * n,
            "max_ms": [p99 * 2] * n,
            "throughput_rps": [rps] * n,
            "mean_cpu_pct": [cpu] * n,
            "peak_rss_bytes": [rss] * n,
        })

    return _make

import json
import shutil

import pytest

from notebook_gate.config import build_config, load_config, split_host_port
from notebook_gate.errors import ConfigNotFound, ConfigParseError, ConfigValidationError
from notebook_gate.security import PasswordRecord

STORED_PASSWORD = "sha256:0123456789ab:d407ad901895723f32d31e6515f5284beb4c01e70e56720d65099da4771f3193"


@pytest.fixture
def base(fixtures_dir):
    return {
        "listen_address": "127.0.0.1:9000",
        "upstream": "http://127.0.0.1:8888",
        "notebook_path": str(fixtures_dir / "one_cell.ipynb"),
    }


def _invalid(data) -> ConfigValidationError:
    with pytest.raises(ConfigValidationError) as exc:
        build_config(data)
    return exc.value


# --- Defaults ---

def test_minimal_config_defaults(base):
    cfg = build_config(base)
    assert cfg.advertised_authority == "127.0.0.1:9000"
    assert not cfg.tls.enabled
    assert cfg.public_scheme == "http"
    assert cfg.password is None
    assert not cfg.read_only
    assert cfg.access.whitelist == [] and cfg.access.blacklist == []
    assert len(cfg.security_headers) == 5
    assert cfg.listen_host == "127.0.0.1"
    assert cfg.listen_port == 9000


def test_upstream_trailing_slash_dropped(base):
    assert build_config({**base, "upstream": "http://127.0.0.1:8888/"}).upstream == "http://127.0.0.1:8888"


def test_internal_authorities(base):
    cfg = build_config({**base, "listen_address": "0.0.0.0:9000", "advertised_authority": "nb.example.org"})
    assert cfg.upstream_authority == "127.0.0.1:8888"
    assert cfg.internal_authorities == ["127.0.0.1:8888", "0.0.0.0:9000"]


def test_header_override_from_config(base):
    cfg = build_config({**base, "headers": {"X-Frame-Options": "DENY"}})
    assert cfg.security_headers["x-frame-options"] == "DENY"
    assert len(cfg.security_headers) == 5


def test_password_record_parsed(base):
    cfg = build_config({**base, "password": STORED_PASSWORD})
    assert isinstance(cfg.password, PasswordRecord)
    assert str(cfg.password) == STORED_PASSWORD


# --- Rejections ---

def test_unknown_top_level_key(base):
    err = _invalid({**base, "whitlist": ["10.0.0.0/8"]})
    assert err.key == "whitlist"
    assert err.reason == "unknown key"


def test_unknown_nested_key(base):
    err = _invalid({**base, "access": {"whitlist": ["10.0.0.0/8"]}})
    assert err.key == "access.whitlist"


def test_bad_cidr_names_its_index(base):
    err = _invalid({**base, "access": {"blacklist": ["300.1.1.1/24"]}})
    assert err.key == "access.blacklist[0]"


@pytest.mark.parametrize("upstream", ["ftp://127.0.0.1", "not a url", "/relative"])
def test_upstream_must_be_absolute_http(base, upstream):
    assert _invalid({**base, "upstream": upstream}).key == "upstream"


@pytest.mark.parametrize("listen", ["127.0.0.1", "127.0.0.1:notaport", ":9000"])
def test_listen_address_needs_host_and_port(base, listen):
    assert _invalid({**base, "listen_address": listen}).key == "listen_address"


def test_advertised_authority_has_no_path(base):
    assert _invalid({**base, "advertised_authority": "example.org/lab"}).key == "advertised_authority"


def test_missing_notebook(base, tmp_path):
    assert _invalid({**base, "notebook_path": str(tmp_path / "missing.ipynb")}).key == "notebook_path"


def test_missing_required_key(base):
    data = dict(base)
    del data["upstream"]
    assert _invalid(data).key == "upstream"


def test_header_injection_rejected(base):
    assert _invalid({**base, "headers": {"X-Frame-Options": "DENY\r\nSet-Cookie: a=b"}}).key == "headers"


def test_header_value_must_be_latin1(base):
    assert _invalid({**base, "headers": {"X-Note": "caf\u20ac"}}).key == "headers"


def test_short_salt_rejected(base):
    err = _invalid({**base, "password": "sha256:1234:" + "0" * 64})
    assert err.key == "password"
    assert "12" in err.reason


@pytest.mark.parametrize("field", ["proxy_timeout", "max_body_bytes", "session_ttl"])
def test_limits_must_be_positive(base, field):
    assert _invalid({**base, field: 0}).key == field


def test_tls_enabled_without_material(base):
    err = _invalid({**base, "tls": {"enabled": True}})
    assert err.key == "tls"
    assert "certificate_path" in err.reason


def test_tls_material_must_exist(base, tmp_path):
    err = _invalid({**base, "tls": {
        "enabled": True,
        "certificate_path": str(tmp_path / "cert.pem"),
        "private_key_path": str(tmp_path / "key.pem"),
    }})
    assert err.key == "tls"
    assert "not a readable file" in err.reason


def test_tls_with_material(base, tls_material):
    cfg = build_config({**base, "tls": {
        "enabled": True,
        "certificate_path": str(tls_material["cert"]),
        "private_key_path": str(tls_material["key"]),
    }})
    assert cfg.public_scheme == "https"


# --- Loading from disk ---

def test_load_resolves_relative_paths(tmp_path, fixtures_dir):
    shutil.copy(fixtures_dir / "one_cell.ipynb", tmp_path / "nb.ipynb")
    path = tmp_path / "gateway.json"
    path.write_text(json.dumps({
        "listen_address": "127.0.0.1:9000",
        "upstream": "http://127.0.0.1:8888",
        "notebook_path": "nb.ipynb",
    }))
    cfg = load_config(path)
    assert cfg.notebook_path == (tmp_path / "nb.ipynb").resolve()


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigNotFound):
        load_config(tmp_path / "gateway.json")


def test_load_reports_parse_line(tmp_path):
    path = tmp_path / "gateway.json"
    path.write_text('{\n  "listen_address": "127.0.0.1:9000",\n  oops\n}\n')
    with pytest.raises(ConfigParseError) as exc:
        load_config(path)
    assert exc.value.line == 3


def test_load_rejects_non_utf8(tmp_path):
    path = tmp_path / "gateway.json"
    path.write_bytes(b'{\n  "default_title": "caf\xe9"\n}\n')
    with pytest.raises(ConfigParseError) as exc:
        load_config(path)
    assert exc.value.line == 2


def test_load_rejects_non_object(tmp_path):
    path = tmp_path / "gateway.json"
    path.write_text("[]")
    with pytest.raises(ConfigValidationError):
        load_config(path)


def test_split_host_port():
    assert split_host_port("127.0.0.1:8080") == ("127.0.0.1", 8080)
    assert split_host_port("[::1]:8080") == ("::1", 8080)
    with pytest.raises(ValueError):
        split_host_port("localhost")

import json

import pytest

from notebook_gate.errors import NotJson, SchemaViolation
from notebook_gate.notebook import (
    NotebookDocument,
    apply_read_only,
    embed_url,
    load_notebook,
    parse_notebook,
    render_embed_page,
    render_login_page,
    serialize_notebook,
)


# --- Parsing ---

def test_minimal_notebook_has_no_cells():
    doc = parse_notebook(b'{"nbformat":4,"nbformat_minor":5,"metadata":{},"cells":[]}')
    assert doc.cells == []
    assert doc.nbformat == 4


def test_one_cell_fixture(fixtures_dir):
    doc = load_notebook(fixtures_dir / "one_cell.ipynb")
    assert len(doc.cells) == 1
    assert doc.cells[0].cell_type == "code"
    assert doc.cells[0].source == "1+1"


@pytest.mark.parametrize("name", ["one_cell.ipynb", "three_cells.ipynb"])
def test_canonical_fixture_round_trips_byte_for_byte(fixtures_dir, name):
    raw = (fixtures_dir / name).read_bytes()
    assert serialize_notebook(parse_notebook(raw)) == raw


def test_round_trip_is_structurally_equal(fixtures_dir):
    doc = load_notebook(fixtures_dir / "three_cells.ipynb")
    again = parse_notebook(serialize_notebook(doc))
    assert again == doc
    assert [c.cell_type for c in again.cells] == ["markdown", "code", "raw"]


def test_unknown_metadata_is_preserved(fixtures_dir):
    doc = load_notebook(fixtures_dir / "three_cells.ipynb")
    assert doc.cells[1].metadata["jupyter"] == {"source_hidden": False}
    assert doc.metadata["kernelspec"]["name"] == "python3"
    assert json.loads(serialize_notebook(doc))["cells"][0]["id"] == "intro"


def test_list_source_keeps_its_shape(fixtures_dir):
    doc = load_notebook(fixtures_dir / "three_cells.ipynb")
    assert doc.cells[0].source == ["# Arithmetic\n", "A tiny notebook."]
    assert doc.cells[0].text == "# Arithmetic\nA tiny notebook."


def test_missing_cell_metadata_is_empty():
    doc = parse_notebook('{"nbformat":4,"cells":[{"cell_type":"raw","source":"x"}]}')
    assert doc.cells[0].metadata == {}


def test_not_json():
    with pytest.raises(NotJson):
        parse_notebook(b"{nope")


def test_not_utf8():
    with pytest.raises(NotJson):
        parse_notebook(b"\xff\xfe{}")


def test_version_3_rejected_at_nbformat():
    with pytest.raises(SchemaViolation) as exc:
        parse_notebook('{"nbformat":3,"nbformat_minor":0,"metadata":{},"cells":[]}')
    assert exc.value.path == "nbformat"


def test_missing_cells():
    with pytest.raises(SchemaViolation) as exc:
        parse_notebook('{"nbformat":4,"metadata":{}}')
    assert exc.value.path == "cells"


def test_unknown_cell_type_names_its_path():
    with pytest.raises(SchemaViolation) as exc:
        parse_notebook('{"nbformat":4,"cells":[{"cell_type":"code"},{"cell_type":"widget"}]}')
    assert exc.value.path == "cells[1].cell_type"


@pytest.mark.parametrize("field,value", [("outputs", []), ("execution_count", 1)])
def test_markdown_cells_carry_no_execution_state(field, value):
    cell = {"cell_type": "markdown", "source": "# hi", field: value}
    with pytest.raises(SchemaViolation) as exc:
        parse_notebook(json.dumps({"nbformat": 4, "cells": [cell]}))
    assert exc.value.path == f"cells[0].{field}"


def test_top_level_array_is_a_schema_violation():
    with pytest.raises(SchemaViolation):
        parse_notebook("[]")


# --- Read-only transform ---

def test_read_only_on_empty_notebook():
    doc = parse_notebook('{"nbformat":4,"nbformat_minor":5,"metadata":{},"cells":[]}')
    assert apply_read_only(doc) == doc


def test_read_only_overrides_editable():
    doc = parse_notebook('{"nbformat":4,"cells":[{"cell_type":"code","metadata":{"editable":true}}]}')
    assert apply_read_only(doc).cells[0].metadata == {"editable": False, "deletable": False}


def test_read_only_is_idempotent(fixtures_dir):
    doc = load_notebook(fixtures_dir / "three_cells.ipynb")
    once = apply_read_only(doc)
    assert apply_read_only(once) == once


def test_read_only_touches_only_the_two_keys(fixtures_dir):
    doc = load_notebook(fixtures_dir / "three_cells.ipynb")
    locked = apply_read_only(doc)
    before = json.loads(serialize_notebook(doc))
    after = json.loads(serialize_notebook(locked))
    for cell_before, cell_after in zip(before["cells"], after["cells"]):
        meta_after = dict(cell_after.pop("metadata"))
        meta_before = cell_before.pop("metadata")
        assert cell_after == cell_before
        assert meta_after.pop("editable") is False
        assert meta_after.pop("deletable") is False
        meta_before.pop("editable", None)
        assert meta_after == meta_before
    assert after["metadata"] == before["metadata"]


def test_read_only_does_not_mutate_input(fixtures_dir):
    doc = load_notebook(fixtures_dir / "one_cell.ipynb")
    apply_read_only(doc)
    assert doc.cells[0].metadata == {}


# --- Embed page ---

class TestEmbedPage:

    def test_title_and_advertised_authority(self, make_config, fixtures_dir):
        cfg = make_config(advertised_authority="example.org:443")
        page = render_embed_page(load_notebook(fixtures_dir / "one_cell.ipynb"), cfg)
        assert "Demo" in page
        assert "http://example.org:443/notebooks/one_cell.ipynb" in page

    def test_listen_port_never_leaks(self, make_config, fixtures_dir):
        cfg = make_config(listen_address="127.0.0.1:9000", advertised_authority="example.org:443")
        page = render_embed_page(load_notebook(fixtures_dir / "three_cells.ipynb"), cfg)
        assert ":9000" not in page

    def test_cell_text_naming_internal_authorities_is_spoofed(self, make_config):
        cfg = make_config(
            listen_address="127.0.0.1:9000",
            upstream="http://127.0.0.1:8888",
            advertised_authority="nb.example.org:443",
        )
        doc = parse_notebook(json.dumps({
            "nbformat": 4,
            "nbformat_minor": 5,
            "metadata": {},
            "cells": [
                {"cell_type": "markdown", "metadata": {}, "source": "open http://127.0.0.1:9000/tree"},
                {"cell_type": "markdown", "metadata": {}, "source": "kernel at 127.0.0.1:8888"},
            ],
        }))
        page = render_embed_page(doc, cfg)
        assert ":9000" not in page
        assert ":8888" not in page
        assert "open http://nb.example.org:443/tree" in page

    def test_default_title(self, make_config, fixtures_dir):
        cfg = make_config(default_title="Hosted Notebook")
        page = render_embed_page(load_notebook(fixtures_dir / "untitled.ipynb"), cfg)
        assert "<title>Hosted Notebook</title>" in page

    def test_empty_notebook_is_a_complete_page(self, make_config, fixtures_dir):
        page = render_embed_page(load_notebook(fixtures_dir / "untitled.ipynb"), make_config())
        assert page.startswith("<!DOCTYPE html>")
        assert page.rstrip().endswith("</html>")
        assert "gate-cell" not in page

    def test_no_inline_handlers_or_scripts(self, make_config, fixtures_dir):
        page = render_embed_page(load_notebook(fixtures_dir / "three_cells.ipynb"), make_config())
        lowered = page.lower()
        assert "<script" not in lowered
        for handler in ("onclick=", "onload=", "onerror=", "onmouseover="):
            assert handler not in lowered

    def test_cell_source_is_escaped(self, make_config, fixtures_dir):
        page = render_embed_page(load_notebook(fixtures_dir / "three_cells.ipynb"), make_config())
        assert "&lt;b&gt;raw&lt;/b&gt;" in page
        assert "<b>raw</b>" not in page

    def test_tls_and_custom_url_path(self, make_config, tls_material):
        cfg = make_config(
            advertised_authority="nb.example.org",
            notebook_url_path="/lab/tree/demo.ipynb",
            tls={"enabled": True, "certificate_path": str(tls_material["cert"]), "private_key_path": str(tls_material["key"])},
        )
        assert embed_url(cfg) == "https://nb.example.org/lab/tree/demo.ipynb"

    def test_read_only_badge(self, make_config, fixtures_dir):
        page = render_embed_page(load_notebook(fixtures_dir / "one_cell.ipynb"), make_config(read_only=True))
        assert "read only" in page


def test_login_page_escapes_next():
    page = render_login_page('/tree?x="><script>', error="Incorrect password.")
    assert "<script>" not in page
    assert "Incorrect password." in page
    assert 'action="/auth"' in page


def test_document_is_immutable(fixtures_dir):
    doc = load_notebook(fixtures_dir / "one_cell.ipynb")
    with pytest.raises(Exception):
        doc.nbformat = 5
    assert isinstance(doc, NotebookDocument)

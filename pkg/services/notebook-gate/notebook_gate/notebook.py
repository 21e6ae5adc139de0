"""
Notebook model: parse, validate and transform nbformat-4 documents, and
render the page that embeds a notebook.

Only the parts of the schema the gateway relies on are validated (the
version gate, the cells list and the cell_type enum). Everything else,
including output records and unknown metadata keys, is carried through
untouched so a parse -> serialize round trip is lossless.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal
from urllib.parse import quote

from jinja2 import Environment, PackageLoader, select_autoescape
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from notebook_gate.errors import NotJson, SchemaViolation, loc_to_path
from notebook_gate.security import spoof_rewrite_all

if TYPE_CHECKING:
    from notebook_gate.config import GatewayConfig

logger = logging.getLogger(__name__)

SUPPORTED_NBFORMAT = 4

_templates = Environment(
    loader=PackageLoader("notebook_gate", "templates"),
    autoescape=select_autoescape(["html"]),
    trim_blocks=True,
    lstrip_blocks=True,
)


class Cell(BaseModel):
    model_config = ConfigDict(extra="allow", frozen=True)

    cell_type: Literal["code", "markdown", "raw"]
    source: str | list[str] = ""
    metadata: dict[str, Any] = Field(default_factory=dict)
    outputs: list[Any] | None = None
    execution_count: int | None = None

    @field_validator("metadata", mode="before")
    @classmethod
    def missing_metadata_is_empty(cls, v: Any) -> Any:
        return {} if v is None else v

    @property
    def text(self) -> str:
        """Cell source as one string, whichever shape the file used."""
        return self.source if isinstance(self.source, str) else "".join(self.source)


class NotebookDocument(BaseModel):
    model_config = ConfigDict(extra="allow", frozen=True)

    nbformat: int
    nbformat_minor: int = 0
    metadata: dict[str, Any] = Field(default_factory=dict)
    cells: list[Cell]

    @field_validator("nbformat")
    @classmethod
    def only_version_4(cls, v: int) -> int:
        if v != SUPPORTED_NBFORMAT:
            raise ValueError(f"only nbformat {SUPPORTED_NBFORMAT} is supported, got {v}")
        return v

    @property
    def title(self) -> str | None:
        title = self.metadata.get("title")
        return title if isinstance(title, str) and title.strip() else None


def parse_notebook(raw: bytes | str) -> NotebookDocument:
    """Parse nbformat-4 JSON into a NotebookDocument.

    Raises NotJson for undecodable input and SchemaViolation naming the
    offending path for structurally invalid notebooks.
    """
    try:
        data = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise NotJson(str(e)) from e

    if not isinstance(data, dict):
        raise SchemaViolation("<root>", "notebook must be a JSON object")

    try:
        doc = NotebookDocument.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaViolation(loc_to_path(first["loc"]), first["msg"]) from e

    for i, cell in enumerate(doc.cells):
        if cell.cell_type == "code":
            continue
        # markdown and raw cells never carry execution state
        for field in ("outputs", "execution_count"):
            if field in cell.model_fields_set and getattr(cell, field) is not None:
                raise SchemaViolation(f"cells[{i}].{field}", f"{cell.cell_type} cells carry no {field}")

    return doc


def load_notebook(path: str | Path) -> NotebookDocument:
    return parse_notebook(Path(path).read_bytes())


def serialize_notebook(doc: NotebookDocument) -> bytes:
    """Canonical nbformat JSON: one-space indent, sorted keys, trailing newline."""
    data = doc.model_dump(mode="json", exclude_unset=True)
    return (json.dumps(data, indent=1, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


def apply_read_only(doc: NotebookDocument) -> NotebookDocument:
    """Mark every cell non-editable and non-deletable. Idempotent."""
    cells = [
        cell.model_copy(update={"metadata": {**cell.metadata, "editable": False, "deletable": False}})
        for cell in doc.cells
    ]
    return doc.model_copy(update={"cells": cells})


def embed_url(cfg: GatewayConfig) -> str:
    """Frame source for the notebook, always on the advertised authority."""
    path = cfg.notebook_url_path or f"/notebooks/{quote(cfg.notebook_path.name)}"
    return f"{cfg.public_scheme}://{cfg.advertised_authority}{path}"


def render_embed_page(doc: NotebookDocument, cfg: GatewayConfig) -> str:
    """Render the HTML page that embeds the notebook.

    The page frames the proxied notebook UI and lists an escaped preview of
    each cell. It carries no inline script or event handlers so it works
    under the default Content-Security-Policy. Cell text that names an
    internal authority is spoofed like any proxied body.
    """
    template = _templates.get_template("embed.html")
    page = template.render(
        title=doc.title or cfg.default_title,
        embed_url=embed_url(cfg),
        cells=[{"cell_type": c.cell_type, "text": c.text} for c in doc.cells],
        read_only=cfg.read_only,
    )
    return spoof_rewrite_all(page, cfg.internal_authorities, cfg.advertised_authority)


def render_login_page(next_path: str, error: str | None = None) -> str:
    return _templates.get_template("login.html").render(next_path=next_path, error=error)

"""Exceptions raised across notebook-gate.

Everything derives from GateError so the CLI can map domain failures to
exit codes without catching unrelated exceptions.
"""


class GateError(Exception):
    """Base class for all notebook-gate errors."""


# --- Documents and messages ---

class NotJson(GateError, ValueError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"not well-formed JSON: {reason}")


class SchemaViolation(GateError, ValueError):
    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"schema violation at '{path}': {reason}")


class MissingHeaderField(GateError, ValueError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"message header is missing '{name}'")


# --- Security ---

class UnsupportedAlgorithm(GateError, ValueError):
    def __init__(self, algorithm: str):
        self.algorithm = algorithm
        super().__init__(f"unsupported password algorithm '{algorithm}'")


# --- Configuration and startup ---

class ConfigNotFound(GateError, FileNotFoundError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"config file not found: {path}")


class ConfigParseError(GateError, ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"config parse error at line {line}: {reason}")


class ConfigValidationError(GateError, ValueError):
    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason
        super().__init__(f"invalid config at '{key}': {reason}")


class StartupError(GateError, RuntimeError):
    pass


# --- Proxy ---

class BodyTooLarge(GateError):
    def __init__(self, limit: int):
        self.limit = limit
        super().__init__(f"request body exceeds {limit} bytes")


# --- Bench ---

class TargetUnreachable(GateError, ConnectionError):
    def __init__(self, target: str, reason: str):
        self.target = target
        self.reason = reason
        super().__init__(f"target {target} unreachable: {reason}")


class ProcessVanished(GateError, ProcessLookupError):
    def __init__(self, pid: int):
        self.pid = pid
        super().__init__(f"process {pid} does not exist")


class EmptySamples(GateError, ValueError):
    def __init__(self):
        super().__init__("percentile of an empty sample set")


class MismatchedSweep(GateError, ValueError):
    def __init__(self, left: list[int], right: list[int]):
        self.left = left
        self.right = right
        super().__init__(f"sweeps cover different connection levels: {left} vs {right}")


def loc_to_path(loc: tuple) -> str:
    """Render a pydantic error location as `cells[0].cell_type`."""
    path = ""
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path += f".{part}" if path else str(part)
    return path or "<root>"

"""SUT database: placeholder bindings per SUT plus the shared pattern library."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

from .frames import FrameError, normalize_frame
from .tokens import is_placeholder, is_variable, references

SYMBOL_KINDS = ("can_frame", "bt_interface", "host", "port", "payload", "string")
DEFAULT_CAN_WINDOW_S = 10


class CatalogError(Exception):
    pass


class FormatError(CatalogError):
    def __init__(self, location: str, message: str):
        self.location = location
        super().__init__(f"{location}: {message}")


class InvariantViolation(CatalogError):
    def __init__(self, record: str, fld: str, message: str):
        self.record = record
        self.field = fld
        super().__init__(f"{record}.{fld}: {message}")


class UnknownSymbol(CatalogError, KeyError):
    def __init__(self, placeholder: str, sut_id: str):
        self.placeholder = placeholder
        self.sut_id = sut_id
        super().__init__(f"placeholder {placeholder} is not defined for SUT {sut_id!r}")

    __str__ = Exception.__str__


class UnknownPattern(CatalogError, KeyError):
    def __init__(self, pattern_key: str):
        self.pattern_key = pattern_key
        super().__init__(f"no tool template for pattern {pattern_key!r}")

    __str__ = Exception.__str__


@dataclass(frozen=True)
class SymbolBinding:
    kind: str
    value: str


@dataclass(frozen=True)
class Extract:
    var: str
    pattern: str
    group: int = 1

    def to_json(self) -> dict[str, Any]:
        return {"var": self.var, "pattern": self.pattern, "group": self.group}


@dataclass(frozen=True)
class ToolTemplate:
    pattern_key: str
    tool: str
    params: tuple[str, ...]
    default_duration_s: float = 0.0
    extract: Extract | None = None


@dataclass(frozen=True)
class SutRecord:
    sut_id: str
    symbols: Mapping[str, SymbolBinding] = field(default_factory=dict)
    tool_overrides: Mapping[str, ToolTemplate] = field(default_factory=dict)


@dataclass(frozen=True)
class Catalog:
    suts: Mapping[str, SutRecord]
    patterns: Mapping[str, ToolTemplate]
    can_window_s: float = DEFAULT_CAN_WINDOW_S

    def sut(self, sut_id: str) -> SutRecord:
        try:
            return self.suts[sut_id]
        except KeyError:
            raise CatalogError(f"unknown SUT {sut_id!r}") from None

    def template(self, sut_id: str, pattern_key: str) -> ToolTemplate:
        record = self.suts.get(sut_id)
        if record is not None and pattern_key in record.tool_overrides:
            return record.tool_overrides[pattern_key]
        try:
            return self.patterns[pattern_key]
        except KeyError:
            raise UnknownPattern(pattern_key) from None


def pattern_key(pattern_name: str, type_: str) -> str:
    return f"{pattern_name}/{type_}"


def resolve_symbol(record: SutRecord, placeholder: str) -> SymbolBinding:
    try:
        return record.symbols[placeholder]
    except KeyError:
        raise UnknownSymbol(placeholder, record.sut_id) from None


def resolve_tool(catalog: Catalog, sut_id: str, pattern_name: str, type_: str) -> ToolTemplate:
    """Per-SUT override first, then the shared library; exact key match."""
    return catalog.template(sut_id, pattern_key(pattern_name, type_))


# ---------------------------------------------------------------------------
# loading


def _binding(sut_id: str, name: str, raw: Any) -> SymbolBinding:
    where = f"suts[{sut_id}].symbols.{name}"
    if not isinstance(raw, dict) or not isinstance(raw.get("kind"), str) \
            or not isinstance(raw.get("value"), str):
        raise FormatError(where, "expected {\"kind\": str, \"value\": str}")
    kind, value = raw["kind"], raw["value"]
    if kind not in SYMBOL_KINDS:
        raise InvariantViolation(f"suts[{sut_id}]", f"symbols.{name}.kind", f"unknown kind {kind!r}")
    if kind == "can_frame":
        try:
            value = normalize_frame(value)
        except FrameError as exc:
            raise InvariantViolation(f"suts[{sut_id}]", f"symbols.{name}.value", str(exc)) from None
    elif kind == "port":
        if not re.fullmatch(r"\d+", value) or not 1 <= int(value) <= 65535:
            raise InvariantViolation(f"suts[{sut_id}]", f"symbols.{name}.value",
                                     f"port {value!r} outside 1-65535")
    return SymbolBinding(kind, value)


def _template(where: str, key: str, raw: Any) -> ToolTemplate:
    if not isinstance(raw, dict):
        raise FormatError(where, "template must be an object")
    tool = raw.get("tool")
    params = raw.get("params", [])
    duration = raw.get("defaultDuration_s", 0)
    if not isinstance(tool, str) or not tool:
        raise FormatError(where, "missing 'tool'")
    if not isinstance(params, list) or not all(isinstance(p, str) for p in params):
        raise FormatError(where, "'params' must be a list of strings")
    if isinstance(duration, bool) or not isinstance(duration, (int, float)):
        raise FormatError(where, "'defaultDuration_s' must be a number")
    if duration < 0:
        raise InvariantViolation(where, "defaultDuration_s", "must be >= 0")
    extract = None
    if raw.get("extract") is not None:
        ex = raw["extract"]
        if not isinstance(ex, dict) or not isinstance(ex.get("var"), str) \
                or not isinstance(ex.get("pattern"), str):
            raise FormatError(where + ".extract", "expected {var, pattern, group?}")
        group = ex.get("group", 1)
        if isinstance(group, bool) or not isinstance(group, int) or group < 1:
            raise InvariantViolation(where, "extract.group", "must be an integer >= 1")
        try:
            rx = re.compile(ex["pattern"])
        except re.error as exc:
            raise InvariantViolation(where, "extract.pattern", f"does not compile: {exc}") from None
        if rx.groups < group:
            raise InvariantViolation(where, "extract.pattern", f"has fewer than {group} groups")
        if not is_variable(ex["var"]):
            raise InvariantViolation(where, "extract.var", f"{ex['var']!r} is not a runtime variable")
        extract = Extract(ex["var"], ex["pattern"], group)
    return ToolTemplate(key, tool, tuple(params), float(duration), extract)


def _check_references(where: str, template: ToolTemplate, known: set[str]) -> None:
    for param in template.params:
        for name in references(param):
            if is_variable(name):
                continue
            if not is_placeholder(name):
                raise InvariantViolation(where, "params", f"${{{name}}} is neither placeholder nor variable")
            if name not in known:
                raise InvariantViolation(where, "params", f"${{{name}}} names no defined placeholder")


def parse_catalog(doc: Any) -> Catalog:
    if not isinstance(doc, dict):
        raise FormatError("$", "catalog must be a JSON object")
    raw_suts = doc.get("suts", [])
    raw_patterns = doc.get("patterns", {})
    if not isinstance(raw_suts, list):
        raise FormatError("$.suts", "must be a list")
    if not isinstance(raw_patterns, dict):
        raise FormatError("$.patterns", "must be an object")

    suts: dict[str, SutRecord] = {}
    for i, raw in enumerate(raw_suts):
        if not isinstance(raw, dict):
            raise FormatError(f"$.suts[{i}]", "must be an object")
        sut_id = raw.get("sutId")
        if not isinstance(sut_id, str) or not sut_id:
            raise InvariantViolation(f"suts[{i}]", "sutId", "must be a non-empty string")
        if sut_id in suts:
            raise InvariantViolation(f"suts[{sut_id}]", "sutId", "duplicate")
        symbols_raw = raw.get("symbols", {})
        if not isinstance(symbols_raw, dict):
            raise FormatError(f"$.suts[{i}].symbols", "must be an object")
        symbols = {}
        for name, b in symbols_raw.items():
            if not is_placeholder(name):
                raise InvariantViolation(f"suts[{sut_id}]", f"symbols.{name}",
                                         "key is not a placeholder name")
            symbols[name] = _binding(sut_id, name, b)
        overrides_raw = raw.get("toolOverrides", {})
        if not isinstance(overrides_raw, dict):
            raise FormatError(f"$.suts[{i}].toolOverrides", "must be an object")
        overrides = {}
        for key, t in overrides_raw.items():
            where = f"suts[{sut_id}].toolOverrides[{key}]"
            template = _template(where, key, t)
            _check_references(where, template, set(symbols))
            overrides[key] = template
        suts[sut_id] = SutRecord(sut_id, MappingProxyType(symbols), MappingProxyType(overrides))

    known = set().union(*(s.symbols for s in suts.values())) if suts else set()
    patterns = {}
    for key, t in raw_patterns.items():
        where = f"patterns[{key}]"
        template = _template(where, key, t)
        _check_references(where, template, known)
        patterns[key] = template

    window = doc.get("canWindow_s", DEFAULT_CAN_WINDOW_S)
    if isinstance(window, bool) or not isinstance(window, (int, float)) or window <= 0:
        raise InvariantViolation("$", "canWindow_s", "must be a positive number")
    return Catalog(MappingProxyType(suts), MappingProxyType(patterns), window)


def load_catalog(path: str | Path) -> Catalog:
    """Load and validate a catalog file. ``OSError`` propagates for I/O failures."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return parse_catalog(doc)


def catalog_to_json(catalog: Catalog) -> dict[str, Any]:
    def template(t: ToolTemplate) -> dict[str, Any]:
        out: dict[str, Any] = {"tool": t.tool, "params": list(t.params),
                               "defaultDuration_s": t.default_duration_s}
        if t.extract:
            out["extract"] = t.extract.to_json()
        return out

    return {
        "suts": [
            {
                "sutId": r.sut_id,
                "symbols": {k: {"kind": b.kind, "value": b.value} for k, b in r.symbols.items()},
                "toolOverrides": {k: template(t) for k, t in r.tool_overrides.items()},
            }
            for r in catalog.suts.values()
        ],
        "patterns": {k: template(t) for k, t in catalog.patterns.items()},
        "canWindow_s": catalog.can_window_s,
    }


def validate_record(record: SutRecord) -> list[str]:
    """Re-check one loaded record's invariants; returns problems, never raises."""
    problems = []
    if not record.sut_id:
        problems.append("empty sutId")
    for name, b in record.symbols.items():
        if not is_placeholder(name):
            problems.append(f"symbol key {name!r} is not a placeholder")
        if b.kind not in SYMBOL_KINDS:
            problems.append(f"{name}: unknown kind {b.kind!r}")
        elif b.kind == "can_frame":
            try:
                if normalize_frame(b.value) != b.value:
                    problems.append(f"{name}: frame not normalized")
            except FrameError as exc:
                problems.append(f"{name}: {exc}")
        elif b.kind == "port" and not (b.value.isdigit() and 1 <= int(b.value) <= 65535):
            problems.append(f"{name}: bad port {b.value!r}")
    for key, t in record.tool_overrides.items():
        try:
            _check_references(key, t, set(record.symbols))
        except InvariantViolation as exc:
            problems.append(str(exc))
    return problems

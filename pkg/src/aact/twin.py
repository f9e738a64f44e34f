"""Cyber digital twin: data model, signature BOM scan, vulnerability and policy checks."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

log = logging.getLogger(__name__)

INTERFACE_KINDS = ("can", "bt", "gps", "eth", "other")
NODE_KINDS = ("entry", "block", "sink")
MIN_PATTERN_LEN = 8
_VERSION_RE = re.compile(r"(\d+(?:\.\d+)*)([a-z]?)")


class TwinError(Exception):
    pass


class FormatError(TwinError):
    def __init__(self, location: str, message: str):
        self.location = location
        super().__init__(f"{location}: {message}")


class InvariantViolation(TwinError):
    pass


class VersionParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# versions


def parse_version(text: str) -> tuple[tuple[int, ...], str]:
    """``1.0.1f`` -> ``((1, 0, 1), 'f')``. Numeric fields compare numerically,
    the optional letter suffix lexicographically (no suffix sorts first)."""
    m = _VERSION_RE.fullmatch(text.strip())
    if not m:
        raise VersionParseError(f"unparseable version {text!r}")
    return tuple(int(p) for p in m.group(1).split(".")), m.group(2)


def compare_versions(a: str, b: str) -> int:
    ka, kb = parse_version(a), parse_version(b)
    return (ka > kb) - (ka < kb)


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class BomEntry:
    name: str
    version: str
    offset: int | None = None
    signature_id: str | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "version": self.version}
        if self.offset is not None:
            out["offset"] = self.offset
        if self.signature_id is not None:
            out["signatureId"] = self.signature_id
        return out


@dataclass(frozen=True)
class InterfaceDecl:
    kind: str
    id: str


@dataclass(frozen=True)
class FlowNode:
    id: str
    kind: str = "block"
    component: str | None = None


@dataclass(frozen=True)
class FlowEdge:
    src: str
    dst: str
    trigger: str
    effect: str | None = None


@dataclass
class FlowGraph:
    nodes: list[FlowNode] = field(default_factory=list)
    edges: list[FlowEdge] = field(default_factory=list)

    def node(self, node_id: str) -> FlowNode | None:
        return next((n for n in self.nodes if n.id == node_id), None)

    def to_json(self) -> dict[str, Any]:
        return {
            "nodes": [{"id": n.id, "kind": n.kind, "component": n.component} for n in self.nodes],
            "edges": [{"from": e.src, "to": e.dst, "trigger": e.trigger, "effect": e.effect}
                      for e in self.edges],
        }


@dataclass
class CyberDigitalTwin:
    twin_id: str
    bom: list[BomEntry] = field(default_factory=list)
    interfaces: list[InterfaceDecl] = field(default_factory=list)
    os: dict[str, Any] = field(default_factory=lambda: {"name": "", "settings": {}})
    kernel_config: dict[str, Any] = field(default_factory=dict)
    security_config: dict[str, Any] = field(default_factory=dict)
    memory_map: list[Any] | None = None
    credentials: list[dict[str, str]] = field(default_factory=list)
    firewall_rules: list[str] = field(default_factory=list)
    frameworks: list[Any] = field(default_factory=list)
    apis: list[Any] = field(default_factory=list)
    app_config: dict[str, Any] = field(default_factory=dict)
    crypto_mechanisms: list[Any] = field(default_factory=list)
    crypto_keys: list[Any] = field(default_factory=list)
    flow_graph: FlowGraph = field(default_factory=FlowGraph)
    conflicts: list[dict[str, str]] = field(default_factory=list)

    def bom_entry(self, name: str) -> BomEntry | None:
        return next((b for b in self.bom if b.name == name), None)

    def interface_kinds(self) -> set[str]:
        return {i.kind for i in self.interfaces}

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"twinId": self.twin_id}
        for f in fields(self):
            if f.name == "twin_id":
                continue
            key = _CAMEL[f.name]
            value = getattr(self, f.name)
            if f.name == "bom":
                value = [b.to_json() for b in value]
            elif f.name == "interfaces":
                value = [{"kind": i.kind, "id": i.id} for i in value]
            elif f.name == "flow_graph":
                value = value.to_json()
            elif f.name == "conflicts" and not value:
                continue
            doc[key] = value
        return doc


_CAMEL = {
    "bom": "bom", "interfaces": "interfaces", "os": "os", "kernel_config": "kernelConfig",
    "security_config": "securityConfig", "memory_map": "memoryMap", "credentials": "credentials",
    "firewall_rules": "firewallRules", "frameworks": "frameworks", "apis": "apis",
    "app_config": "appConfig", "crypto_mechanisms": "cryptoMechanisms",
    "crypto_keys": "cryptoKeys", "flow_graph": "flowGraph", "conflicts": "conflicts",
}


def _expect(value: Any, typ: type | tuple, where: str) -> Any:
    if not isinstance(value, typ) or isinstance(value, bool) and typ is not bool:
        names = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise FormatError(where, f"expected {names}")
    return value


def _bom_entry(raw: Any, where: str) -> BomEntry:
    _expect(raw, dict, where)
    offset = raw.get("offset")
    if offset is not None:
        _expect(offset, int, where + ".offset")
    return BomEntry(_expect(raw.get("name"), str, where + ".name"),
                    _expect(raw.get("version"), str, where + ".version"),
                    offset, raw.get("signatureId"))


def twin_from_json(doc: Any) -> CyberDigitalTwin:
    """Build a twin from its JSON document; structural problems raise FormatError."""
    _expect(doc, dict, "$")
    twin = CyberDigitalTwin(_expect(doc.get("twinId", ""), str, "$.twinId"))
    twin.bom = [_bom_entry(b, f"$.bom[{i}]") for i, b in enumerate(_expect(doc.get("bom", []), list, "$.bom"))]
    for i, raw in enumerate(_expect(doc.get("interfaces", []), list, "$.interfaces")):
        _expect(raw, dict, f"$.interfaces[{i}]")
        twin.interfaces.append(InterfaceDecl(_expect(raw.get("kind"), str, f"$.interfaces[{i}].kind"),
                                             _expect(raw.get("id"), str, f"$.interfaces[{i}].id")))
    os_doc = _expect(doc.get("os", {"name": "", "settings": {}}), dict, "$.os")
    twin.os = {"name": os_doc.get("name", ""), "settings": dict(os_doc.get("settings", {}))}
    for attr, typ in (("kernel_config", dict), ("security_config", dict), ("credentials", list),
                      ("firewall_rules", list), ("frameworks", list), ("apis", list),
                      ("app_config", dict), ("crypto_mechanisms", list), ("crypto_keys", list),
                      ("conflicts", list)):
        key = _CAMEL[attr]
        if key in doc:
            setattr(twin, attr, _expect(doc[key], typ, f"$.{key}"))
    if doc.get("memoryMap") is not None:
        twin.memory_map = _expect(doc["memoryMap"], list, "$.memoryMap")
    for i, cred in enumerate(twin.credentials):
        _expect(cred, dict, f"$.credentials[{i}]")
    graph = _expect(doc.get("flowGraph", {}), dict, "$.flowGraph")
    for i, raw in enumerate(_expect(graph.get("nodes", []), list, "$.flowGraph.nodes")):
        where = f"$.flowGraph.nodes[{i}]"
        _expect(raw, dict, where)
        twin.flow_graph.nodes.append(FlowNode(_expect(raw.get("id"), str, where + ".id"),
                                              _expect(raw.get("kind", "block"), str, where + ".kind"),
                                              raw.get("component")))
    for i, raw in enumerate(_expect(graph.get("edges", []), list, "$.flowGraph.edges")):
        where = f"$.flowGraph.edges[{i}]"
        _expect(raw, dict, where)
        effect = raw.get("effect")
        if effect is not None:
            _expect(effect, str, where + ".effect")
        twin.flow_graph.edges.append(FlowEdge(_expect(raw.get("from"), str, where + ".from"),
                                              _expect(raw.get("to"), str, where + ".to"),
                                              _expect(raw.get("trigger"), str, where + ".trigger"),
                                              effect))
    return twin


def load_twin(path: str | Path) -> CyberDigitalTwin:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return twin_from_json(doc)


def twin_problems(twin: CyberDigitalTwin, *, require_entry_interfaces: bool = True) -> list[str]:
    """All invariant violations of ``twin`` (empty when consistent)."""
    problems = []
    seen = set()
    for b in twin.bom:
        if (b.name, b.version) in seen:
            problems.append(f"bom entry {b.name} {b.version} duplicated")
        seen.add((b.name, b.version))
        if b.offset is not None and b.offset < 0:
            problems.append(f"bom entry {b.name} has negative offset")
    ids = set()
    for itf in twin.interfaces:
        if itf.kind not in INTERFACE_KINDS:
            problems.append(f"interface {itf.id} has unknown kind {itf.kind!r}")
        if itf.id in ids:
            problems.append(f"interface id {itf.id!r} duplicated")
        ids.add(itf.id)
    names = {b.name for b in twin.bom}
    node_ids = set()
    graph = twin.flow_graph
    for n in graph.nodes:
        if n.id in node_ids:
            problems.append(f"flow node {n.id!r} duplicated")
        node_ids.add(n.id)
        if n.kind not in NODE_KINDS:
            problems.append(f"flow node {n.id!r} has unknown kind {n.kind!r}")
        if n.component is not None and n.component != "external" and n.component not in names:
            problems.append(f"flow node {n.id!r} names component {n.component!r} absent from the BOM")
    for e in graph.edges:
        for end in (e.src, e.dst):
            if end not in node_ids:
                problems.append(f"flow edge {e.src}->{e.dst} references missing node {end!r}")
    if require_entry_interfaces:
        kinds = twin.interface_kinds()
        for n in graph.nodes:
            if n.kind != "entry":
                continue
            if not any(e.src == n.id and e.trigger.split(".", 1)[0] in kinds for e in graph.edges):
                problems.append(f"entry node {n.id!r} has no edge triggered by a declared interface")
    return problems


# ---------------------------------------------------------------------------
# signature scanning


@dataclass(frozen=True)
class Signature:
    signature_id: str
    component_name: str
    version: str
    pattern: bytes

    def __post_init__(self) -> None:
        if len(self.pattern) < MIN_PATTERN_LEN:
            raise InvariantViolation(
                f"signature {self.signature_id}: pattern shorter than {MIN_PATTERN_LEN} bytes")


def load_signatures(path: str | Path) -> list[Signature]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return signatures_from_json(doc)


def signatures_from_json(doc: Any) -> list[Signature]:
    _expect(doc, dict, "$")
    sigs = []
    for i, raw in enumerate(_expect(doc.get("signatures", []), list, "$.signatures")):
        where = f"$.signatures[{i}]"
        _expect(raw, dict, where)
        try:
            pattern = bytes.fromhex(_expect(raw.get("patternHex"), str, where + ".patternHex"))
        except ValueError:
            raise FormatError(where + ".patternHex", "not hexadecimal") from None
        sigs.append(Signature(_expect(raw.get("signatureId"), str, where + ".signatureId"),
                              _expect(raw.get("componentName"), str, where + ".componentName"),
                              _expect(raw.get("version"), str, where + ".version"), pattern))
    return sigs


def find_occurrences(blob: bytes, pattern: bytes, start: int = 0, stop: int | None = None) -> list[int]:
    """Non-overlapping occurrences of ``pattern`` beginning in ``[start, stop)``."""
    stop = len(blob) if stop is None else stop
    hits = []
    pos = blob.find(pattern, start)
    while 0 <= pos < stop:
        hits.append(pos)
        pos = blob.find(pattern, pos + len(pattern))
    return hits


def _collapse(hits: Iterable[tuple[int, Signature]]) -> list[BomEntry]:
    first: dict[tuple[str, str], tuple[int, str]] = {}
    for offset, sig in hits:
        key = (sig.component_name, sig.version)
        cand = (offset, sig.signature_id)
        if key not in first or cand < first[key]:
            first[key] = cand
    entries = [BomEntry(name, version, off, sid) for (name, version), (off, sid) in first.items()]
    entries.sort(key=lambda b: (b.offset, b.signature_id, b.name, b.version))
    return entries


def scan_firmware(blob: bytes, db: Sequence[Signature], *, chunk_size: int | None = None,
                  workers: int = 1) -> list[BomEntry]:
    """Match every signature against ``blob``.

    Duplicate (name, version) matches collapse to the first offset; output is
    in ascending offset order. With ``chunk_size`` the blob is scanned in
    chunks overlapping by (longest pattern - 1) bytes, optionally on a thread
    pool; the result does not depend on the chunking.
    """
    if not db or not blob:
        return []
    if chunk_size is None or chunk_size >= len(blob):
        return _collapse((off, sig) for sig in db for off in find_occurrences(blob, sig.pattern))
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    overlap = max(len(s.pattern) for s in db) - 1

    def scan_chunk(start: int) -> list[tuple[int, Signature]]:
        stop = min(start + chunk_size, len(blob))
        window = blob[start:stop + overlap]
        return [(start + off, sig) for sig in db
                for off in find_occurrences(window, sig.pattern, 0, stop - start)]

    starts = range(0, len(blob), chunk_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(scan_chunk, starts))
    else:
        parts = [scan_chunk(s) for s in starts]
    return _collapse(hit for part in parts for hit in part)


# ---------------------------------------------------------------------------
# vulnerabilities


@dataclass(frozen=True)
class VulnRecord:
    vuln_id: str
    component_name: str
    version_range: tuple[str, str]
    cwe: str
    interface_kind: str

    def __post_init__(self) -> None:
        lo, hi = self.version_range
        if compare_versions(lo, hi) > 0:
            raise InvariantViolation(f"{self.vuln_id}: range lower bound {lo} above {hi}")


@dataclass(frozen=True)
class Finding:
    vuln_id: str
    cwe: str
    bom_entry: BomEntry
    interface_kind: str

    @property
    def component(self) -> str:
        return self.bom_entry.name

    def to_json(self) -> dict[str, Any]:
        return {"vulnId": self.vuln_id, "cwe": self.cwe, "interfaceKind": self.interface_kind,
                "bomEntry": self.bom_entry.to_json()}


def finding_from_json(doc: dict[str, Any]) -> Finding:
    return Finding(doc["vulnId"], doc["cwe"], _bom_entry(doc["bomEntry"], "$.bomEntry"),
                   doc["interfaceKind"])


def vulns_from_json(doc: Any) -> list[VulnRecord]:
    _expect(doc, dict, "$")
    out = []
    for i, raw in enumerate(_expect(doc.get("vulns", []), list, "$.vulns")):
        where = f"$.vulns[{i}]"
        _expect(raw, dict, where)
        rng = _expect(raw.get("range"), list, where + ".range")
        if len(rng) != 2:
            raise FormatError(where + ".range", "expected [lo, hi]")
        kind = _expect(raw.get("interfaceKind"), str, where + ".interfaceKind")
        if kind not in INTERFACE_KINDS:
            raise FormatError(where + ".interfaceKind", f"unknown kind {kind!r}")
        out.append(VulnRecord(raw["vulnId"], raw["componentName"], (rng[0], rng[1]),
                              raw["cwe"], kind))
    return out


def load_vulns(path: str | Path) -> list[VulnRecord]:
    return vulns_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def match_vulnerabilities(bom: Iterable[BomEntry], vuln_db: Iterable[VulnRecord], *,
                          skipped: list[str] | None = None) -> list[Finding]:
    """One finding per (BOM entry, record) with equal name and version in range.

    Unparseable versions are skipped with a warning and appended to ``skipped``.
    """
    vulns = list(vuln_db)
    findings = []
    for entry in bom:
        try:
            parse_version(entry.version)
        except VersionParseError as exc:
            log.warning("skipping %s: %s", entry.name, exc)
            if skipped is not None:
                skipped.append(f"{entry.name} {entry.version}")
            continue
        for v in vulns:
            if v.component_name != entry.name:
                continue
            lo, hi = v.version_range
            if compare_versions(lo, entry.version) <= 0 <= compare_versions(hi, entry.version):
                findings.append(Finding(v.vuln_id, v.cwe, entry, v.interface_kind))
    return findings


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class Policy:
    path: str
    op: str  # exists | eq | version_ge
    value: Any = None


@dataclass(frozen=True)
class PolicyViolation:
    path: str
    op: str
    expected: Any
    actual: Any
    reason: str

    def to_json(self) -> dict[str, Any]:
        return {"path": self.path, "op": self.op, "expected": self.expected,
                "actual": self.actual, "reason": self.reason}


class BadPath(LookupError):
    pass


_SEGMENT_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_\-]*)(?:\[([^\]]*)\])?")
_SELECTOR_KEYS = ("name", "id", "user", "sutId")
_MISSING = object()


def resolve_path(doc: Any, path: str) -> list[tuple[str, Any]]:
    """Resolve a dotted path with ``[*]`` and ``[key]`` list selectors."""
    segments = []
    pos = 0
    while pos < len(path):
        m = _SEGMENT_RE.match(path, pos)
        if not m:
            raise BadPath(f"cannot parse path {path!r} at {pos}")
        segments.append((m.group(1), m.group(2)))
        pos = m.end()
        if pos < len(path):
            if path[pos] != ".":
                raise BadPath(f"expected '.' in {path!r} at {pos}")
            pos += 1
    if not segments:
        raise BadPath("empty path")
    current: list[tuple[str, Any]] = [("", doc)]
    for key, selector in segments:
        nxt = []
        for where, value in current:
            here = f"{where}.{key}" if where else key
            if value is _MISSING:
                nxt.append((here, _MISSING))
                continue
            if not isinstance(value, dict):
                raise BadPath(f"{where or '$'} is not an object")
            child = value.get(key, _MISSING)
            if selector is None:
                nxt.append((here, child))
                continue
            if child is _MISSING:
                nxt.append((f"{here}[{selector}]", _MISSING))
                continue
            if not isinstance(child, list):
                raise BadPath(f"{here} is not a list")
            if selector == "*":
                nxt.extend((f"{here}[{i}]", item) for i, item in enumerate(child))
                continue
            matches = [(f"{here}[{i}]", item) for i, item in enumerate(child)
                       if isinstance(item, dict) and any(item.get(k) == selector for k in _SELECTOR_KEYS)]
            if not matches:
                raise BadPath(f"{here} has no element {selector!r}")
            nxt.extend(matches)
        current = nxt
    return current


def _check(op: str, actual: Any, expected: Any) -> str | None:
    if op == "exists":
        if actual is _MISSING or actual is None:
            return "missing"
        if expected == "nonempty" and hasattr(actual, "__len__") and len(actual) == 0:
            return "empty"
        return None
    if actual is _MISSING:
        return "missing"
    if op == "eq":
        return None if actual == expected else "not equal"
    if op == "version_ge":
        try:
            return None if compare_versions(str(actual), str(expected)) >= 0 else "version too low"
        except VersionParseError as exc:
            return str(exc)
    return f"unknown op {op!r}"


def check_policies(twin: CyberDigitalTwin, policies: Iterable[Policy]) -> list[PolicyViolation]:
    doc = twin.to_json()
    violations = []
    for p in policies:
        try:
            resolved = resolve_path(doc, p.path)
        except BadPath as exc:
            violations.append(PolicyViolation(p.path, p.op, p.value, None, f"bad path: {exc}"))
            continue
        for where, actual in resolved:
            reason = _check(p.op, actual, p.value)
            if reason is not None:
                violations.append(PolicyViolation(where, p.op, p.value,
                                                  None if actual is _MISSING else actual, reason))
    return violations


def policies_from_json(doc: Any) -> list[Policy]:
    items = doc.get("policies", []) if isinstance(doc, dict) else doc
    return [Policy(p["path"], p["op"], p.get("value")) for p in items]


# ---------------------------------------------------------------------------
# assembly


def assemble_twin(scan_bom: Iterable[BomEntry], twin_file: str | Path | dict[str, Any]) -> CyberDigitalTwin:
    """Merge the scanned BOM into the twin file; scan wins on version conflicts."""
    if isinstance(twin_file, dict):
        twin = twin_from_json(twin_file)
    else:
        twin = load_twin(twin_file)
    scanned = list(scan_bom)
    by_name = {b.name: b for b in scanned}
    merged = list(scanned)
    for entry in twin.bom:
        hit = by_name.get(entry.name)
        if hit is None:
            merged.append(entry)
        elif hit.version != entry.version:
            twin.conflicts.append({"name": entry.name, "scanVersion": hit.version,
                                   "fileVersion": entry.version, "resolution": "scan"})
    twin.bom = merged
    problems = twin_problems(twin)
    if problems:
        raise InvariantViolation("; ".join(problems))
    return twin

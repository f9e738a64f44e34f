"""Test case generation.

Turns abstract scenarios into executable test cases for one SUT, and bridges
the model side: twin findings become scenarios, model traces become test
cases, counterexamples become fuzz seeds.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import alia, oracle
from .catalog import Catalog, Extract, SutRecord, resolve_symbol, resolve_tool
from .frames import parse_frame
from .fsm import StateMachine
from .model import Counterexample
from .tokens import REFERENCE_RE, is_placeholder, is_variable, references


class GenerationError(Exception):
    pass


class UnboundVariable(GenerationError):
    def __init__(self, var: str, step: str):
        self.var = var
        self.step = step
        super().__init__(f"step {step!r} reads {var!r} before any step binds it")


class UnmappableInput(GenerationError):
    def __init__(self, symbol: str):
        self.symbol = symbol
        super().__init__(f"no concretization rule for input {symbol!r}")


@dataclass
class CommandStep:
    step: str
    tool: str
    parameters: list[str]
    requires: list[str] = field(default_factory=list)
    environment: str = "local"
    duration_s: float = 0.0
    extract: Extract | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "step": self.step, "requires": list(self.requires), "tool": self.tool,
            "parameters": list(self.parameters), "environment": self.environment,
            "duration_s": self.duration_s,
        }
        if self.extract is not None:
            out["extract"] = self.extract.to_json()
        return out


@dataclass
class ExecutableTestCase:
    id: str
    sut_id: str
    steps: list[CommandStep]
    oracle: list[dict[str, str]] = field(default_factory=list)
    origin: str | None = None

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "id": self.id, "sutId": self.sut_id,
            "steps": [s.to_json() for s in self.steps],
            "oracle": {"conditions": [dict(c) for c in self.oracle]},
        }
        if self.origin is not None:
            doc["origin"] = self.origin
        return doc

    def for_axe(self) -> dict[str, Any]:
        """The submission body: oracle block and origin stripped."""
        doc = self.to_json()
        doc.pop("oracle")
        doc.pop("origin", None)
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n"


def testcase_from_json(doc: dict[str, Any]) -> ExecutableTestCase:
    steps = []
    for s in doc["steps"]:
        ex = s.get("extract")
        steps.append(CommandStep(
            s["step"], s["tool"], list(s.get("parameters", [])), list(s.get("requires", [])),
            s.get("environment", "local"), float(s.get("duration_s", 0)),
            Extract(ex["var"], ex["pattern"], ex.get("group", 1)) if ex else None))
    conditions = doc.get("oracle", {}).get("conditions", [])
    return ExecutableTestCase(doc["id"], doc["sutId"], steps,
                              [{"step": c["step"], "rule": c["rule"]} for c in conditions],
                              doc.get("origin"))


def load_testcase(path: str | Path) -> ExecutableTestCase:
    return testcase_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# scenario -> test case


def _session_env(var: str) -> str:
    return "session:${" + var + "}"


def _runtime_refs(texts: Iterable[str]) -> list[str]:
    return [name for t in texts for name in references(t) if is_variable(name)]


def concretize(s: alia.AttackScenario, record: SutRecord, catalog: Catalog, *,
               case_id: str | None = None, origin: str | None = "static-dsl") -> ExecutableTestCase:
    """Fuse a scenario with one SUT's symbols and the pattern library.

    Placeholders are replaced by symbol values, runtime variables stay as
    ``${var}``. A ``shell:<var>`` argument routes the step into that session.
    Preconditions plus every runtime variable the step reads become its
    ``requires`` list, so steps depending on a failed binding are omitted.
    """
    for ph in s.placeholders():
        resolve_symbol(record, ph)
    pre: dict[str, list[str]] = {}
    for entry in s.pre:
        if isinstance(entry.condition, alia.Bound):
            pre.setdefault(entry.step, []).append(entry.condition.name)

    bound: set[str] = set()
    steps = []
    for a in s.actions:
        template = resolve_tool(catalog, record.sut_id, a.call.pattern, a.call.type or "")
        for var in pre.get(a.step, []) + a.reads():
            if is_variable(var) and var not in bound:
                raise UnboundVariable(var, a.step)

        def substitute(m: re.Match) -> str:
            name = m.group(1)
            if name in a.call.args:
                value = a.call.args[name]
                if isinstance(value, alia.Placeholder):
                    return resolve_symbol(record, value.name).value
                if isinstance(value, alia.Variable):
                    return "${" + value.name + "}"
                return value.text
            if is_placeholder(name):
                return resolve_symbol(record, name).value
            return m.group(0)

        params = [REFERENCE_RE.sub(substitute, p) for p in template.params]
        env = "local"
        shell = a.call.args.get("shell")
        if isinstance(shell, alia.Variable):
            env = _session_env(shell.name)
        implicit = _runtime_refs(params + [env])
        for var in implicit:
            if var not in bound:
                raise UnboundVariable(var, a.step)
        extract = None
        if a.binds is not None:
            if template.extract is None:
                raise GenerationError(f"pattern {template.pattern_key!r} extracts nothing, "
                                   f"but step {a.step!r} binds {a.binds!r}")
            extract = replace(template.extract, var=a.binds)
            bound.add(a.binds)
        requires = list(dict.fromkeys(pre.get(a.step, []) + implicit))
        steps.append(CommandStep(a.step, template.tool, params, requires, env,
                                 template.default_duration_s, extract))

    conditions = []
    for entry in s.post:
        cond = entry.condition
        if isinstance(cond, alia.Bound):
            rule: oracle.Rule = oracle.BoundRule(cond.name)
        elif isinstance(cond, alia.CanMessage):
            binding = resolve_symbol(record, cond.placeholder)
            if binding.kind != "can_frame":
                raise GenerationError(f"CAN_MESSAGE({cond.placeholder}) is bound to a {binding.kind}")
            rule = oracle.CanSeen(binding.value, catalog.can_window_s)
        else:
            rule = oracle.OutputMatches(cond.step, cond.regex)
        conditions.append({"step": entry.step, "rule": oracle.format_rule(rule)})
    return ExecutableTestCase(case_id or f"{s.name}.{record.sut_id}", record.sut_id, steps,
                              conditions, origin)


# ---------------------------------------------------------------------------
# mapping file


@dataclass
class Mapping:
    cwe_map: dict[str, dict[str, dict[str, str]]] = field(default_factory=dict)
    input_map: dict[str, dict[str, str]] = field(default_factory=dict)
    output_map: dict[str, str] = field(default_factory=dict)

    def input_rule(self, symbol: str) -> dict[str, str]:
        name = symbol.split(":", 1)[0]
        best = None
        for key, rule in self.input_map.items():
            hit = (symbol.startswith(key) or name.startswith(key)) if key.endswith(".") \
                else key in (symbol, name)
            if hit and (best is None or len(key) > len(best[0])):
                best = (key, rule)
        if best is None:
            raise UnmappableInput(symbol)
        return best[1]


def mapping_from_json(doc: dict[str, Any]) -> Mapping:
    return Mapping(dict(doc.get("cweMap", {})), dict(doc.get("inputMap", {})),
                   dict(doc.get("outputMap", {})))


def load_mapping(path: str | Path) -> Mapping:
    return mapping_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# findings -> scenarios


@dataclass
class FindingsScenarios:
    scenarios: list[alia.AttackScenario]
    unmapped: list[dict[str, str]]


def _scenario_name(finding) -> str:
    return re.sub(r"[^A-Za-z0-9_.\-]+", "_", f"{finding.vuln_id}-{finding.component}")


def scenario_from_findings(findings: Sequence, mapping: Mapping) -> FindingsScenarios:
    """Instantiate the mapped ALIA template for every finding whose
    (CWE, interface kind) has an entry; list the rest as unmapped."""
    scenarios = []
    unmapped = []
    for f in findings:
        entry = mapping.cwe_map.get(f.cwe, {}).get(f.interface_kind)
        if entry is None:
            unmapped.append({"vulnId": f.vuln_id, "cwe": f.cwe, "interfaceKind": f.interface_kind,
                             "component": f.component,
                             "reason": f"no mapping for {f.cwe}/{f.interface_kind}"})
            continue
        text = entry["template"]
        if not text.endswith("\n"):
            text += "\n"
        s = alia.parse_scenario(text, _scenario_name(f))
        post = entry.get("post")
        if post and s.actions:
            if not re.search(r"^PostConditions:", text, re.M):
                text += "PostConditions:\n"
            text += f"  {s.actions[-1].step}: {post}\n"
            s = alia.parse_scenario(text, _scenario_name(f))
        alia.check_scenario(s)
        scenarios.append(s)
    return FindingsScenarios(scenarios, unmapped)


# ---------------------------------------------------------------------------
# traces -> test cases


def output_rule(symbol: str | None, step: str, window_s: float, output_map: dict[str, str]) -> str | None:
    """Oracle rule asserting that ``symbol`` was observed for ``step``."""
    if symbol is None:
        return None
    name, _, payload = symbol.partition(":")
    if name == "can.frame" and payload:
        return oracle.format_rule(oracle.CanSeen(str(parse_frame(payload)), window_s))
    regex = output_map.get(symbol) or output_map.get(name) or re.escape(symbol)
    return oracle.format_rule(oracle.OutputMatches(step, regex))


def testcase_from_trace(trace: Sequence[str], record: SutRecord, machine: StateMachine,
                        catalog: Catalog, mapping: Mapping, *, case_id: str = "trace",
                        origin: str | None = "mutation") -> ExecutableTestCase:
    """One command step per input symbol; the oracle asserts the output of the
    trace's final transition on ``machine``."""
    steps = []
    for i, symbol in enumerate(trace):
        rule = mapping.input_rule(symbol)
        template = catalog.template(record.sut_id, rule["pattern"])
        name = f"{i + 1:02d}-{symbol.split(':', 1)[0]}"
        payload = symbol.partition(":")[2]

        def substitute(m: re.Match) -> str:
            ref = m.group(1)
            if ref == "payload":
                return payload
            if ref == "symbol":
                return symbol
            if is_placeholder(ref):
                return resolve_symbol(record, ref).value
            return m.group(0)

        params = [REFERENCE_RE.sub(substitute, p) for p in template.params]
        env = _session_env(rule["session"]) if rule.get("session") else "local"
        extract = None
        if rule.get("binds") and template.extract is not None:
            extract = replace(template.extract, var=rule["binds"])
        steps.append(CommandStep(name, template.tool, params,
                                 list(dict.fromkeys(_runtime_refs(params + [env]))), env,
                                 template.default_duration_s, extract))
    conditions = []
    if trace:
        outputs, _ = machine.run(trace)
        rule_text = output_rule(outputs[-1], steps[-1].step, catalog.can_window_s, mapping.output_map)
        if rule_text is not None:
            conditions.append({"step": steps[-1].step, "rule": rule_text})
    return ExecutableTestCase(case_id, record.sut_id, steps, conditions, origin)


# ---------------------------------------------------------------------------
# fuzz seeds


def _encode_payload(name: str, payload: str) -> tuple[bytes, int, int]:
    """Payload bytes and the (start, end) span considered mutable."""
    if name.startswith("can.") and payload:
        frame = parse_frame(payload)
        head = int(frame.can_id, 16).to_bytes(4, "big") + bytes([len(frame.data)])
        data = head + frame.data
        if frame.data:
            return data, len(head), len(data)
        return data, 0, len(data)
    raw = payload.encode("utf-8")
    return raw, 0, len(raw)


def encode_trace(trace: Sequence[str]) -> tuple[bytes, tuple[int, int]]:
    """Byte encoding of an input trace plus the mutable span of its final input.

    Each input is a record ``len:u16be || name [":" payload]``; CAN frame
    payloads are ``id:u32be || dlc:u8 || data``. The span covers the final
    payload (CAN data bytes when present), or the final name when the input
    carries no payload.
    """
    out = bytearray()
    span = (0, 0)
    for symbol in trace:
        name, sep, payload = symbol.partition(":")
        body = bytearray(name.encode("utf-8"))
        lo, hi = 0, len(body)
        if sep:
            body += b":"
            data, plo, phi = _encode_payload(name, payload)
            if phi > plo:
                lo, hi = len(body) + plo, len(body) + phi
            body += data
        if len(body) > 0xFFFF:
            raise ValueError(f"input {name!r} too long to encode")
        base = len(out) + 2
        out += len(body).to_bytes(2, "big") + body
        span = (base + lo, base + hi)
    return bytes(out), span


def _rng(seed: int, index: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def fuzz_corpus_from_counterexample(c: Counterexample | Sequence[str], n: int, seed: int) -> list[bytes]:
    """Seed 0 is the verbatim trace encoding; seeds 1..n each flip one bit of
    the final input's payload, chosen by a PRNG keyed on ``(seed, index)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    trace = c.trace if isinstance(c, Counterexample) else tuple(c)
    base, (lo, hi) = encode_trace(trace)
    corpus = [base]
    if hi <= lo:  # empty trace: nothing to mutate
        return corpus * (n + 1)
    for index in range(1, n + 1):
        bit = _rng(seed, index).randrange((hi - lo) * 8)
        mutated = bytearray(base)
        mutated[lo + bit // 8] ^= 0x80 >> (bit % 8)
        corpus.append(bytes(mutated))
    return corpus

"""Rule-based test oracle.

Postconditions arrive as rule text (``BOUND(shell)``,
``CAN_SEEN(5A1#1122334455667788, 10)``, ``OUTPUT_MATCHES(step, "re")``,
combined with ``NOT`` and ``AND``). They are evaluated against a merged log of
CAN, tool-output and binding events. A condition that holds means the attack
succeeded, so any MET condition makes the SUT INSECURE.
"""

from __future__ import annotations

import json
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Union

from .frames import FrameError, normalize_frame

SOURCE_ORDER = {"can": 0, "tool": 1, "binding": 2}


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, column: int, text: str = ""):
        self.column = column
        self.text = text
        super().__init__(f"column {column}: {message} in {text!r}")


class MissingAnchor(LookupError):
    def __init__(self, step: str):
        self.step = step
        super().__init__(f"no start timestamp for step {step!r}")


@dataclass(frozen=True)
class Event:
    timestamp_ms: int
    source: str  # can | tool | binding
    payload: str
    step: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {"timestamp_ms": self.timestamp_ms, "source": self.source,
                "step": self.step, "payload": self.payload}


@dataclass(frozen=True)
class BoundRule:
    var: str


@dataclass(frozen=True)
class CanSeen:
    frame: str
    window_s: float


@dataclass(frozen=True)
class OutputMatches:
    step: str
    regex: str


@dataclass(frozen=True)
class Not:
    rule: Rule


@dataclass(frozen=True)
class And:
    left: Rule
    right: Rule


Rule = Union[BoundRule, CanSeen, OutputMatches, Not, And]


@dataclass(frozen=True)
class Condition:
    step: str
    rule: Rule

    @property
    def text(self) -> str:
        return format_rule(self.rule)


@dataclass
class RuleSet:
    conditions: list[Condition] = field(default_factory=list)


@dataclass(frozen=True)
class ConditionResult:
    step: str
    rule: str
    result: str  # MET | UNMET
    evidence: Event | None = None


@dataclass(frozen=True)
class Verdict:
    per_condition: tuple[ConditionResult, ...]
    aggregate: str  # SECURE | INSECURE

    def to_json(self) -> dict[str, Any]:
        rows = []
        for c in self.per_condition:
            row: dict[str, Any] = {"step": c.step, "rule": c.rule, "result": c.result}
            if c.evidence is not None:
                row["evidence"] = c.evidence.to_json()
            rows.append(row)
        return {"perCondition": rows, "aggregate": self.aggregate}


def aggregate_of(results: Iterable[str]) -> str:
    return "INSECURE" if any(r == "MET" for r in results) else "SECURE"


# ---------------------------------------------------------------------------
# rule text

_TOKEN_RE = re.compile(r'\s*(?:(?P<str>"(?:[^"\\]|\\.)*")|(?P<punct>[(),])|(?P<word>[^\s(),"]+))')


def _tokens(text: str) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise RuleSyntaxError("unexpected character", pos + 1, text)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    out.append(("eof", "", len(text) + 1))
    return out


class _RuleParser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokens(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.toks[self.i]

    def take(self, kind: str, value: str | None = None, what: str = "") -> tuple[str, str, int]:
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            raise RuleSyntaxError(f"expected {what or value or kind}, found {tok[1] or 'end'!r}",
                                  tok[2], self.text)
        self.i += 1
        return tok

    def parse(self) -> Rule:
        rule = self.expr()
        self.take("eof", what="end of rule")
        return rule

    def expr(self) -> Rule:
        rule = self.term()
        while self.peek()[:2] == ("word", "AND"):
            self.i += 1
            rule = And(rule, self.term())
        return rule

    def term(self) -> Rule:
        kind, value, col = self.peek()
        if (kind, value) == ("word", "NOT"):
            self.i += 1
            return Not(self.term())
        if (kind, value) == ("punct", "("):
            self.i += 1
            rule = self.expr()
            self.take("punct", ")")
            return rule
        if kind != "word":
            raise RuleSyntaxError(f"expected a rule, found {value or 'end'!r}", col, self.text)
        self.i += 1
        self.take("punct", "(")
        if value == "BOUND":
            var = self.take("word", what="variable")[1]
            rule: Rule = BoundRule(var)
        elif value == "CAN_SEEN":
            _, frame, fcol = self.take("word", what="CAN frame")
            try:
                frame = normalize_frame(frame)
            except FrameError:
                raise RuleSyntaxError(f"invalid CAN frame {frame!r}", fcol, self.text) from None
            self.take("punct", ",")
            _, num, ncol = self.take("word", what="window in seconds")
            try:
                window = float(num)
            except ValueError:
                raise RuleSyntaxError(f"invalid window {num!r}", ncol, self.text) from None
            if not window > 0 or window == float("inf"):
                raise RuleSyntaxError("window must be a positive number", ncol, self.text)
            rule = CanSeen(frame, window)
        elif value == "OUTPUT_MATCHES":
            step = self._text_arg("step name")
            self.take("punct", ",")
            _, rx_tok, rcol = self.peek()
            regex = self._text_arg("regular expression")
            try:
                re.compile(regex)
            except re.error as exc:
                raise RuleSyntaxError(f"bad regular expression: {exc}", rcol, self.text) from None
            rule = OutputMatches(step, regex)
        else:
            raise RuleSyntaxError(f"unknown rule {value!r}", col, self.text)
        self.take("punct", ")")
        return rule

    def _text_arg(self, what: str) -> str:
        kind, value, col = self.peek()
        if kind == "str":
            self.i += 1
            try:
                return json.loads(value)
            except json.JSONDecodeError as exc:
                raise RuleSyntaxError(f"bad string literal: {exc.msg}", col, self.text) from None
        if kind == "word":
            self.i += 1
            return value
        raise RuleSyntaxError(f"expected {what}", col, self.text)


def parse_rule(text: str) -> Rule:
    return _RuleParser(text).parse()


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _text(s: str) -> str:
    return s if re.fullmatch(r"[A-Za-z0-9_.\-]+", s) else json.dumps(s, ensure_ascii=False)


def format_rule(rule: Rule) -> str:
    if isinstance(rule, BoundRule):
        return f"BOUND({rule.var})"
    if isinstance(rule, CanSeen):
        return f"CAN_SEEN({rule.frame}, {_num(rule.window_s)})"
    if isinstance(rule, OutputMatches):
        return f"OUTPUT_MATCHES({_text(rule.step)}, {json.dumps(rule.regex, ensure_ascii=False)})"
    if isinstance(rule, Not):
        inner = format_rule(rule.rule)
        return f"NOT ({inner})" if isinstance(rule.rule, And) else f"NOT {inner}"
    right = format_rule(rule.right)
    if isinstance(rule.right, And):
        right = f"({right})"
    return f"{format_rule(rule.left)} AND {right}"


def parse_rules(spec: Mapping[str, Any] | Iterable[Mapping[str, Any]]) -> RuleSet:
    """Parse an oracle block ``{"conditions": [{"step", "rule"}, ...]}``."""
    conditions = spec.get("conditions", []) if isinstance(spec, Mapping) else spec
    return RuleSet([Condition(c["step"], parse_rule(c["rule"])) for c in conditions])


# ---------------------------------------------------------------------------
# evaluation


def merge_events(*streams: Iterable[Event]) -> list[Event]:
    """Stable merge by timestamp; ties ordered can < tool < binding."""
    events = [e for stream in streams for e in stream]
    return sorted(events, key=lambda e: (e.timestamp_ms, SOURCE_ORDER[e.source]))


class _Evaluator:
    def __init__(self, events: list[Event], anchors: Mapping[str, int], missing: str):
        self.events = events
        self.anchors = anchors
        self.missing = missing
        self.stdout: dict[str, str] = {}
        self.tool_events: dict[str, Event] = {}
        for e in events:
            if e.source == "tool" and e.step is not None:
                self.stdout[e.step] = self.stdout.get(e.step, "") + e.payload
                self.tool_events.setdefault(e.step, e)

    def eval(self, rule: Rule, step: str) -> tuple[bool, Event | None]:
        if isinstance(rule, BoundRule):
            prefix = rule.var + "="
            for e in self.events:
                if e.source == "binding" and e.payload.startswith(prefix) and len(e.payload) > len(prefix):
                    return True, e
            return False, None
        if isinstance(rule, CanSeen):
            if step not in self.anchors:
                if self.missing == "raise":
                    raise MissingAnchor(step)
                return False, None
            lo = self.anchors[step]
            hi = lo + round(rule.window_s * 1000)
            for e in self.events:
                if e.source == "can" and lo <= e.timestamp_ms <= hi and _same_frame(e.payload, rule.frame):
                    return True, e
            return False, None
        if isinstance(rule, OutputMatches):
            text = self.stdout.get(rule.step, "")
            if re.search(rule.regex, text):
                return True, self.tool_events.get(rule.step)
            return False, None
        if isinstance(rule, Not):
            held, _ = self.eval(rule.rule, step)
            return not held, None
        left, lev = self.eval(rule.left, step)
        right, rev = self.eval(rule.right, step)
        return left and right, (lev or rev) if left and right else None


def _same_frame(payload: str, frame: str) -> bool:
    try:
        return normalize_frame(payload) == frame
    except FrameError:
        return False


def evaluate(rules: RuleSet, events: Iterable[Event], anchors: Mapping[str, int],
             *, on_missing_anchor: str = "raise") -> Verdict:
    """Judge every condition against the merged event log.

    ``anchors`` maps step names to start timestamps (ms). A CAN_SEEN window is
    the closed interval ``[anchor, anchor + window]``. With
    ``on_missing_anchor="unmet"`` a never-started step yields UNMET instead of
    :class:`MissingAnchor`.
    """
    ev = _Evaluator(merge_events(events), anchors, on_missing_anchor)
    results = []
    for cond in rules.conditions:
        held, evidence = ev.eval(cond.rule, cond.step)
        results.append(ConditionResult(cond.step, cond.text, "MET" if held else "UNMET", evidence))
    return Verdict(tuple(results), aggregate_of(r.result for r in results))


# ---------------------------------------------------------------------------
# CAN monitoring


def now_ms() -> int:
    return time.time_ns() // 1_000_000


def parse_address(address: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class CanMonitor:
    """Background reader turning ``FRAME <ID>#<HEX>`` lines into can events."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()
        self._events: list[Event] = []
        self.dropped = 0
        self._thread = threading.Thread(target=self._run, name="can-monitor", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        reader = self._sock.makefile("r", encoding="utf-8", errors="replace", newline="\n")
        try:
            for line in reader:
                stamp = now_ms()
                parts = line.strip().split(" ")
                frame = None
                if len(parts) == 2 and parts[0] == "FRAME":
                    try:
                        frame = normalize_frame(parts[1])
                    except FrameError:
                        frame = None
                with self._lock:
                    if frame is None:
                        self.dropped += 1
                    else:
                        self._events.append(Event(stamp, "can", frame))
        except (OSError, ValueError):
            pass

    def events(self) -> list[Event]:
        with self._lock:
            return list(self._events)

    def wait_for(self, count: int, timeout: float = 5.0) -> list[Event]:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            evs = self.events()
            if len(evs) >= count:
                return evs
            time.sleep(0.01)
        return self.events()

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._thread.join(timeout=2)

    def __enter__(self) -> CanMonitor:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def subscribe_can(address: str | tuple[str, int], timeout: float = 5.0) -> CanMonitor:
    """Connect to a simulator CAN port. Raises ``ConnectionError`` if refused."""
    try:
        sock = socket.create_connection(parse_address(address), timeout=timeout)
    except ConnectionError:
        raise
    except OSError as exc:
        raise ConnectionError(f"cannot reach CAN port {address}: {exc}") from exc
    sock.settimeout(None)
    return CanMonitor(sock)

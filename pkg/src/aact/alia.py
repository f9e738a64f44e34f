"""Parser, validator and canonical printer for ALIA attack scenarios.

An ALIA scenario has three sections, each introduced by a header at column 0::

    PreConditions:
      BT-Scanning: BT_IF
    Actions:
      BT-Scanning: target = scan(type:BlueBorne, interface:BT_IF)
    PostConditions:
      BT-Scanning: BOUND(target)

Entries are indented ``stepName: body`` lines. Bare words in upper case are
SUT placeholders, lower-case identifiers are runtime variables, and anything
quoted (or any other bare word) is a literal. The value of a ``type`` argument
is always a literal since it selects the pattern family.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Union

from .tokens import is_placeholder, is_variable

SECTIONS = ("PreConditions", "Actions", "PostConditions")

_WORD_RE = re.compile(r"[A-Za-z0-9_.\-/]+")
_STRING_RE = re.compile(r'"(?:[^"\\\n]|\\.)*"')
_STEP_NAME_RE = re.compile(r'[^:#"()=,\s](?:[^:#"()=,]*[^:#"()=,\s])?')


class AliaError(ValueError):
    """Base class for scenario parse errors."""


class AliaSyntaxError(AliaError):
    def __init__(self, message: str, line: int, column: int, expected: str = ""):
        self.line = line
        self.column = column
        self.expected = expected
        text = f"{line}:{column}: {message}"
        if expected:
            text += f" (expected {expected})"
        super().__init__(text)


class DuplicateStep(AliaError):
    def __init__(self, step: str, line: int):
        self.step = step
        self.line = line
        super().__init__(f"{line}: duplicate action step {step!r}")


class UnknownSection(AliaError):
    def __init__(self, name: str, line: int):
        self.name = name
        self.line = line
        super().__init__(f"{line}: unknown section {name!r}")


class SemanticError(AliaError):
    """Raised by :func:`check_scenario` when validation reports errors."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


@dataclass(frozen=True)
class Location:
    line: int
    column: int


@dataclass(frozen=True)
class Placeholder:
    name: str


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Literal:
    text: str


Value = Union[Placeholder, Variable, Literal]


@dataclass
class PatternCall:
    pattern: str
    args: dict[str, Value]
    loc: Location | None = field(default=None, compare=False, repr=False)

    @property
    def type(self) -> str | None:
        value = self.args.get("type")
        if value is None:
            return None
        return value.text if isinstance(value, Literal) else value.name


@dataclass
class ActionStep:
    step: str
    call: PatternCall
    binds: str | None = None
    loc: Location | None = field(default=None, compare=False, repr=False)

    def reads(self) -> list[str]:
        return [v.name for v in self.call.args.values() if isinstance(v, Variable)]


@dataclass(frozen=True)
class Bound:
    name: str


@dataclass(frozen=True)
class CanMessage:
    placeholder: str


@dataclass(frozen=True)
class Output:
    step: str
    regex: str


Condition = Union[Bound, CanMessage, Output]


@dataclass
class ConditionEntry:
    step: str
    condition: Condition
    loc: Location | None = field(default=None, compare=False, repr=False)


@dataclass
class AttackScenario:
    name: str
    pre: list[ConditionEntry] = field(default_factory=list)
    actions: list[ActionStep] = field(default_factory=list)
    post: list[ConditionEntry] = field(default_factory=list)

    def action(self, step: str) -> ActionStep | None:
        for a in self.actions:
            if a.step == step:
                return a
        return None

    def placeholders(self) -> list[str]:
        """Every placeholder mentioned anywhere in the scenario, first-seen order."""
        names: list[str] = []
        for entry in self.pre:
            if isinstance(entry.condition, Bound) and is_placeholder(entry.condition.name):
                names.append(entry.condition.name)
        for a in self.actions:
            names.extend(v.name for v in a.call.args.values() if isinstance(v, Placeholder))
        for entry in self.post:
            if isinstance(entry.condition, CanMessage):
                names.append(entry.condition.placeholder)
        return list(dict.fromkeys(names))


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str
    location: Location | None = None

    def __str__(self) -> str:
        where = f"{self.location.line}:{self.location.column}: " if self.location else ""
        return f"{where}{self.severity}: {self.message} [{self.code}]"


# ---------------------------------------------------------------------------
# lexing


@dataclass
class _Tok:
    kind: str  # WORD STRING PUNCT EOL
    text: str
    col: int


def _strip_comment(line: str) -> str:
    in_str = False
    i = 0
    while i < len(line):
        ch = line[i]
        if in_str:
            if ch == "\\":
                i += 1
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "#":
            return line[:i]
        i += 1
    return line


def _tokenize(body: str, line: int, col0: int) -> list[_Tok]:
    toks: list[_Tok] = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "=(),:":
            toks.append(_Tok("PUNCT", ch, col0 + i))
            i += 1
            continue
        if ch == '"':
            m = _STRING_RE.match(body, i)
            if not m:
                raise AliaSyntaxError("unterminated string", line, col0 + i, 'closing "')
            toks.append(_Tok("STRING", m.group(0), col0 + i))
            i = m.end()
            continue
        m = _WORD_RE.match(body, i)
        if not m:
            raise AliaSyntaxError(f"unexpected character {ch!r}", line, col0 + i, "word")
        toks.append(_Tok("WORD", m.group(0), col0 + i))
        i = m.end()
    toks.append(_Tok("EOL", "", col0 + len(body)))
    return toks


class _Cursor:
    def __init__(self, toks: list[_Tok], line: int):
        self.toks = toks
        self.pos = 0
        self.line = line

    def peek(self, offset: int = 0) -> _Tok:
        return self.toks[min(self.pos + offset, len(self.toks) - 1)]

    def next(self) -> _Tok:
        tok = self.peek()
        self.pos += 1
        return tok

    def expect(self, kind: str, text: str | None = None, what: str = "") -> _Tok:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            found = tok.text or "end of line"
            raise AliaSyntaxError(f"unexpected {found!r}", self.line, tok.col, what or text or kind)
        return self.next()

    def at(self, kind: str, text: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)


# ---------------------------------------------------------------------------
# parsing


def _classify(key: str, tok: _Tok) -> Value:
    if tok.kind == "STRING":
        return Literal(json.loads(tok.text))
    if key == "type":
        return Literal(tok.text)
    if is_placeholder(tok.text):
        return Placeholder(tok.text)
    if is_variable(tok.text):
        return Variable(tok.text)
    return Literal(tok.text)


def _parse_action(step: str, cur: _Cursor, loc: Location) -> ActionStep:
    binds = None
    if cur.at("WORD") and cur.peek(1).kind == "PUNCT" and cur.peek(1).text == "=":
        tok = cur.next()
        if not is_variable(tok.text):
            raise AliaSyntaxError(f"{tok.text!r} is not a runtime variable", cur.line, tok.col,
                                  "variable name [a-z][A-Za-z0-9_]*")
        binds = tok.text
        cur.next()
    name_tok = cur.expect("WORD", what="pattern name")
    call_loc = Location(cur.line, name_tok.col)
    cur.expect("PUNCT", "(")
    args: dict[str, Value] = {}
    if not cur.at("PUNCT", ")"):
        while True:
            key_tok = cur.expect("WORD", what="argument key")
            if cur.at("PUNCT", ":"):
                cur.next()
            value_tok = cur.peek()
            if value_tok.kind not in ("WORD", "STRING"):
                raise AliaSyntaxError(f"unexpected {value_tok.text or 'end of line'!r}",
                                      cur.line, value_tok.col, "argument value")
            cur.next()
            if key_tok.text in args:
                raise AliaSyntaxError(f"duplicate argument {key_tok.text!r}", cur.line, key_tok.col)
            args[key_tok.text] = _classify(key_tok.text, value_tok)
            if cur.at("PUNCT", ","):
                cur.next()
                continue
            break
    cur.expect("PUNCT", ")", what="',' or ')'")
    cur.expect("EOL", what="end of line")
    if "type" not in args:
        raise AliaSyntaxError("pattern call lacks a 'type' argument", cur.line, call_loc.column,
                              "type:<family>")
    return ActionStep(step, PatternCall(name_tok.text, args, call_loc), binds, loc)


def _parse_condition(step: str, cur: _Cursor, loc: Location) -> ConditionEntry:
    head = cur.expect("WORD", what="condition")
    if cur.at("EOL"):
        if not (is_placeholder(head.text) or is_variable(head.text)):
            raise AliaSyntaxError(f"{head.text!r} is neither placeholder nor variable",
                                  cur.line, head.col, "name")
        return ConditionEntry(step, Bound(head.text), loc)
    cur.expect("PUNCT", "(")
    if head.text == "BOUND":
        arg = cur.expect("WORD", what="name")
        if not (is_placeholder(arg.text) or is_variable(arg.text)):
            raise AliaSyntaxError(f"{arg.text!r} is neither placeholder nor variable",
                                  cur.line, arg.col, "name")
        cond: Condition = Bound(arg.text)
    elif head.text == "CAN_MESSAGE":
        arg = cur.expect("WORD", what="placeholder")
        if not is_placeholder(arg.text):
            raise AliaSyntaxError(f"{arg.text!r} is not a placeholder", cur.line, arg.col,
                                  "placeholder [A-Z][A-Z0-9_]*")
        cond = CanMessage(arg.text)
    elif head.text == "OUTPUT":
        target = cur.next()
        if target.kind == "STRING":
            target_step = json.loads(target.text)
        elif target.kind == "WORD":
            target_step = target.text
        else:
            raise AliaSyntaxError("missing step name", cur.line, target.col, "step name")
        cur.expect("PUNCT", ",")
        rx = cur.expect("STRING", what="quoted regular expression")
        cond = Output(target_step, json.loads(rx.text))
    else:
        raise AliaSyntaxError(f"unknown condition {head.text!r}", cur.line, head.col,
                              "BOUND, CAN_MESSAGE or OUTPUT")
    cur.expect("PUNCT", ")")
    cur.expect("EOL", what="end of line")
    return ConditionEntry(step, cond, loc)


def _logical_lines(text: str):
    """Yield (line number, raw line) with parenthesised continuations joined."""
    lines = text.replace("\r\n", "\n").split("\n")
    i = 0
    while i < len(lines):
        start = i
        line = _strip_comment(lines[i]).rstrip()
        i += 1
        depth = _paren_depth(line)
        while depth > 0 and i < len(lines) and lines[i][:1].isspace():
            extra = _strip_comment(lines[i]).strip()
            i += 1
            line = line + " " + extra
            depth = _paren_depth(line)
        yield start + 1, line


def _paren_depth(line: str) -> int:
    depth = 0
    for m in re.finditer(r'"(?:[^"\\]|\\.)*"|[()]', line):
        if m.group(0) == "(":
            depth += 1
        elif m.group(0) == ")":
            depth -= 1
    return depth


def parse_scenario(text: str, name: str = "scenario") -> AttackScenario:
    """Parse ALIA text into an :class:`AttackScenario`.

    Raises :class:`AliaSyntaxError`, :class:`DuplicateStep` or
    :class:`UnknownSection`. Semantic checks live in :func:`validate_scenario`.
    """
    scenario = AttackScenario(name)
    section: str | None = None
    seen: list[str] = []
    for lineno, line in _logical_lines(text):
        if not line.strip():
            continue
        if not line[0].isspace():
            header = line.strip()
            if not header.endswith(":"):
                raise AliaSyntaxError(f"unexpected {header!r} at column 1", lineno, 1,
                                      "section header")
            label = header[:-1].strip()
            if label not in SECTIONS:
                raise UnknownSection(label, lineno)
            if label in seen:
                raise AliaSyntaxError(f"section {label!r} repeated", lineno, 1)
            if seen and SECTIONS.index(label) < SECTIONS.index(seen[-1]):
                raise AliaSyntaxError(f"section {label!r} out of order", lineno, 1,
                                      " then ".join(SECTIONS))
            seen.append(label)
            section = label
            continue
        if section is None:
            raise AliaSyntaxError("entry outside of a section", lineno, 1, "section header")
        col = len(line) - len(line.lstrip()) + 1
        colon = line.find(":")
        if colon < 0:
            raise AliaSyntaxError("missing ':' after step name", lineno, len(line) + 1, "':'")
        step = line[:colon].strip()
        if not _STEP_NAME_RE.fullmatch(step):
            raise AliaSyntaxError(f"invalid step name {step!r}", lineno, col, "step name")
        loc = Location(lineno, col)
        cur = _Cursor(_tokenize(line[colon + 1:], lineno, colon + 2), lineno)
        if section == "Actions":
            if scenario.action(step) is not None:
                raise DuplicateStep(step, lineno)
            scenario.actions.append(_parse_action(step, cur, loc))
        elif section == "PreConditions":
            scenario.pre.append(_parse_condition(step, cur, loc))
        else:
            scenario.post.append(_parse_condition(step, cur, loc))
    return scenario


# ---------------------------------------------------------------------------
# validation


def validate_scenario(s: AttackScenario) -> list[Diagnostic]:
    """Check every scenario invariant; never raises."""
    diags: list[Diagnostic] = []

    def add(severity: str, code: str, message: str, loc: Location | None) -> None:
        diags.append(Diagnostic(severity, code, message, loc))

    steps: dict[str, ActionStep] = {}
    for a in s.actions:
        if not _STEP_NAME_RE.fullmatch(a.step):
            add("error", "BAD_STEP_NAME", f"invalid step name {a.step!r}", a.loc)
        if a.step in steps:
            add("error", "DUPLICATE_STEP", f"step {a.step!r} defined twice", a.loc)
        steps.setdefault(a.step, a)
        if a.binds is not None and not is_variable(a.binds):
            add("error", "BAD_VARIABLE", f"binding {a.binds!r} is not a runtime variable", a.loc)
        if "type" not in a.call.args:
            add("error", "MISSING_TYPE", f"pattern call in {a.step!r} lacks 'type'", a.loc)
        for key, value in a.call.args.items():
            if isinstance(value, Placeholder) and not is_placeholder(value.name):
                add("error", "BAD_PLACEHOLDER", f"{value.name!r} is not a placeholder", a.loc)
            if isinstance(value, Variable) and not is_variable(value.name):
                add("error", "BAD_VARIABLE", f"{value.name!r} is not a variable", a.loc)

    for entry in s.pre + s.post:
        if entry.step not in steps:
            add("error", "DANGLING_STEP",
                f"condition references step {entry.step!r} which is not an action", entry.loc)

    pre_reads: dict[str, list[str]] = {}
    for entry in s.pre:
        cond = entry.condition
        if isinstance(cond, Bound):
            if is_variable(cond.name):
                pre_reads.setdefault(entry.step, []).append(cond.name)
            elif not is_placeholder(cond.name):
                add("error", "BAD_CONDITION", f"{cond.name!r} is neither placeholder nor variable",
                    entry.loc)
        else:
            add("error", "BAD_CONDITION", "preconditions may only name placeholders or variables",
                entry.loc)

    # single forward pass over the actions
    bound: dict[str, str] = {}
    for a in s.actions:
        for var in list(dict.fromkeys(pre_reads.get(a.step, []) + a.reads())):
            if var not in bound:
                line = f" at line {a.loc.line}" if a.loc else ""
                add("error", "UNBOUND_VARIABLE",
                    f"{var!r} read by step {a.step!r}{line} but never bound before it", a.loc)
        if a.binds is not None:
            if a.binds in bound:
                add("warning", "REBOUND_VARIABLE",
                    f"{a.binds!r} rebound by {a.step!r} (first bound by {bound[a.binds]!r})", a.loc)
            else:
                bound[a.binds] = a.step

    for entry in s.post:
        cond = entry.condition
        if isinstance(cond, Bound):
            if not is_variable(cond.name):
                add("error", "BAD_CONDITION",
                    f"postcondition BOUND({cond.name}) needs a runtime variable", entry.loc)
            elif cond.name not in bound:
                add("error", "UNBOUND_VARIABLE",
                    f"postcondition reads {cond.name!r} which no action binds", entry.loc)
        elif isinstance(cond, CanMessage):
            if not is_placeholder(cond.placeholder):
                add("error", "BAD_CONDITION", f"{cond.placeholder!r} is not a placeholder", entry.loc)
        elif isinstance(cond, Output):
            if cond.step not in steps:
                add("error", "DANGLING_STEP", f"OUTPUT names unknown step {cond.step!r}", entry.loc)
            try:
                re.compile(cond.regex)
            except re.error as exc:
                add("error", "BAD_REGEX", f"regular expression does not compile: {exc}", entry.loc)
    return diags


def check_scenario(s: AttackScenario) -> list[Diagnostic]:
    """Validate and raise :class:`SemanticError` on any error; returns warnings."""
    diags = validate_scenario(s)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise SemanticError(errors)
    return diags


# ---------------------------------------------------------------------------
# printing


def _quote(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)


def _format_value(key: str, value: Value) -> str:
    if isinstance(value, (Placeholder, Variable)):
        return value.name
    text = value.text
    if _WORD_RE.fullmatch(text) and (key == "type" or not (is_placeholder(text) or is_variable(text))):
        return text
    return _quote(text)


def _format_condition(cond: Condition) -> str:
    if isinstance(cond, Bound):
        return cond.name
    if isinstance(cond, CanMessage):
        return f"CAN_MESSAGE({cond.placeholder})"
    step = cond.step if _WORD_RE.fullmatch(cond.step) else _quote(cond.step)
    return f"OUTPUT({step}, {_quote(cond.regex)})"


def format_action(a: ActionStep) -> str:
    args = ", ".join(f"{k}:{_format_value(k, v)}" for k, v in a.call.args.items())
    lhs = f"{a.binds} = " if a.binds else ""
    return f"{lhs}{a.call.pattern}({args})"


def print_scenario(s: AttackScenario) -> str:
    lines = ["PreConditions:"]
    lines += [f"  {e.step}: {_format_condition(e.condition)}" for e in s.pre]
    lines.append("Actions:")
    lines += [f"  {a.step}: {format_action(a)}" for a in s.actions]
    lines.append("PostConditions:")
    lines += [f"  {e.step}: {_format_condition(e.condition)}" for e in s.post]
    return "\n".join(lines) + "\n"

"""Deterministic Mealy machines and their line-based text format.

Format (``#`` at line start or after whitespace begins a comment)::

    machine demo
    inputs bt.exploit sh.exec
    outputs bt.session can.frame:5A1#1122334455667788
    initial s0
    state s0 tag:kind=entry
    trans s0 bt.exploit / bt.session s1

``-`` stands for the null output. Undefined (state, input) pairs behave as a
self-loop with null output.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

NULL = "-"


class FsmError(ValueError):
    pass


class FsmSyntaxError(FsmError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NondeterministicTransition(FsmError):
    pass


@dataclass
class StateMachine:
    name: str
    states: tuple[str, ...]
    initial: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    transitions: dict[tuple[str, str], tuple[str | None, str]]
    tags: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.inputs = tuple(sorted(set(self.inputs)))
        self.outputs = tuple(sorted(set(self.outputs)))
        if self.initial not in self.states:
            raise FsmError(f"initial state {self.initial!r} is not a state")
        known = set(self.states)
        for (src, inp), (out, dst) in self.transitions.items():
            if src not in known or dst not in known:
                raise FsmError(f"transition {src} {inp} -> {dst} references an unknown state")
            if inp not in self.inputs:
                raise FsmError(f"input {inp!r} missing from the input alphabet")
            if out is not None and out not in self.outputs:
                raise FsmError(f"output {out!r} missing from the output alphabet")
        self.tags = {s: frozenset(t) for s, t in self.tags.items() if t}

    def step(self, state: str, symbol: str) -> tuple[str | None, str]:
        return self.transitions.get((state, symbol), (None, state))

    def run(self, word: Iterable[str], start: str | None = None) -> tuple[list[str | None], str]:
        state = self.initial if start is None else start
        outputs = []
        for symbol in word:
            out, state = self.step(state, symbol)
            outputs.append(out)
        return outputs, state

    def tagged(self, tag: str) -> list[str]:
        return [s for s in self.states if tag in self.tags.get(s, ())]

    def component(self, state: str) -> str | None:
        for tag in self.tags.get(state, ()):
            if tag.startswith("component="):
                return tag.split("=", 1)[1]
        return None

    def with_transitions(self, transitions: dict, name: str | None = None) -> StateMachine:
        return StateMachine(name or self.name, self.states, self.initial, self.inputs,
                            self.outputs, transitions, dict(self.tags))

    def with_tags(self, tags: Mapping[str, Iterable[str]]) -> StateMachine:
        return StateMachine(self.name, self.states, self.initial, self.inputs, self.outputs,
                            dict(self.transitions), {s: frozenset(t) for s, t in tags.items()})


# ---------------------------------------------------------------------------
# text format

_TOKEN_RE = re.compile(r"\S+")


def _strip_comment(line: str) -> str:
    m = re.search(r"(^|\s)#", line)
    return line[: m.start()] if m else line


def _symbol(text: str, line: int) -> str:
    if not re.fullmatch(r"[^\s/]+", text) or text == NULL:
        raise FsmSyntaxError(line, f"invalid symbol {text!r}")
    return text


def parse_fsm(text: str) -> StateMachine:
    name = None
    initial = None
    states: list[str] = []
    inputs: list[str] = []
    outputs: list[str] = []
    tags: dict[str, set[str]] = {}
    transitions: dict[tuple[str, str], tuple[str | None, str]] = {}

    def add_state(s: str, line: int) -> None:
        if not re.fullmatch(r"[A-Za-z0-9_.\-]+", s):
            raise FsmSyntaxError(line, f"invalid state id {s!r}")
        if s not in states:
            states.append(s)

    for lineno, raw in enumerate(text.replace("\r\n", "\n").split("\n"), 1):
        words = _TOKEN_RE.findall(_strip_comment(raw))
        if not words:
            continue
        kw, args = words[0], words[1:]
        if kw == "machine":
            if len(args) != 1:
                raise FsmSyntaxError(lineno, "expected 'machine <name>'")
            name = args[0]
        elif kw == "initial":
            if len(args) != 1:
                raise FsmSyntaxError(lineno, "expected 'initial <state>'")
            initial = args[0]
            add_state(initial, lineno)
        elif kw == "inputs":
            inputs.extend(_symbol(a, lineno) for a in args)
        elif kw == "outputs":
            outputs.extend(_symbol(a, lineno) for a in args)
        elif kw == "state":
            if not args:
                raise FsmSyntaxError(lineno, "expected 'state <id> [tag:k=v ...]'")
            add_state(args[0], lineno)
            for t in args[1:]:
                if not t.startswith("tag:") or len(t) == 4:
                    raise FsmSyntaxError(lineno, f"expected tag:<k=v>, got {t!r}")
                tags.setdefault(args[0], set()).add(t[4:])
        elif kw == "trans":
            if len(args) != 5 or args[2] != "/":
                raise FsmSyntaxError(lineno, "expected 'trans <src> <input> / <output|-> <dst>'")
            src, inp, _, out, dst = args
            add_state(src, lineno)
            add_state(dst, lineno)
            inp = _symbol(inp, lineno)
            if (src, inp) in transitions:
                raise NondeterministicTransition(f"line {lineno}: second transition for ({src}, {inp})")
            output = None if out == NULL else _symbol(out, lineno)
            transitions[(src, inp)] = (output, dst)
            inputs.append(inp)
            if output is not None:
                outputs.append(output)
        else:
            raise FsmSyntaxError(lineno, f"unknown keyword {kw!r}")
    if name is None:
        raise FsmSyntaxError(1, "missing 'machine <name>'")
    if initial is None:
        raise FsmSyntaxError(1, "missing 'initial <state>'")
    return StateMachine(name, tuple(states), initial, tuple(inputs), tuple(outputs),
                        transitions, {s: frozenset(t) for s, t in tags.items()})


def format_fsm(m: StateMachine) -> str:
    lines = [f"machine {m.name}"]
    if m.inputs:
        lines.append("inputs " + " ".join(m.inputs))
    if m.outputs:
        lines.append("outputs " + " ".join(m.outputs))
    lines.append(f"initial {m.initial}")
    for s in m.states:
        tag_text = "".join(f" tag:{t}" for t in sorted(m.tags.get(s, ())))
        lines.append(f"state {s}{tag_text}")
    order = {s: i for i, s in enumerate(m.states)}
    for (src, inp) in sorted(m.transitions, key=lambda k: (order[k[0]], k[1])):
        out, dst = m.transitions[(src, inp)]
        lines.append(f"trans {src} {inp} / {out if out is not None else NULL} {dst}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# properties

NEVER_REACH = "NEVER_REACH"
NEVER_OUTPUT = "NEVER_OUTPUT"
NEVER_OUTPUT_WITHOUT_PRIOR_INPUT = "NEVER_OUTPUT_WITHOUT_PRIOR_INPUT"


@dataclass(frozen=True)
class Property:
    name: str
    form: str
    states: tuple[str, ...] = ()
    symbol: str | None = None
    prior_input: str | None = None

    @classmethod
    def never_reach(cls, name: str, states: Sequence[str]) -> Property:
        return cls(name, NEVER_REACH, tuple(states))

    @classmethod
    def never_output(cls, name: str, symbol: str) -> Property:
        return cls(name, NEVER_OUTPUT, symbol=symbol)

    @classmethod
    def never_output_without(cls, name: str, symbol: str, prior_input: str) -> Property:
        return cls(name, NEVER_OUTPUT_WITHOUT_PRIOR_INPUT, symbol=symbol, prior_input=prior_input)


def parse_properties(text: str) -> list[Property]:
    props = []
    for lineno, raw in enumerate(text.replace("\r\n", "\n").split("\n"), 1):
        words = _TOKEN_RE.findall(_strip_comment(raw))
        if not words:
            continue
        if words[0] != "property" or len(words) < 4:
            raise FsmSyntaxError(lineno, "expected 'property <name> <FORM> <args>'")
        _, name, form, *args = words
        if form == NEVER_REACH and len(args) == 1:
            props.append(Property.never_reach(name, [s for s in args[0].split(",") if s]))
        elif form == NEVER_OUTPUT and len(args) == 1:
            props.append(Property.never_output(name, args[0]))
        elif form == NEVER_OUTPUT_WITHOUT_PRIOR_INPUT and len(args) == 2:
            props.append(Property.never_output_without(name, args[0], args[1]))
        else:
            raise FsmSyntaxError(lineno, f"bad property form {form!r} or argument count")
    return props


def format_properties(props: Iterable[Property]) -> str:
    lines = []
    for p in props:
        if p.form == NEVER_REACH:
            lines.append(f"property {p.name} {p.form} {','.join(p.states)}")
        elif p.form == NEVER_OUTPUT:
            lines.append(f"property {p.name} {p.form} {p.symbol}")
        else:
            lines.append(f"property {p.name} {p.form} {p.symbol} {p.prior_input}")
    return "\n".join(lines) + ("\n" if lines else "")

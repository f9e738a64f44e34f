"""Model-based test generation over deterministic Mealy machines.

Covers deriving a machine from a twin flow graph, first-order mutation
(CTT: change transition target, CTO: change transition output, DTR: delete
transition, ATR: add transition), shortest killing tests, explicit-state
checking of three safety property forms, BOM-driven security slicing and
interface-distance ranking.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .fsm import (NEVER_OUTPUT, NEVER_OUTPUT_WITHOUT_PRIOR_INPUT, NEVER_REACH, NULL, FsmError,
                  Property, StateMachine)
from .twin import FlowGraph, InterfaceDecl

OPERATORS = ("CTT", "CTO", "DTR", "ATR")
ENV_STATE = "env"
UNREACHABLE = math.inf


class NondeterministicFlow(FsmError):
    def __init__(self, state: str, trigger: str):
        self.locus = (state, trigger)
        super().__init__(f"two flow edges leave {state!r} on {trigger!r}")


class NoEntryNode(FsmError):
    pass


class UnknownState(FsmError):
    pass


class UnknownSymbol(FsmError):
    pass


# ---------------------------------------------------------------------------
# derivation


def derive_machine(graph: FlowGraph, interfaces: Sequence[InterfaceDecl], name: str = "twin") -> StateMachine:
    entries = [n for n in graph.nodes if n.kind == "entry"]
    if not entries:
        raise NoEntryNode("flow graph has no entry node")
    states = [n.id for n in graph.nodes]
    transitions: dict[tuple[str, str], tuple[str | None, str]] = {}
    for e in graph.edges:
        key = (e.src, e.trigger)
        if key in transitions:
            raise NondeterministicFlow(*key)
        transitions[key] = (e.effect, e.dst)
    tags = {}
    for n in graph.nodes:
        t = {f"kind={n.kind}"}
        if n.component is not None:
            t.add(f"component={n.component}")
        tags[n.id] = t
    if len(entries) == 1:
        initial = entries[0].id
    else:
        if ENV_STATE in states:
            raise FsmError(f"node id {ENV_STATE!r} is reserved for the synthetic initial state")
        kinds = {i.kind for i in interfaces}
        initial = ENV_STATE
        states.insert(0, ENV_STATE)
        tags[ENV_STATE] = {"kind=env"}
        for n in entries:
            for e in graph.edges:
                if e.src == n.id and e.trigger.split(".", 1)[0] in kinds:
                    key = (ENV_STATE, e.trigger)
                    if key in transitions and transitions[key][1] != n.id:
                        raise NondeterministicFlow(*key)
                    transitions[key] = (None, n.id)
    inputs = {k[1] for k in transitions}
    outputs = {o for o, _ in transitions.values() if o is not None}
    return StateMachine(name, tuple(states), initial, tuple(inputs), tuple(outputs), transitions, tags)


# ---------------------------------------------------------------------------
# mutation


@dataclass(frozen=True)
class Mutant:
    operator: str
    state: str
    input: str
    change: tuple[str | None, ...]
    machine: StateMachine = field(compare=False, repr=False)

    @property
    def locus(self) -> tuple[str, str]:
        return (self.state, self.input)

    @property
    def name(self) -> str:
        return self.machine.name

    def describe(self) -> str:
        change = ",".join(NULL if c is None else c for c in self.change)
        return f"{self.operator}({self.state}, {self.input}){' -> ' + change if change else ''}"


def _sort_key(op: str, state: str, inp: str, change: tuple) -> tuple:
    return (op, state, inp, tuple(NULL if c is None else c for c in change))


def enumerate_mutants(m: StateMachine, ops: Iterable[str] = OPERATORS) -> list[Mutant]:
    """All first-order mutants of ``m`` for the selected operators, deterministically ordered."""
    ops = set(ops)
    unknown = ops - set(OPERATORS)
    if unknown:
        raise ValueError(f"unknown mutation operators {sorted(unknown)}")
    output_choices: list[str | None] = [None, *m.outputs]
    edits = []
    for (s, a), (out, dst) in m.transitions.items():
        if "CTT" in ops:
            edits += [("CTT", s, a, (t,), (out, t)) for t in m.states if t != dst]
        if "CTO" in ops:
            edits += [("CTO", s, a, (o,), (o, dst)) for o in output_choices if o != out]
        if "DTR" in ops:
            edits.append(("DTR", s, a, (), None))
    if "ATR" in ops:
        for s in m.states:
            for a in m.inputs:
                if (s, a) in m.transitions:
                    continue
                edits += [("ATR", s, a, (o, t), (o, t)) for o in output_choices for t in m.states]
    edits.sort(key=lambda e: _sort_key(*e[:4]))
    mutants = []
    counters: dict[str, int] = {}
    for op, s, a, change, new in edits:
        counters[op] = counters.get(op, 0) + 1
        trans = dict(m.transitions)
        if new is None:
            del trans[(s, a)]
        else:
            trans[(s, a)] = new
        name = f"{m.name}.{op.lower()}{counters[op]:03d}"
        mutants.append(Mutant(op, s, a, change, m.with_transitions(trans, name)))
    return mutants


def distinguishing_test(m: StateMachine, mutant: StateMachine | Mutant) -> list[str] | None:
    """Shortest (then lexicographically least) input word on which the outputs
    of ``m`` and ``mutant`` differ; ``None`` when they are equivalent."""
    other = mutant.machine if isinstance(mutant, Mutant) else mutant
    inputs = sorted(set(m.inputs) | set(other.inputs))
    start = (m.initial, other.initial)
    parent: dict[tuple[str, str], tuple[tuple[str, str], str] | None] = {start: None}
    queue = deque([start])
    while queue:
        pair = queue.popleft()
        for a in inputs:
            o1, n1 = m.step(pair[0], a)
            o2, n2 = other.step(pair[1], a)
            if o1 != o2:
                return _path(parent, pair) + [a]
            nxt = (n1, n2)
            if nxt not in parent:
                parent[nxt] = (pair, a)
                queue.append(nxt)
    return None


def _path(parent: dict, node) -> list[str]:
    word = []
    while parent[node] is not None:
        node, a = parent[node]
        word.append(a)
    return word[::-1]


# ---------------------------------------------------------------------------
# model checking


@dataclass(frozen=True)
class Counterexample:
    property: Property
    trace: tuple[str, ...]
    final_state: str
    final_output: str | None


def _validate_property(m: StateMachine, p: Property) -> None:
    if p.form == NEVER_REACH:
        missing = [s for s in p.states if s not in m.states]
        if missing:
            raise UnknownState(f"property {p.name} names unknown states {missing}")
    elif p.form in (NEVER_OUTPUT, NEVER_OUTPUT_WITHOUT_PRIOR_INPUT):
        if p.symbol not in m.outputs:
            raise UnknownSymbol(f"property {p.name}: {p.symbol!r} is not an output of {m.name}")
        if p.form == NEVER_OUTPUT_WITHOUT_PRIOR_INPUT and p.prior_input not in m.inputs:
            raise UnknownSymbol(f"property {p.name}: {p.prior_input!r} is not an input of {m.name}")
    else:
        raise ValueError(f"unknown property form {p.form!r}")


def check_property(m: StateMachine, p: Property) -> Counterexample | None:
    """Breadth-first explicit-state check. Returns ``None`` when the property
    holds, otherwise a shortest counterexample."""
    _validate_property(m, p)
    inputs = m.inputs
    if p.form == NEVER_REACH:
        bad = set(p.states)
        if m.initial in bad:
            return Counterexample(p, (), m.initial, None)
        parent: dict = {m.initial: None}
        queue = deque([m.initial])
        while queue:
            s = queue.popleft()
            for a in inputs:
                out, t = m.step(s, a)
                if t in parent:
                    continue
                parent[t] = (s, a)
                if t in bad:
                    return Counterexample(p, tuple(_path(parent, t)), t, out)
                queue.append(t)
        return None

    monitored = p.form == NEVER_OUTPUT_WITHOUT_PRIOR_INPUT
    start = (m.initial, False)
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        s, armed = node
        for a in inputs:
            out, t = m.step(s, a)
            if out == p.symbol and not (monitored and armed):
                return Counterexample(p, tuple(_path(parent, node)) + (a,), t, out)
            nxt = (t, armed or (monitored and a == p.prior_input))
            if nxt not in parent:
                parent[nxt] = (node, a)
                queue.append(nxt)
    return None


def replay(m: StateMachine, cex: Counterexample) -> bool:
    """True when the trace reproduces the claimed violation at its last step."""
    outputs, state = m.run(cex.trace)
    if state != cex.final_state:
        return False
    p = cex.property
    if p.form == NEVER_REACH:
        return state in p.states and (not outputs or outputs[-1] == cex.final_output)
    if not outputs or outputs[-1] != p.symbol or cex.final_output != p.symbol:
        return False
    if p.form == NEVER_OUTPUT:
        return True
    return p.prior_input not in cex.trace[:-1]


# ---------------------------------------------------------------------------
# slicing and distances


@dataclass
class SecuritySlice:
    machine: StateMachine
    properties: list[Property]
    states: frozenset[str]
    unmatched: list[str]

    def restricted(self) -> StateMachine:
        """The sliced machine: only slice states and transitions between them."""
        keep = [s for s in self.machine.states if s in self.states]
        trans = {k: v for k, v in self.machine.transitions.items()
                 if k[0] in self.states and v[1] in self.states}
        return StateMachine(self.machine.name + ".slice", tuple(keep), self.machine.initial,
                            self.machine.inputs, self.machine.outputs, trans,
                            {s: t for s, t in self.machine.tags.items() if s in self.states})


def reachable_states(m: StateMachine) -> dict[str, int]:
    """BFS distance from the initial state to every reachable state."""
    dist = {m.initial: 0}
    queue = deque([m.initial])
    while queue:
        s = queue.popleft()
        for a in m.inputs:
            _, t = m.step(s, a)
            if t not in dist:
                dist[t] = dist[s] + 1
                queue.append(t)
    return dist


def _coreachable(m: StateMachine, targets: set[str]) -> set[str]:
    preds: dict[str, set[str]] = {}
    for (s, _), (_, t) in m.transitions.items():
        preds.setdefault(t, set()).add(s)
    seen = set(targets)
    stack = list(targets)
    while stack:
        for p in preds.get(stack.pop(), ()):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def security_slice(m: StateMachine, findings: Iterable) -> SecuritySlice:
    """Tag states whose component has a finding as ``unsafe`` and emit one
    NEVER_REACH property per affected component."""
    components = list(dict.fromkeys(f.component for f in findings))
    tags = {s: set(m.tags.get(s, ())) for s in m.states}
    groups: dict[str, list[str]] = {}
    for s in m.states:
        comp = m.component(s)
        if comp in components:
            tags[s].add("unsafe")
            groups.setdefault(comp, []).append(s)
    unmatched = [c for c in components if c not in groups]
    if not groups:
        return SecuritySlice(m, [], frozenset(), unmatched)
    tagged = m.with_tags(tags)
    unsafe = {s for group in groups.values() for s in group}
    slice_states = frozenset(set(reachable_states(tagged)) & _coreachable(tagged, unsafe))
    props = [Property.never_reach(f"no-reach-{comp}", states) for comp, states in groups.items()]
    return SecuritySlice(tagged, props, slice_states, unmatched)


def interface_distance(m: StateMachine, locus: str | tuple[str, str]) -> float:
    """Shortest input count from the initial state to a state, or through a
    transition ``(state, input)``; ``math.inf`` if unreachable."""
    dist = reachable_states(m)
    if isinstance(locus, tuple):
        state, _ = locus
        if state not in m.states:
            raise UnknownState(state)
        return dist[state] + 1 if state in dist else UNREACHABLE
    if locus not in m.states:
        raise UnknownState(locus)
    return dist.get(locus, UNREACHABLE)


def rank_mutants(mutants: Sequence[Mutant], m: StateMachine) -> list[Mutant]:
    """Stable sort by the interface distance of each mutation locus."""
    dist = reachable_states(m)

    def key(mu: Mutant) -> float:
        return dist[mu.state] + 1 if mu.state in dist else UNREACHABLE

    return sorted(mutants, key=key)

"""Independent reference implementations used to check the engines.

Everything here is deliberately naive: explicit word enumeration, level-set
fixpoints and partition refinement, sharing no code with ``aact.model``.
"""

from __future__ import annotations

import itertools
import random

import numpy as np

from aact.fsm import NEVER_OUTPUT, NEVER_REACH, StateMachine


def _step(m: StateMachine, s, a):
    return m.transitions.get((s, a), (None, s))


def brute_mutant_tables(m: StateMachine) -> dict[str, set]:
    """Every single-edit transition table, grouped by edit kind."""
    base = dict(m.transitions)
    outs = [None, *m.outputs]
    found = {"CTT": set(), "CTO": set(), "DTR": set(), "ATR": set()}
    for key, (o, t) in base.items():
        for t2 in m.states:
            if t2 != t:
                found["CTT"].add(frozenset({**base, key: (o, t2)}.items()))
        for o2 in outs:
            if o2 != o:
                found["CTO"].add(frozenset({**base, key: (o2, t)}.items()))
        found["DTR"].add(frozenset({k: v for k, v in base.items() if k != key}.items()))
    for s, a in itertools.product(m.states, m.inputs):
        if (s, a) not in base:
            for o2, t2 in itertools.product(outs, m.states):
                found["ATR"].add(frozenset({**base, (s, a): (o2, t2)}.items()))
    return found


def words(inputs, max_len):
    """All words up to ``max_len`` in shortlex order."""
    for n in range(max_len + 1):
        yield from itertools.product(sorted(inputs), repeat=n)


def outputs_of(m: StateMachine, word):
    s, outs = m.initial, []
    for a in word:
        o, s = _step(m, s, a)
        outs.append(o)
    return outs


def first_distinguishing_word(m1: StateMachine, m2: StateMachine, max_len: int):
    """Shortlex-first word with differing outputs, by plain enumeration."""
    inputs = sorted(set(m1.inputs) | set(m2.inputs))
    for w in words(inputs, max_len):
        if outputs_of(m1, w) != outputs_of(m2, w):
            return list(w)
    return None


def vector_equivalent(m1: StateMachine, m2: StateMachine, max_len: int) -> bool:
    """Compare the outputs of every word up to ``max_len``, run as numpy array
    updates over the set of state pairs the words of each length reach.

    Two words reaching the same pair have the same futures, so keeping each
    pair once per length still covers every word."""
    inputs = sorted(set(m1.inputs) | set(m2.inputs))
    tables = []
    for m in (m1, m2):
        idx = {s: i for i, s in enumerate(m.states)}
        nxt = np.zeros((len(m.states), len(inputs)), dtype=np.int64)
        out = np.zeros((len(m.states), len(inputs)), dtype=object)
        for i, s in enumerate(m.states):
            for j, a in enumerate(inputs):
                o, t = _step(m, s, a)
                nxt[i, j] = idx[t]
                out[i, j] = o
        tables.append((nxt, out, idx[m.initial]))
    k = len(inputs)
    pairs = np.array([[tables[0][2], tables[1][2]]])
    for _ in range(max_len):
        a = np.tile(np.arange(k), len(pairs))
        s1, s2 = np.repeat(pairs[:, 0], k), np.repeat(pairs[:, 1], k)
        if np.any(tables[0][1][s1, a] != tables[1][1][s2, a]):
            return False
        pairs = np.unique(np.stack([tables[0][0][s1, a], tables[1][0][s2, a]], axis=1), axis=0)
    return True


def refinement_equivalent(m1: StateMachine, m2: StateMachine) -> bool:
    """Mealy partition refinement on the disjoint union of both machines."""
    inputs = sorted(set(m1.inputs) | set(m2.inputs))
    nodes = [(0, s) for s in m1.states] + [(1, s) for s in m2.states]
    mach = {0: m1, 1: m2}

    block = {n: 0 for n in nodes}
    while True:
        sigs = {}
        for side, s in nodes:
            row = tuple((o, block[(side, t)])
                        for o, t in (_step(mach[side], s, a) for a in inputs))
            sigs[(side, s)] = (block[(side, s)], row)
        ids: dict = {}
        new = {n: ids.setdefault(sigs[n], len(ids)) for n in nodes}
        if len(ids) == len(set(block.values())):
            break
        block = new
    return block[(0, m1.initial)] == block[(1, m2.initial)]


def level_sets(m: StateMachine, limit: int):
    """States reachable with exactly k inputs, k = 0..limit."""
    levels = [{m.initial}]
    for _ in range(limit):
        levels.append({_step(m, s, a)[1] for s in levels[-1] for a in m.inputs})
    return levels


def reachable(m: StateMachine) -> set:
    seen = {m.initial}
    while True:
        more = seen | {_step(m, s, a)[1] for s in seen for a in m.inputs}
        if more == seen:
            return seen
        seen = more


def property_oracle(m: StateMachine, form: str, target):
    """(violated?, shortest violating length) for NEVER_REACH / NEVER_OUTPUT."""
    n = len(m.states)
    if form == NEVER_REACH:
        for k, level in enumerate(level_sets(m, n)):
            if level & set(target):
                return True, k
        return False, None
    assert form == NEVER_OUTPUT
    for k, level in enumerate(level_sets(m, n)):
        if any(_step(m, s, a)[0] == target for s in level for a in m.inputs):
            return True, k + 1
    return False, None


def shortest_by_enumeration(m: StateMachine, form: str, target, max_len: int):
    for w in words(m.inputs, max_len):
        outs = outputs_of(m, w)
        if form == NEVER_REACH:
            s = m.initial
            for a in w:
                s = _step(m, s, a)[1]
            if s in target:
                return len(w)
        elif outs and outs[-1] == target:
            return len(w)
    return None


def random_machine(rng: random.Random, n_states: int, n_inputs: int, n_outputs: int = 3,
                   density: float = 0.7, name: str = "rnd") -> StateMachine:
    states = tuple(f"q{i}" for i in range(n_states))
    inputs = tuple(f"i{j}" for j in range(n_inputs))
    outputs = tuple(f"o{j}" for j in range(n_outputs))
    trans = {}
    for s in states:
        for a in inputs:
            if rng.random() < density:
                o = rng.choice((None, *outputs))
                trans[(s, a)] = (o, rng.choice(states))
    return StateMachine(name, states, states[0], inputs, outputs, trans)

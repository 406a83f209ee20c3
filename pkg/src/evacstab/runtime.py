"""Compiled fast path for slot-level simulation.

``CompiledSpec`` precomputes cumulative kernel rows and per-(s,g,a)
candidate effect rules so the inner slot loop does one uniform draw, a
linear cdf walk (rows are short), and a guard check.  Sampling is
draw-compatible with ``model.simulate_slot``: one uniform per slot,
walked over the row in declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .model import (
    NULL_ACTION,
    CountVec,
    PreconditionError,
    RngStream,
    SystemSpec,
    _apply_ops,
)


@dataclass
class _Row:
    cum: tuple[float, ...]
    outcomes: tuple[str, ...]
    next_states: tuple[str, ...]


class CompiledSpec:
    """Read-only compiled view of a SystemSpec; shareable across workers."""

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        self.n = spec.n
        self._rows: dict[tuple[str, str], _Row] = {}
        for (s, g), entries in spec.kernel.rows.items():
            cum, acc = [], 0.0
            for e in entries:
                acc += e.prob
                cum.append(acc)
            cum[-1] = 1.0 + 1e-15
            self._rows[(s, g)] = _Row(
                cum=tuple(cum),
                outcomes=tuple(e.outcome for e in entries),
                next_states=tuple(e.next_state for e in entries),
            )
        # Candidate rules per (state, control, action, outcome); count guards
        # stay dynamic, everything else is resolved here.
        self._candidates: dict[tuple[str, str, str, str], tuple] = {}
        for s in spec.states:
            for g in spec.controls_of.get(s, ()):
                row = self._rows.get((s, g))
                if row is None:
                    continue
                for a in spec.actions_of.get(g, ()):
                    for w in set(row.outcomes):
                        if a == NULL_ACTION:
                            self._candidates[(s, g, a, w)] = ()
                            continue
                        self._candidates[(s, g, a, w)] = tuple(
                            (r.when_zero, r.when_pos, r.ops)
                            for r in spec.effect.rules
                            if (r.state in (None, s))
                            and (r.control in (None, g))
                            and (r.action in (None, a))
                            and (r.outcome in (None, w))
                        )

    def controls(self, s: str) -> tuple[str, ...]:
        return self.spec.controls_of[s]

    def actions(self, g: str) -> tuple[str, ...]:
        return self.spec.actions_of[g]

    def apply_effect(self, k: CountVec, s: str, g: str, a: str, w: str) -> CountVec:
        cands = self._candidates.get((s, g, a, w))
        if not cands:
            return k
        for when_zero, when_pos, ops in cands:
            fire = True
            for i in when_zero:
                if k[i] != 0:
                    fire = False
                    break
            if fire:
                for i in when_pos:
                    if k[i] == 0:
                        fire = False
                        break
            if fire:
                out = list(k)
                _apply_ops(out, ops)
                return tuple(out)
        return k

    def sample_slot(self, k: CountVec, s: str, g: str, a: str, rng: RngStream) -> tuple[CountVec, str, str]:
        row = self._rows.get((s, g))
        if row is None:
            raise PreconditionError(f"control {g!r} not available in state {s!r}")
        u = rng.random()
        idx = 0
        cum = row.cum
        while u >= cum[idx]:
            idx += 1
        w = row.outcomes[idx]
        return self.apply_effect(k, s, g, a, w), row.next_states[idx], w

    def step_support(self, k: CountVec, s: str, g: str, a: str):
        """Unmerged (prob, next counts, next state) triples for one (g, a)."""
        row = self._rows[(s, g)]
        prev = 0.0
        out = []
        for c, w, s2 in zip(row.cum, row.outcomes, row.next_states):
            p = c - prev
            prev = c
            out.append((p, self.apply_effect(k, s, g, a, w), s2))
        return out


SlotPolicy = Callable[[int, CountVec, str], tuple[str, str]]


def run_evacuation(
    cspec: CompiledSpec,
    policy,
    k0: CountVec,
    s0: str,
    rng: RngStream,
    max_slots: int = 10**7,
) -> int:
    """Run ``policy`` until the system is empty; returns the slot count.

    ``policy`` is called as policy(t, counts, state) -> (control, action);
    if it has ``reset``/``done`` those hooks are honored (``done`` lets a
    policy extend the run past count zero, e.g. for end-of-stream signals).
    """
    reset = getattr(policy, "reset", None)
    if reset is not None:
        reset()
    done = getattr(policy, "done", None)
    k, s = k0, s0
    t = 0
    while True:
        if done is not None:
            if done(k):
                return t
        elif not any(k):
            return t
        g, a = policy(t, k, s)
        k, s, _ = cspec.sample_slot(k, s, g, a, rng)
        t += 1
        if t >= max_slots:
            raise RuntimeError(f"evacuation did not finish within {max_slots} slots")


def canonical_idle(spec: SystemSpec, s: str) -> tuple[str, str]:
    """Deterministic do-nothing choice: lexicographically first control,
    null action if available (else its first action)."""
    g = sorted(spec.controls_of[s])[0]
    actions = spec.actions_of[g]
    a = NULL_ACTION if NULL_ACTION in actions else sorted(actions)[0]
    return g, a

"""Count-based slotted service system model.

A system is described by a finite set of operational states, per-state
control sets, per-control action sets, a random outcome kernel, and a
deterministic service effect acting on per-class packet counts.  The
kernel depends only on (state, control); actions and counts never change
the outcome distribution.  Effects see the counts and may move packets
between classes or out of the system, but can never create packets.

Identifiers (states, controls, actions, outcomes) are short strings.
Count vectors are plain tuples of nonnegative ints, rate vectors tuples
of nonnegative floats.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

PROB_TOL = 1e-12
NULL_ACTION = "null"
SCENARIO_VERSION = 1

StateId = str
ControlId = str
ActionId = str
OutcomeId = str
CountVec = tuple[int, ...]
RateVec = tuple[float, ...]


class SpecError(ValueError):
    """A system description violates a structural requirement."""


class PreconditionError(SpecError):
    """An operation was called with an invalid (state, control) or
    (control, action) pairing."""


class RangeError(SpecError):
    """A query fell outside the solved table box."""

    def __init__(self, message: str, needed_kmax: CountVec | None = None):
        super().__init__(message)
        self.needed_kmax = needed_kmax


# ---------------------------------------------------------------------------
# vectors

def as_counts(values: Iterable[int | float]) -> CountVec:
    out = []
    for v in values:
        iv = int(v)
        if iv != v or iv < 0:
            raise SpecError(f"count entries must be nonnegative integers, got {v!r}")
        out.append(iv)
    return tuple(out)


def as_rates(values: Iterable[float]) -> RateVec:
    out = []
    for v in values:
        fv = float(v)
        if not math.isfinite(fv) or fv < 0:
            raise SpecError(f"rate entries must be finite and nonnegative, got {v!r}")
        out.append(fv)
    return tuple(out)


def vec_total(k: Sequence[int]) -> int:
    return sum(k)


def vec_add(a: CountVec, b: CountVec) -> CountVec:
    return tuple(x + y for x, y in zip(a, b))


def ceil_scale(t: float, r: RateVec) -> CountVec:
    """Componentwise ceiling of t*r, guarding against float fuzz so that
    e.g. 10 * 0.3 rounds to 3, not 4."""
    return tuple(max(0, math.ceil(t * ri - 1e-9)) for ri in r)


def zeros(n: int) -> CountVec:
    return (0,) * n


# ---------------------------------------------------------------------------
# random streams

class RngStream:
    """Deterministic random stream with hierarchical substream derivation.

    A stream is identified by a seed key string; substreams derive new keys
    from (parent key, label).  Keys are hashed with sha256 to an int seed
    for ``random.Random``, which keeps derivation stable across platforms
    and Python versions.  A stream is single-owner: concurrent work must
    use one substream per worker.
    """

    def __init__(self, seed: int | str, label: str | None = None):
        key = str(seed) if label is None else f"{seed}/{label}"
        self.key = key
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        self._rng = random.Random(int.from_bytes(digest[:8], "big"))

    def substream(self, label: int | str) -> "RngStream":
        return RngStream(self.key, str(label))

    def random(self) -> float:
        return self._rng.random()

    def randint(self, a: int, b: int) -> int:
        return self._rng.randint(a, b)

    def sample_pmf(self, values: Sequence, cumprobs: Sequence[float]):
        """Sample from a discrete pmf given its cumulative probabilities."""
        u = self._rng.random()
        for v, c in zip(values, cumprobs):
            if u < c:
                return v
        return values[-1]


# ---------------------------------------------------------------------------
# transition kernel

@dataclass(frozen=True)
class KernelEntry:
    prob: float
    outcome: OutcomeId
    next_state: StateId


@dataclass(frozen=True)
class TransitionKernel:
    """Rows map (state, control) to a distribution over (outcome, next state).

    Rows are stored normalized; ``build_kernel`` renormalizes masses within
    PROB_TOL of 1 and rejects anything farther off.
    """

    rows: Mapping[tuple[StateId, ControlId], tuple[KernelEntry, ...]]

    def row(self, s: StateId, g: ControlId) -> tuple[KernelEntry, ...]:
        try:
            return self.rows[(s, g)]
        except KeyError:
            raise PreconditionError(f"no kernel row for state={s!r}, control={g!r}")


def build_kernel(
    rows: Mapping[tuple[StateId, ControlId], Iterable[tuple[float, OutcomeId, StateId]]],
) -> TransitionKernel:
    """Validate, renormalize and freeze a kernel row specification."""
    out: dict[tuple[StateId, ControlId], tuple[KernelEntry, ...]] = {}
    for key, entries in rows.items():
        entries = list(entries)
        if not entries:
            raise SpecError(f"kernel row {key} is empty")
        mass = 0.0
        for p, _, _ in entries:
            if p < 0:
                raise SpecError(f"kernel row {key} has negative probability {p}")
            mass += p
        if abs(mass - 1.0) > PROB_TOL:
            raise SpecError(f"kernel row {key} mass {mass!r} differs from 1 by more than {PROB_TOL}")
        out[key] = tuple(KernelEntry(p / mass, w, s2) for p, w, s2 in entries)
    return TransitionKernel(rows=out)


# ---------------------------------------------------------------------------
# service effects

@dataclass(frozen=True)
class Op:
    """One count operation inside an effect rule.

    kind "depart": remove up to ``count`` packets from class ``cls``
    kind "move":   transfer up to ``count`` packets from ``cls`` to ``dst``
    kind "clear":  zero every class
    kind "serve_batch": batch service with a claimed duration -- removes up
        to ``count`` packets from ``cls``, capped at mod + (k mod mod),
        but only when the claimed duration matches the duration implied by
        the current count, max(k // mod, 1).  A mismatched claim is a no-op,
        which makes dishonest duration claims pure waste.
    ``count`` of None means "all available".
    """

    kind: str
    cls: int = 0
    dst: int | None = None
    count: int | None = 1
    mod: int = 0
    claim: int = 0


@dataclass(frozen=True)
class EffectRule:
    """Matcher plus operations; None fields match anything.

    ``when_zero`` / ``when_pos`` add count guards: the rule only fires if
    the listed classes are zero / positive.  First matching rule wins.
    """

    state: StateId | None = None
    control: ControlId | None = None
    action: ActionId | None = None
    outcome: OutcomeId | None = None
    when_zero: tuple[int, ...] = ()
    when_pos: tuple[int, ...] = ()
    ops: tuple[Op, ...] = ()

    def matches(self, k: Sequence[int], s: StateId, g: ControlId, a: ActionId, w: OutcomeId) -> bool:
        if self.state is not None and self.state != s:
            return False
        if self.control is not None and self.control != g:
            return False
        if self.action is not None and self.action != a:
            return False
        if self.outcome is not None and self.outcome != w:
            return False
        for i in self.when_zero:
            if k[i] != 0:
                return False
        for i in self.when_pos:
            if k[i] == 0:
                return False
        return True


def _apply_ops(k: list[int], ops: tuple[Op, ...]) -> None:
    for op in ops:
        if op.kind == "depart":
            avail = k[op.cls]
            qty = avail if op.count is None else min(op.count, avail)
            k[op.cls] -= qty
        elif op.kind == "move":
            avail = k[op.cls]
            qty = avail if op.count is None else min(op.count, avail)
            k[op.cls] -= qty
            k[op.dst] += qty
        elif op.kind == "clear":
            for i in range(len(k)):
                k[i] = 0
        elif op.kind == "serve_batch":
            c = k[op.cls]
            if c == 0:
                continue
            implied = max(c // op.mod, 1)
            if implied != op.claim:
                continue
            allowed = op.mod + (c % op.mod) if c >= op.mod else c
            qty = allowed if op.count is None else min(op.count, allowed)
            k[op.cls] -= min(qty, c)
        else:
            raise SpecError(f"unknown effect op kind {op.kind!r}")


@dataclass(frozen=True)
class ServiceEffect:
    """Deterministic count transformation for each (k, s, g, a, w).

    The reserved action ``null`` is always the identity on counts,
    regardless of the rule table.
    """

    rules: tuple[EffectRule, ...] = ()

    def apply(self, k: CountVec, s: StateId, g: ControlId, a: ActionId, w: OutcomeId) -> CountVec:
        if a == NULL_ACTION:
            return k
        for rule in self.rules:
            if rule.matches(k, s, g, a, w):
                out = list(k)
                _apply_ops(out, rule.ops)
                return tuple(out)
        return k


# ---------------------------------------------------------------------------
# system spec

@dataclass(frozen=True)
class SystemSpec:
    """Immutable description of a count-based slotted system.

    Safe to share across worker processes/threads once constructed.
    """

    name: str
    n: int
    states: tuple[StateId, ...]
    controls_of: Mapping[StateId, tuple[ControlId, ...]]
    actions_of: Mapping[ControlId, tuple[ActionId, ...]]
    kernel: TransitionKernel
    effect: ServiceEffect
    initial_state: StateId
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"c{i + 1}" for i in range(self.n)))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, location: str, message: str) -> None:
        self.violations.append(f"{location}: {message}")

    def __str__(self) -> str:
        return "ok" if self.ok else "\n".join(self.violations)


_PROBE_LEVELS = (0, 1, 3)


def validate_spec(spec: SystemSpec) -> ValidationReport:
    """Check every structural invariant; returns a report, never raises.

    An empty report means the spec is well-formed: every state has a
    control, every control an action, kernel rows exist and carry unit
    mass, next states are known, and effects never create packets nor
    drive counts negative (probed on a small grid of count vectors).
    """
    rep = ValidationReport()
    if spec.n < 1:
        rep.add("spec", f"n must be >= 1, got {spec.n}")
    if not spec.states:
        rep.add("states", "empty state set")
    if spec.initial_state not in spec.states:
        rep.add("initial_state", f"{spec.initial_state!r} not in states")
    if len(spec.class_names) != spec.n:
        rep.add("class_names", f"expected {spec.n} names, got {len(spec.class_names)}")

    for s in spec.states:
        controls = spec.controls_of.get(s, ())
        if not controls:
            rep.add(f"state {s!r}", "no controls")
        for g in controls:
            actions = spec.actions_of.get(g, ())
            if not actions:
                rep.add(f"control {g!r}", "no actions")
            key = (s, g)
            if key not in spec.kernel.rows:
                rep.add(f"kernel[{key}]", "missing row")
                continue
            entries = spec.kernel.rows[key]
            mass = sum(e.prob for e in entries)
            if abs(mass - 1.0) > PROB_TOL:
                rep.add(f"kernel[{key}]", f"row mass {mass!r} != 1")
            for e in entries:
                if e.prob < 0:
                    rep.add(f"kernel[{key}]", f"negative probability {e.prob}")
                if e.next_state not in spec.states:
                    rep.add(f"kernel[{key}]", f"unknown next state {e.next_state!r}")

    # Probe effects: never negative, never increasing the total, null = identity.
    probes = [tuple(lvl for _ in range(spec.n)) for lvl in _PROBE_LEVELS]
    if spec.n > 1:
        probes.append(tuple(2 if i == 0 else 1 for i in range(spec.n)))
    for s in spec.states:
        for g in spec.controls_of.get(s, ()):
            if (s, g) not in spec.kernel.rows:
                continue
            outcomes = {e.outcome for e in spec.kernel.rows[(s, g)]}
            for a in spec.actions_of.get(g, ()):
                for w in outcomes:
                    for k in probes:
                        k2 = spec.effect.apply(k, s, g, a, w)
                        loc = f"effect[s={s},g={g},a={a},w={w}]"
                        if any(x < 0 for x in k2):
                            rep.add(loc, f"negative count from {k}: {k2}")
                        if sum(k2) > sum(k):
                            rep.add(loc, f"total count increased from {k} to {k2}")
                        if a == NULL_ACTION and k2 != k:
                            rep.add(loc, f"null action changed counts {k} -> {k2}")
    return rep


def require_valid(spec: SystemSpec) -> None:
    rep = validate_spec(spec)
    if not rep.ok:
        raise SpecError(f"invalid spec {spec.name!r}:\n{rep}")


def check_pairing(spec: SystemSpec, s: StateId, g: ControlId, a: ActionId) -> None:
    if g not in spec.controls_of.get(s, ()):
        raise PreconditionError(f"control {g!r} not available in state {s!r}")
    if a not in spec.actions_of.get(g, ()):
        raise PreconditionError(f"action {a!r} not available under control {g!r}")


def step_distribution(
    spec: SystemSpec, k: CountVec, s: StateId, g: ControlId, a: ActionId
) -> list[tuple[tuple[CountVec, StateId], float]]:
    """Distribution over next (counts, state), outcomes marginalized out.

    Entries with identical (counts, state) are merged; output is sorted
    for determinism and sums to 1 within PROB_TOL.
    """
    check_pairing(spec, s, g, a)
    merged: dict[tuple[CountVec, StateId], float] = {}
    for e in spec.kernel.row(s, g):
        k2 = spec.effect.apply(k, s, g, a, e.outcome)
        key = (k2, e.next_state)
        merged[key] = merged.get(key, 0.0) + e.prob
    return sorted(merged.items())


def simulate_slot(
    spec: SystemSpec, k: CountVec, s: StateId, g: ControlId, a: ActionId, stream: RngStream
) -> tuple[CountVec, StateId, OutcomeId]:
    """Sample one slot; bit-exact reproducible given the stream state."""
    check_pairing(spec, s, g, a)
    entries = spec.kernel.row(s, g)
    u = stream.random()
    acc = 0.0
    chosen = entries[-1]
    for e in entries:
        acc += e.prob
        if u < acc:
            chosen = e
            break
    k2 = spec.effect.apply(k, s, g, a, chosen.outcome)
    return k2, chosen.next_state, chosen.outcome


# ---------------------------------------------------------------------------
# scenario files

def _op_to_json(op: Op) -> dict:
    d: dict = {"op": op.kind}
    if op.kind in ("depart", "move", "serve_batch"):
        d["cls"] = op.cls
        d["count"] = "all" if op.count is None else op.count
    if op.kind == "move":
        d["dst"] = op.dst
    if op.kind == "serve_batch":
        d["mod"] = op.mod
        d["claim"] = op.claim
    return d


def _op_from_json(d: dict) -> Op:
    count = d.get("count", 1)
    return Op(
        kind=d["op"],
        cls=d.get("cls", 0),
        dst=d.get("dst"),
        count=None if count == "all" else int(count),
        mod=d.get("mod", 0),
        claim=d.get("claim", 0),
    )


def spec_to_scenario(spec: SystemSpec) -> dict:
    """Serialize to the documented scenario JSON structure (version 1)."""
    kernel_rows = []
    for (s, g), entries in sorted(spec.kernel.rows.items()):
        kernel_rows.append(
            {
                "state": s,
                "control": g,
                "entries": [
                    {"prob": e.prob, "outcome": e.outcome, "next_state": e.next_state}
                    for e in entries
                ],
            }
        )
    effects = []
    for r in spec.effect.rules:
        effects.append(
            {
                "match": {
                    "state": r.state,
                    "control": r.control,
                    "action": r.action,
                    "outcome": r.outcome,
                    "when_zero": list(r.when_zero),
                    "when_pos": list(r.when_pos),
                },
                "ops": [_op_to_json(op) for op in r.ops],
            }
        )
    return {
        "spec_version": SCENARIO_VERSION,
        "name": spec.name,
        "n": spec.n,
        "class_names": list(spec.class_names),
        "states": list(spec.states),
        "initial_state": spec.initial_state,
        "controls": {s: list(gs) for s, gs in spec.controls_of.items()},
        "actions": {g: list(a_) for g, a_ in spec.actions_of.items()},
        "kernel": kernel_rows,
        "effects": effects,
    }


def scenario_to_spec(doc: dict) -> SystemSpec:
    """Parse a scenario document; probabilities may be doubles or decimal strings."""
    version = doc.get("spec_version")
    if version != SCENARIO_VERSION:
        raise SpecError(f"unsupported spec_version {version!r}, expected {SCENARIO_VERSION}")
    rows: dict[tuple[StateId, ControlId], list[tuple[float, OutcomeId, StateId]]] = {}
    for row in doc["kernel"]:
        key = (row["state"], row["control"])
        rows.setdefault(key, []).extend(
            (float(e["prob"]), e["outcome"], e["next_state"]) for e in row["entries"]
        )
    rules = []
    for eff in doc.get("effects", []):
        m = eff.get("match", {})
        rules.append(
            EffectRule(
                state=m.get("state"),
                control=m.get("control"),
                action=m.get("action"),
                outcome=m.get("outcome"),
                when_zero=tuple(m.get("when_zero", ())),
                when_pos=tuple(m.get("when_pos", ())),
                ops=tuple(_op_from_json(o) for o in eff.get("ops", ())),
            )
        )
    return SystemSpec(
        name=doc.get("name", "scenario"),
        n=int(doc["n"]),
        states=tuple(doc["states"]),
        controls_of={s: tuple(gs) for s, gs in doc["controls"].items()},
        actions_of={g: tuple(a_) for g, a_ in doc["actions"].items()},
        kernel=build_kernel(rows),
        effect=ServiceEffect(rules=tuple(rules)),
        initial_state=doc["initial_state"],
        class_names=tuple(doc.get("class_names", ())),
    )


def save_scenario(spec: SystemSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec_to_scenario(spec), fh, indent=2, sort_keys=False)
        fh.write("\n")


def load_scenario(path) -> SystemSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_to_spec(json.load(fh))

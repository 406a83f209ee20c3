"""Exact minimal expected evacuation times by dynamic programming.

The value at (counts k, state s) is the minimal expected number of slots
until the system is empty, cost 1 per slot, minimized over (control,
action) choices -- a stochastic shortest path problem on the count box.
Effects never increase the total count, so values are computed level by
level on the total; within a level (self-loops and count-preserving
transfers) a Gauss-Seidel sweep with analytic self-loop resolution runs
to a residual tolerance.

The table's ``critical`` map is the max over states; by convention the
empty configuration costs one slot (an empty system still advances time),
so critical(0) = 1 while per-state values at zero are 0 and not stored.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .model import (
    CountVec,
    RangeError,
    RngStream,
    SpecError,
    StateId,
    SystemSpec,
    require_valid,
    vec_total,
    zeros,
)
from .runtime import CompiledSpec, canonical_idle, run_evacuation

DEFAULT_TOL = 1e-10
DEFAULT_MAX_SWEEPS = 10**6
TIE_TOL = 1e-9
MAX_CELLS = 2 * 10**6


class EvacSolveError(RuntimeError):
    """Within-level iteration failed to converge; the configuration at the
    named level is effectively not evacuable (infinite expected time)."""

    def __init__(self, level: int, residual: float):
        super().__init__(
            f"no convergence at total-count level {level} (residual {residual:.3e}); "
            "the model appears not to be evacuable from some configuration"
        )
        self.level = level
        self.residual = residual


@dataclass
class EvacTable:
    """Dense evacuation-time table over the box [0, kmax].

    ``values``/``argmin`` also cover cells outside the box that are
    reachable from it (count-preserving transfers can leave the box);
    ``critical`` is restricted to the box, with critical(0) = 1.
    Completed tables are immutable by convention and safe to share.
    """

    spec: SystemSpec
    kmax: CountVec
    tol: float
    values: dict[tuple[CountVec, StateId], float]
    argmin: dict[tuple[CountVec, StateId], tuple[str, str]]
    critical: dict[CountVec, float]

    def in_box(self, k: CountVec) -> bool:
        return len(k) == len(self.kmax) and all(x <= m for x, m in zip(k, self.kmax))

    def value(self, k: CountVec, s: StateId) -> float:
        if not any(k):
            return 0.0
        try:
            return self.values[(k, s)]
        except KeyError:
            raise RangeError(
                f"cell (k={k}, s={s}) outside solved range; re-solve with kmax >= {k}",
                needed_kmax=k,
            )

    def critical_at(self, k: CountVec) -> float:
        try:
            return self.critical[k]
        except KeyError:
            raise RangeError(
                f"count vector {k} outside table box {self.kmax}; "
                f"re-solve with kmax >= {k}",
                needed_kmax=k,
            )

    def box_vectors(self) -> list[CountVec]:
        return sorted(self.critical.keys())


def _box_cells(kmax: CountVec) -> list[CountVec]:
    ranges = [range(m + 1) for m in kmax]
    return [tuple(k) for k in itertools.product(*ranges)]


def default_kmax(spec: SystemSpec, per_class: int = 12, max_cells: int = MAX_CELLS) -> CountVec:
    """Componentwise cap of ``per_class``, shrunk until the dense box fits
    the cell budget."""
    cap = per_class
    while cap > 1:
        cells = (cap + 1) ** spec.n * len(spec.states)
        if cells <= max_cells:
            break
        cap -= 1
    return tuple(cap for _ in range(spec.n))


def solve_evac_table(
    spec: SystemSpec,
    kmax: CountVec | None = None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    mode: str = "gauss-seidel",
) -> EvacTable:
    """Solve V(k,s) = 1 + min_(g,a) E[V(k',s')] with V(0,.) = 0.

    Computation proceeds over the reachable closure of the requested box
    (transfers may move counts off the box; totals never grow, so the
    closure is finite).  ``mode`` selects "gauss-seidel" (in-place, fast)
    or "jacobi" (synchronous sweeps, order-independent and therefore
    trivially parallelizable); both converge to the same values within tol.

    The argmin is recorded from converged values with a deterministic
    tie-break: lowest control id, then lowest action id.
    """
    require_valid(spec)
    if kmax is None:
        kmax = default_kmax(spec)
    if len(kmax) != spec.n or any(m < 0 for m in kmax):
        raise SpecError(f"kmax {kmax} must be {spec.n} nonnegative entries")
    if mode not in ("gauss-seidel", "jacobi"):
        raise SpecError(f"unknown mode {mode!r}")

    cspec = CompiledSpec(spec)
    states = spec.states

    # Reachable closure, grouped by total count.
    seen: set[tuple[CountVec, StateId]] = set()
    frontier: list[tuple[CountVec, StateId]] = []
    for k in _box_cells(kmax):
        for s in states:
            cell = (k, s)
            seen.add(cell)
            frontier.append(cell)
    if len(seen) > MAX_CELLS:
        raise SpecError(f"box {kmax} x {len(states)} states exceeds {MAX_CELLS} cells")
    transitions: dict[tuple[CountVec, StateId], list] = {}
    while frontier:
        k, s = frontier.pop()
        cands = []
        for g in sorted(spec.controls_of[s]):
            for a in sorted(spec.actions_of[g]):
                support = cspec.step_support(k, s, g, a)
                cands.append((g, a, support))
                for _, k2, s2 in support:
                    cell2 = (k2, s2)
                    if cell2 not in seen:
                        seen.add(cell2)
                        frontier.append(cell2)
        transitions[(k, s)] = cands

    by_level: dict[int, list[tuple[CountVec, StateId]]] = {}
    for cell in transitions:
        by_level.setdefault(vec_total(cell[0]), []).append(cell)

    values: dict[tuple[CountVec, StateId], float] = {}
    argmin: dict[tuple[CountVec, StateId], tuple[str, str]] = {}

    def value_of(cell) -> float:
        if not any(cell[0]):
            return 0.0
        return values[cell]

    for level in sorted(by_level):
        if level == 0:
            continue
        cells = sorted(by_level[level])
        # Fold resolved mass into constants; keep same-level refs symbolic.
        compiled = []
        for cell in cells:
            row = []
            for g, a, support in transitions[cell]:
                const = 1.0
                self_mass = 0.0
                links: list[tuple[float, tuple[CountVec, StateId]]] = []
                for p, k2, s2 in support:
                    if p <= 0.0:
                        continue
                    dest = (k2, s2)
                    if vec_total(k2) < level or not any(k2):
                        const += p * value_of(dest)
                    elif dest == cell:
                        self_mass += p
                    else:
                        links.append((p, dest))
                row.append((g, a, const, self_mass, links))
            compiled.append((cell, row))

        cur = {cell: 0.0 for cell in cells}
        residual = math.inf
        for _ in range(max_sweeps):
            residual = 0.0
            if mode == "jacobi":
                prev = dict(cur)
                src = prev
            else:
                src = cur
            for cell, row in compiled:
                best = math.inf
                for g, a, const, self_mass, links in row:
                    if self_mass >= 1.0 - 1e-15:
                        continue
                    q = const
                    for p, dest in links:
                        q += p * src[dest]
                    q /= 1.0 - self_mass
                    if q < best:
                        best = q
                delta = abs(best - cur[cell])
                if delta > residual:
                    residual = delta
                cur[cell] = best
            if residual < tol:
                break
        else:
            raise EvacSolveError(level, residual)
        if any(not math.isfinite(v) for v in cur.values()):
            raise EvacSolveError(level, math.inf)
        values.update(cur)

        # Argmin from converged values, sorted ids, ties within TIE_TOL.
        for cell, row in compiled:
            best_q = math.inf
            best_ga = None
            for g, a, const, self_mass, links in row:
                if self_mass >= 1.0 - 1e-15:
                    continue
                q = const
                for p, dest in links:
                    q += p * cur[dest]
                q /= 1.0 - self_mass
                if best_ga is None or q < best_q - TIE_TOL * max(1.0, abs(best_q)):
                    best_q = q
                    best_ga = (g, a)
            argmin[cell] = best_ga if best_ga is not None else ("?", "?")

    critical: dict[CountVec, float] = {zeros(spec.n): 1.0}
    for k in _box_cells(kmax):
        if not any(k):
            continue
        critical[k] = max(values[(k, s)] for s in states)

    return EvacTable(spec=spec, kmax=kmax, tol=tol, values=values, argmin=argmin, critical=critical)


# ---------------------------------------------------------------------------
# structural checks on a solved table

@dataclass
class LipschitzConstants:
    """Bounded-decrease and unit-step constants of the critical function.

    D0: largest observed one-packet decrease of any per-state value
        (0 for monotone tables); D1: max critical value at a unit vector;
    D = max(D0, D1) bounds every unit step, hence |f(k) - f(m)| <=
    D * sum|k_i - m_i|.  ``worst_ratio`` is the largest observed
    |f(k)-f(m)| / (D * sum|k_i-m_i|) over the box.
    """

    D0: float
    D1: float
    D: float
    worst_ratio: float


@dataclass
class LinearBoundFit:
    """Affine bound critical(k) <= C1 * sum(k) + C0 fitted from the table.

    ``max_violation`` <= 0 certifies the bound on the box.  U is the max
    critical value over 0/1 vectors; ``u_max_violation`` is the worst
    excess of critical(k) over U * max_i(k_i) (<= 0 when that bound holds).
    """

    C1: float
    C0: float
    max_violation: float
    U: float
    u_max_violation: float


def check_subadditivity(table: EvacTable, slack: float = 1e-9) -> list[tuple[CountVec, CountVec, float]]:
    """All (k, m) box pairs with critical(k+m) > critical(k) + critical(m) + slack.

    An empty list certifies subadditivity on the box (k + m <= kmax
    enumerated exhaustively, zero vectors included).
    """
    violations = []
    box = table.box_vectors()
    crit = table.critical
    for k in box:
        for m in box:
            km = tuple(a + b for a, b in zip(k, m))
            if km not in crit:
                continue
            gap = crit[km] - crit[k] - crit[m]
            if gap > slack:
                violations.append((k, m, gap))
    return violations


def check_bounded_decrease(table: EvacTable) -> LipschitzConstants:
    """Largest one-packet decrease D0, unit values D1, and the implied
    unit-step constant D, verified tablewide against the critical function."""
    spec = table.spec
    n = spec.n
    d0 = 0.0
    for (k, s), v in table.values.items():
        if not table.in_box(k):
            continue
        for i in range(n):
            k2 = tuple(x + 1 if j == i else x for j, x in enumerate(k))
            v2 = table.values.get((k2, s))
            if v2 is not None:
                d0 = max(d0, v - v2)
    # One-packet decrease from the empty configuration (value 0 by definition).
    z = zeros(n)
    for s in spec.states:
        for i in range(n):
            ei = tuple(1 if j == i else 0 for j in range(n))
            v2 = table.values.get((ei, s))
            if v2 is not None:
                d0 = max(d0, 0.0 - v2)
    d1 = 0.0
    for i in range(n):
        ei = tuple(1 if j == i else 0 for j in range(n))
        if ei in table.critical:
            d1 = max(d1, table.critical[ei])
    d = max(d0, d1)

    worst = 0.0
    box = table.box_vectors()
    crit = table.critical
    if d > 0:
        for k in box:
            fk = crit[k]
            for m in box:
                if m <= k:
                    continue
                dist = sum(abs(a - b) for a, b in zip(k, m))
                if dist == 0:
                    continue
                ratio = abs(fk - crit[m]) / (d * dist)
                if ratio > worst:
                    worst = ratio
    return LipschitzConstants(D0=d0, D1=d1, D=d, worst_ratio=worst)


def check_linear_bound(table: EvacTable) -> LinearBoundFit:
    """Certify the affine service bound on the critical table.

    C1 is the largest unit-step increase of critical along any class,
    C0 = 1 (the empty-system slot).  Also checks the 0/1-envelope bound
    critical(k) <= U * max_i k_i.
    """
    n = table.spec.n
    crit = table.critical
    box = table.box_vectors()
    c1 = 0.0
    for k in box:
        fk = crit[k]
        for i in range(n):
            k2 = tuple(x + 1 if j == i else x for j, x in enumerate(k))
            if k2 in crit:
                c1 = max(c1, crit[k2] - fk)
    c0 = 1.0
    max_violation = -math.inf
    for k in box:
        max_violation = max(max_violation, crit[k] - (c1 * sum(k) + c0))

    u = 0.0
    for k in box:
        if all(x in (0, 1) for x in k) and any(k):
            u = max(u, crit[k])
    u_violation = -math.inf
    for k in box:
        if not any(k):
            continue
        u_violation = max(u_violation, crit[k] - u * max(k))
    return LinearBoundFit(C1=c1, C0=c0, max_violation=max_violation, U=u, u_max_violation=u_violation)


# ---------------------------------------------------------------------------
# stationary optimal policy

@dataclass
class EvacPolicy:
    """Stationary (counts, state) -> (control, action) map from the table's
    argmin.  ``clamped`` extends beyond the box by projecting counts onto
    it, which keeps long simulations total (used as the oversize-epoch
    fallback; it realizes a linear evacuation bound on the shipped models)."""

    table: EvacTable

    def __call__(self, k: CountVec, s: StateId) -> tuple[str, str]:
        if not self.table.in_box(k):
            raise RangeError(
                f"counts {k} outside policy box {self.table.kmax}", needed_kmax=k
            )
        if not any(k):
            return canonical_idle(self.table.spec, s)
        got = self.table.argmin.get((k, s))
        if got is None:
            raise RangeError(f"cell (k={k}, s={s}) not in table", needed_kmax=k)
        return got

    def clamped(self, k: CountVec, s: StateId) -> tuple[str, str]:
        kc = tuple(min(x, m) for x, m in zip(k, self.table.kmax))
        if not any(kc):
            return canonical_idle(self.table.spec, s)
        got = self.table.argmin.get((kc, s))
        if got is None:
            return canonical_idle(self.table.spec, s)
        return got

    def as_slot_policy(self):
        def decide(t: int, k: CountVec, s: StateId) -> tuple[str, str]:
            return self.clamped(k, s)

        return decide


def extract_optimal_policy(table: EvacTable) -> EvacPolicy:
    return EvacPolicy(table=table)


def simulate_policy_mean(
    table: EvacTable,
    k0: CountVec,
    s0: StateId,
    reps: int,
    seed: int | str,
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the table policy's evacuation
    time from (k0, s0); the independent check that argmin attains values."""
    cspec = CompiledSpec(table.spec)
    policy = extract_optimal_policy(table)
    decide = policy.as_slot_policy()
    stream = RngStream(seed, "policy-eval")
    total = 0.0
    total_sq = 0.0
    for i in range(reps):
        t = run_evacuation(cspec, decide, k0, s0, stream.substream(i))
        total += t
        total_sq += t * t
    mean = total / reps
    var = max(total_sq / reps - mean * mean, 0.0)
    return mean, math.sqrt(var / reps)

"""Reward machine types, guard expressions and single-step semantics.

Four machine kinds share one representation: Boolean, numeric, agenda and
coupled. Agenda and coupled machines carry a :class:`StateLabel` for every
state; coupled machines additionally partition their states into groups that
are occupied concurrently.
"""
from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Optional, Union


class RMError(Exception):
    """Base class for reward machine errors."""


class GuardError(RMError):
    """A guard references a feature the truth assignment does not declare."""


class DomainError(RMError):
    """A numeric value lies outside its declared domain."""


class DeterminismError(RMError):
    """More than one outgoing guard fired in a single step."""


class NumericFeatureValue(enum.Enum):
    DECREASED = "dec"
    AT_BOUND = "done"
    NO_PROGRESS = "live"

    def __repr__(self):
        return f"<{self.value}>"


DEC = NumericFeatureValue.DECREASED
DONE = NumericFeatureValue.AT_BOUND
LIVE = NumericFeatureValue.NO_PROGRESS


class Kind(enum.Enum):
    BOOLEAN = "boolean"
    NUMERIC = "numeric"
    AGENDA = "agenda"
    COUPLED = "coupled"


@dataclass(frozen=True)
class NumericVariable:
    """A bounded counter; ``lower`` is the goal value."""

    name: str
    lower: int
    upper: int

    def __post_init__(self):
        if self.upper < self.lower:
            raise DomainError(f"empty domain for {self.name}: {self.lower}..{self.upper}")

    @property
    def domain(self) -> range:
        return range(self.lower, self.upper + 1)


def eval_numeric_feature(w_prev: int, w_curr: int, w_lb: int,
                         domain: Optional[range] = None) -> NumericFeatureValue:
    """Classify the change of a lower-bounded counter between two observations."""
    if domain is not None and (w_prev not in domain or w_curr not in domain):
        raise DomainError(f"values ({w_prev}, {w_curr}) outside {domain}")
    if w_curr < w_lb or w_prev < w_lb:
        raise DomainError(f"values ({w_prev}, {w_curr}) below bound {w_lb}")
    if w_curr == w_lb:
        return DONE
    if w_prev > w_curr:
        return DEC
    return LIVE


# -- guards ------------------------------------------------------------------

class Guard:
    """Base class of the guard expression tree."""

    __slots__ = ()

    def atoms(self):
        raise NotImplementedError

    def __and__(self, other):
        return And((self, other))

    def __or__(self, other):
        return Or((self, other))


@dataclass(frozen=True)
class Const(Guard):
    value: bool

    def atoms(self):
        return ()

    def __str__(self):
        return "true" if self.value else "false"


TRUE = Const(True)
FALSE = Const(False)


@dataclass(frozen=True)
class Lit(Guard):
    """A Boolean feature, possibly negated."""

    name: str
    positive: bool = True

    def atoms(self):
        return (self,)

    def __invert__(self):
        return Lit(self.name, not self.positive)

    def __str__(self):
        return self.name if self.positive else "!" + self.name


@dataclass(frozen=True)
class NumAtom(Guard):
    """Test of a numeric feature against one of its three values."""

    var: str
    value: NumericFeatureValue

    def atoms(self):
        return (self,)

    def __str__(self):
        return f"{self.value.value}({self.var})"


@dataclass(frozen=True)
class And(Guard):
    items: tuple

    def atoms(self):
        return tuple(a for g in self.items for a in g.atoms())

    def __str__(self):
        return " & ".join(f"({g})" if isinstance(g, Or) else str(g) for g in self.items)


@dataclass(frozen=True)
class Or(Guard):
    items: tuple

    def atoms(self):
        return tuple(a for g in self.items for a in g.atoms())

    def __str__(self):
        return " | ".join(str(g) for g in self.items)


def conj(items: Iterable[Guard]) -> Guard:
    items = tuple(items)
    if not items:
        return TRUE
    if len(items) == 1:
        return items[0]
    return And(items)


def disj(items: Iterable[Guard]) -> Guard:
    items = tuple(items)
    if not items:
        return FALSE
    if len(items) == 1:
        return items[0]
    return Or(items)


class TruthAssignment:
    """Values of every declared Boolean and numeric feature for one step.

    Hashable, so step results can be memoised per machine.
    """

    __slots__ = ("boolean", "numeric", "_key", "_hash")

    def __init__(self, boolean: Mapping[str, bool] = (), numeric: Mapping[str, NumericFeatureValue] = ()):
        b = dict(boolean)
        n = dict(numeric)
        self.boolean = MappingProxyType(b)
        self.numeric = MappingProxyType(n)
        self._key = (frozenset(b.items()), frozenset(n.items()))
        self._hash = hash(self._key)

    @classmethod
    def of(cls, features: Iterable[str], true: Iterable[str] = (), numeric=()):
        true = set(true)
        return cls({f: f in true for f in features}, numeric)

    @property
    def true_features(self) -> frozenset:
        return frozenset(k for k, v in self.boolean.items() if v)

    def __eq__(self, other):
        return isinstance(other, TruthAssignment) and self._key == other._key

    def __hash__(self):
        return self._hash

    def __repr__(self):
        parts = [f"{k}:{v}" for k, v in sorted(self.boolean.items())]
        parts += [f"{k}:{v.value}" for k, v in sorted(self.numeric.items())]
        return "{" + ", ".join(parts) + "}"


def eval_guard(g: Guard, t: TruthAssignment) -> bool:
    if isinstance(g, Lit):
        try:
            v = t.boolean[g.name]
        except KeyError:
            raise GuardError(f"feature {g.name!r} not declared in assignment") from None
        return v if g.positive else not v
    if isinstance(g, NumAtom):
        try:
            v = t.numeric[g.var]
        except KeyError:
            raise GuardError(f"numeric feature {g.var!r} not declared in assignment") from None
        return v is g.value
    if isinstance(g, And):
        return all(eval_guard(x, t) for x in g.items)
    if isinstance(g, Or):
        return any(eval_guard(x, t) for x in g.items)
    if isinstance(g, Const):
        return g.value
    raise TypeError(f"not a guard: {g!r}")


def to_dnf(g: Guard) -> list:
    """Disjunctive normal form as a list of literal tuples.

    Guards are positive combinations of literals, so distribution suffices.
    """
    if isinstance(g, (Lit, NumAtom)):
        return [(g,)]
    if isinstance(g, Const):
        return [()] if g.value else []
    if isinstance(g, Or):
        return [c for x in g.items for c in to_dnf(x)]
    if isinstance(g, And):
        out = [()]
        for x in g.items:
            out = [a + b for a in out for b in to_dnf(x)]
        return out
    raise TypeError(f"not a guard: {g!r}")


# -- machines ----------------------------------------------------------------

@dataclass(frozen=True)
class StateLabel:
    """Label ``<d, T, x>`` of an agenda or coupled machine state.

    ``objective`` is the agenda itself (a frozenset), a single subtask or
    Boolean feature name, or ``None`` for terminal states.
    """

    depth: int
    agenda: frozenset
    objective: Union[frozenset, str, None] = None

    @property
    def whole_agenda(self) -> bool:
        return isinstance(self.objective, frozenset)

    def sort_key(self):
        obj = self.objective
        if obj is None:
            o = (0, ())
        elif isinstance(obj, frozenset):
            o = (1, tuple(sorted(obj)))
        else:
            o = (2, (obj,))
        return (self.depth, tuple(sorted(self.agenda)), o)

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()

    def __str__(self):
        t = "{" + ",".join(sorted(self.agenda)) + "}"
        if self.objective is None:
            x = ""
        elif isinstance(self.objective, frozenset):
            x = "{" + ",".join(sorted(self.objective)) + "}"
        else:
            x = self.objective
        return f"{self.depth}{t}{x}"


@dataclass(frozen=True)
class Transition:
    source: str
    guard: Guard
    reward: Fraction
    target: str

    def __str__(self):
        return f"{self.source} -> {self.target} [{self.guard}] {self.reward}"


class StepResult(NamedTuple):
    next: object
    reward: Fraction
    fired: Optional[Transition]


@dataclass(frozen=True, eq=False)
class RewardMachine:
    """Finite automaton with guarded, rewarded transitions.

    ``exclusive`` lists feature sets of which at most one is true per step
    (e.g. the pick-up events of one numeric variable); the determinism check
    only enumerates assignments that respect them.
    """

    states: tuple
    initial: str
    terminal: tuple
    transitions: tuple
    kind: Kind = Kind.BOOLEAN
    features: tuple = ()
    numerics: tuple = ()
    labels: Optional[Mapping[str, StateLabel]] = None
    groups: Optional[tuple] = None
    exclusive: tuple = ()
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        out = {u: [] for u in itertools.chain(self.states, self.terminal)}
        for tr in self.transitions:
            out.setdefault(tr.source, []).append(tr)
        object.__setattr__(self, "_out", MappingProxyType({k: tuple(v) for k, v in out.items()}))
        group_of = {}
        if self.groups is not None:
            for g in self.groups:
                for u in g:
                    group_of[u] = tuple(g)
        for u in itertools.chain(self.states, self.terminal):
            group_of.setdefault(u, (u,))
        object.__setattr__(self, "_group_of", MappingProxyType(group_of))
        object.__setattr__(self, "_terminal_set", frozenset(self.terminal))

    # structure helpers

    @property
    def all_states(self) -> tuple:
        return tuple(self.states) + tuple(self.terminal)

    def outgoing(self, u: str) -> tuple:
        return self._out.get(u, ())

    def is_terminal(self, u) -> bool:
        if isinstance(u, tuple):
            return len(u) == 1 and u[0] in self._terminal_set
        return u in self._terminal_set

    def group_of(self, u: str) -> tuple:
        return self._group_of[u]

    @property
    def initial_group(self) -> tuple:
        return self.group_of(self.initial)

    def progress_transitions(self, u: str) -> tuple:
        return tuple(tr for tr in self.outgoing(u) if tr.target != u)

    def objective_of(self, u: str):
        if self.labels is None:
            return None
        return self.labels[u].objective

    def numeric_variable(self, name: str) -> NumericVariable:
        for w in self.numerics:
            if w.name == name:
                return w
        raise KeyError(name)

    def step(self, current, t: TruthAssignment) -> StepResult:
        return rm_step(self, current, t)


def _step_single(rm: RewardMachine, u: str, t: TruthAssignment):
    fired = [tr for tr in rm.outgoing(u) if eval_guard(tr.guard, t)]
    if len(fired) > 1:
        raise DeterminismError(f"state {u}: {len(fired)} guards fired under {t!r}")
    return fired[0] if fired else None


def rm_step(rm: RewardMachine, current, t: TruthAssignment) -> StepResult:
    """Advance ``rm`` from ``current`` under truth assignment ``t``.

    ``current`` is a state id, or for coupled machines a group tuple (a state
    id is promoted to its group). With no matching guard the machine stays
    put with reward 0. For groups, the member whose non-loop transition
    fired is reported via ``fired.source``.
    """
    key = (current, t)
    hit = rm._cache.get(key)
    if hit is not None:
        return hit
    if rm.kind is Kind.COUPLED and not isinstance(current, tuple):
        current = rm.group_of(current)
    if isinstance(current, tuple):
        if any(rm.is_terminal(u) for u in current):
            raise RMError(f"step from terminal group {current}")
        moved = []
        for u in current:
            tr = _step_single(rm, u, t)
            if tr is not None and tr.target != u:
                moved.append(tr)
        if len(moved) > 1:
            raise DeterminismError(f"group {current}: members {[m.source for m in moved]} fired together")
        if moved:
            tr = moved[0]
            res = StepResult(rm.group_of(tr.target), tr.reward, tr)
        else:
            loops = [tr for u in current for tr in [_step_single(rm, u, t)] if tr is not None]
            res = StepResult(current, sum((tr.reward for tr in loops), Fraction(0)), None)
    else:
        if rm.is_terminal(current):
            raise RMError(f"step from terminal state {current}")
        tr = _step_single(rm, current, t)
        res = StepResult(tr.target, tr.reward, tr) if tr is not None else StepResult(current, Fraction(0), None)
    rm._cache[key] = res
    return res


# -- validation --------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self):
        return f"{self.kind}: {self.message}"


def _assignments(bool_feats, num_vars, exclusive):
    """All truth assignments over the given features respecting ``exclusive``."""
    bool_feats = sorted(bool_feats)
    groups = [frozenset(g) & frozenset(bool_feats) for g in exclusive]
    groups = [g for g in groups if len(g) > 1]
    num_choices = [[(w, v) for v in NumericFeatureValue] for w in sorted(num_vars)]
    for bits in itertools.product((False, True), repeat=len(bool_feats)):
        true = {f for f, b in zip(bool_feats, bits) if b}
        if any(len(true & g) > 1 for g in groups):
            continue
        for nums in itertools.product(*num_choices):
            yield TruthAssignment({f: f in true for f in bool_feats}, dict(nums))


def bfs_depths(rm: RewardMachine) -> dict:
    """Shortest transition distance from the initial state (or group)."""
    start = rm.initial_group if rm.kind is Kind.COUPLED else (rm.initial,)
    dist = {u: 0 for u in start}
    queue = deque(start)
    while queue:
        u = queue.popleft()
        for tr in rm.outgoing(u):
            for v in rm.group_of(tr.target):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
    return dist


def validate_rm(rm: RewardMachine) -> list:
    """Return a list of :class:`Violation`; empty means well-formed."""
    out = []
    declared = set(rm.features)
    numerics = {w.name for w in rm.numerics}
    all_states = set(rm.all_states)
    if rm.initial not in set(rm.states):
        out.append(Violation("UnknownState", f"initial state {rm.initial} not in states"))
    if set(rm.states) & set(rm.terminal):
        out.append(Violation("TerminalOverlap", "states and terminal states intersect"))
    for tr in rm.transitions:
        if tr.source not in all_states or tr.target not in all_states:
            out.append(Violation("UnknownState", f"transition {tr} references unknown state"))
        if tr.source in rm.terminal:
            out.append(Violation("TerminalOutgoing", f"terminal state {tr.source} has outgoing transition"))
        for a in tr.guard.atoms():
            if isinstance(a, Lit) and a.name not in declared:
                out.append(Violation("UndeclaredAtom", f"{a.name} in {tr}"))
            if isinstance(a, NumAtom) and a.var not in numerics:
                out.append(Violation("UndeclaredAtom", f"{a.var} in {tr}"))
        if rm.kind is Kind.NUMERIC and tr.target == tr.source:
            for clause in to_dnf(tr.guard):
                if any(isinstance(a, NumAtom) and a.value is not LIVE for a in clause):
                    out.append(Violation("NumericConsumption",
                                         f"{tr} consumes a numeric event without leaving {tr.source}"))
                    break
    if rm.kind is not Kind.NUMERIC and any(
            isinstance(a, NumAtom) for tr in rm.transitions for a in tr.guard.atoms()):
        out.append(Violation("KindMismatch", "numeric atoms in a non-numeric machine"))
    if out:
        return out

    for u in rm.states:
        trs = rm.outgoing(u)
        if len(trs) < 2:
            continue
        atoms = [a for tr in trs for a in tr.guard.atoms()]
        bf = {a.name for a in atoms if isinstance(a, Lit)}
        nv = {a.var for a in atoms if isinstance(a, NumAtom)}
        for t in _assignments(bf, nv, rm.exclusive):
            n = sum(eval_guard(tr.guard, t) for tr in trs)
            if n > 1:
                out.append(Violation("DeterminismViolation", f"state {u}: {n} guards fire under {t!r}"))
                break

    if rm.kind in (Kind.AGENDA, Kind.COUPLED):
        out.extend(_check_labels(rm))
    if rm.kind is Kind.COUPLED:
        out.extend(_check_coupling(rm))
    return out


def _check_labels(rm):
    out = []
    labels = rm.labels or {}
    missing = [u for u in rm.all_states if u not in labels]
    if missing:
        return [Violation("LabelMissing", f"unlabelled states {missing}")]
    seen = {}
    for u in rm.all_states:
        lab = labels[u]
        if lab in seen:
            out.append(Violation("LabelCollision", f"{u} and {seen[lab]} share label {lab}"))
        seen[lab] = u
        obj = lab.objective
        if isinstance(obj, frozenset) and obj != lab.agenda:
            out.append(Violation("LabelObjective", f"{u}: agenda objective differs from agenda"))
    depths = bfs_depths(rm)
    for u, d in depths.items():
        if labels[u].depth != d:
            out.append(Violation("DepthViolation", f"{u}: label depth {labels[u].depth} != distance {d}"))
    return out


def _check_coupling(rm):
    out = []
    if rm.groups is None:
        return [Violation("CouplingViolation", "coupled machine without groups")]
    members = [u for g in rm.groups for u in g]
    if sorted(members) != sorted(rm.all_states):
        out.append(Violation("CouplingViolation", "groups do not partition the states"))
    for g in rm.groups:
        labs = [rm.labels[u] for u in g]
        if len({(lab.depth, lab.agenda) for lab in labs}) > 1:
            out.append(Violation("CouplingViolation", f"group {g} members differ in depth or agenda"))
        if len(g) > 1 and any(lab.whole_agenda for lab in labs):
            out.append(Violation("CouplingViolation", f"group {g} holds an unsplit agenda objective"))
    return out


def make_rm(states, initial, terminal, transitions, **kw) -> RewardMachine:
    """Convenience constructor from ``(src, guard, reward, dst)`` tuples.

    Guards may be :class:`Guard` objects or guard text.
    """
    from .translate import parse_guard

    def guard(g):
        return parse_guard(g) if isinstance(g, str) else g

    trs = tuple(tr if isinstance(tr, Transition) else
                Transition(tr[0], guard(tr[1]), Fraction(tr[2]), tr[3]) for tr in transitions)
    return RewardMachine(tuple(states), initial, tuple(terminal), trs, **kw)

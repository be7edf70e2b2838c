"""Text format, numeric-machine unrolling, coupled splitting and DOT export.

Text format (one section header per line, ``#`` starts a comment)::

    kind: numeric                 # optional: boolean | numeric | agenda | coupled
    features: s b1 b2
    numerics: b 0..2
    states: u0 u1
    initial: u0
    terminal: u2
    exclusive: b1 b2              # optional, repeatable
    transitions:
      u0 -> u0 [live(b)] 0
      u0 -> u1 [dec(b) | done(b)] 0
    labels:                       # agenda / coupled only
      STATE DEPTH AGENDA OBJECTIVE
    groups:                       # coupled only, one group per line
      m1 m2

Guard grammar::

    guard := conj ('|' conj)*
    conj  := prim ('&' prim)*
    prim  := atom | '(' guard ')'
    atom  := NAME | '!' NAME | dec(NAME) | done(NAME) | live(NAME) | true | false

In label lines, ``AGENDA`` is a comma list or ``-`` for the empty agenda, and
``OBJECTIVE`` is a feature name, ``*`` for the whole agenda, or ``-`` for none.
"""
from __future__ import annotations

import itertools
import re
from collections import deque
from fractions import Fraction

from .core import (
    DEC, DONE, FALSE, LIVE, TRUE, And, Const, Kind, Lit, NumAtom,
    NumericFeatureValue, NumericVariable, Or, RewardMachine, RMError,
    StateLabel, Transition, conj, disj, to_dnf, validate_rm,
)


class ParseError(RMError):
    def __init__(self, msg, line=0, col=0):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col


class ValidationError(RMError):
    def __init__(self, violations):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = list(violations)


class TranslationError(RMError):
    pass


# -- guard parsing -----------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<op>[!&|()])|(?P<name>[A-Za-z_][A-Za-z0-9_.']*))")
_NUMFUN = {"dec": DEC, "done": DONE, "live": LIVE}


def _tokenize(text, line, col0):
    pos = 0
    toks = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos:].lstrip()[:1]!r}", line, col0 + pos)
        start = m.start("op") if m.group("op") else m.start("name")
        toks.append((m.group("op") or m.group("name"), col0 + start))
        pos = m.end()
    return toks


def parse_guard(text: str, line: int = 0, col: int = 1):
    toks = _tokenize(text, line, col)
    pos = 0

    def peek():
        return toks[pos][0] if pos < len(toks) else None

    def where():
        return toks[pos][1] if pos < len(toks) else col + len(text)

    def take(expected=None):
        nonlocal pos
        if pos >= len(toks):
            raise ParseError(f"unexpected end of guard, expected {expected or 'atom'}", line, where())
        tok = toks[pos][0]
        if expected is not None and tok != expected:
            raise ParseError(f"expected {expected!r}, got {tok!r}", line, where())
        pos += 1
        return tok

    def guard():
        items = [conjunction()]
        while peek() == "|":
            take("|")
            items.append(conjunction())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def conjunction():
        items = [prim()]
        while peek() == "&":
            take("&")
            items.append(prim())
        return items[0] if len(items) == 1 else And(tuple(items))

    def prim():
        tok = peek()
        if tok == "(":
            take("(")
            g = guard()
            take(")")
            return g
        if tok == "!":
            take("!")
            c = where()
            name = take()
            if not _is_name(name):
                raise ParseError(f"expected feature name after '!', got {name!r}", line, c)
            return Lit(name, False)
        c = where()
        name = take()
        if not _is_name(name):
            raise ParseError(f"expected atom, got {name!r}", line, c)
        if name in _NUMFUN and peek() == "(":
            take("(")
            c = where()
            var = take()
            if not _is_name(var):
                raise ParseError(f"expected numeric variable, got {var!r}", line, c)
            take(")")
            return NumAtom(var, _NUMFUN[name])
        if name == "true":
            return TRUE
        if name == "false":
            return FALSE
        return Lit(name)

    if not toks:
        raise ParseError("empty guard", line, col)
    g = guard()
    if pos != len(toks):
        raise ParseError(f"trailing input {toks[pos][0]!r}", line, toks[pos][1])
    return g


def _is_name(tok):
    return tok not in ("!", "&", "|", "(", ")")


# -- document parsing and formatting ------------------------------------------

_HEADER = re.compile(r"^(kind|features|numerics|states|initial|terminal|exclusive|"
                     r"transitions|labels|groups)\s*:\s*(.*)$")
_TRANSITION = re.compile(r"^(?P<src>\S+)\s*->\s*(?P<dst>\S+)\s*\[(?P<guard>.*)\]\s*(?P<rew>\S+)\s*$")
_NUMERIC = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s+(-?\d+)\s*\.\.\s*(-?\d+)$")


def parse_rm(text: str, validate: bool = True) -> RewardMachine:
    """Parse the text format into a :class:`RewardMachine`."""
    sections = {}
    lines = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        m = _HEADER.match(body.strip())
        if m and not body[:1].isspace():
            current = m.group(1)
            if current in sections and current not in ("exclusive",):
                raise ParseError(f"duplicate section {current!r}", lineno, 1)
            sections.setdefault(current, [])
            lines.setdefault(current, [])
            if m.group(2).strip():
                sections[current].append(m.group(2).strip())
                lines[current].append((lineno, body.index(m.group(2).strip()) + 1))
            continue
        if current is None:
            raise ParseError("content before first section header", lineno, 1)
        indent = len(body) - len(body.lstrip())
        sections[current].append(body.strip())
        lines[current].append((lineno, indent + 1))
    if not sections:
        raise ParseError("empty document", 1, 1)
    for req in ("states", "initial", "transitions"):
        if req not in sections:
            raise ParseError(f"missing section {req!r}", 1, 1)

    def words(name):
        return [w for s in sections.get(name, []) for w in s.split()]

    features = tuple(words("features"))
    numerics = []
    for s, (ln, c) in zip(sections.get("numerics", []), lines.get("numerics", [])):
        for part in s.split(","):
            m = _NUMERIC.match(part.strip())
            if not m:
                raise ParseError(f"bad numeric declaration {part.strip()!r}", ln, c)
            numerics.append(NumericVariable(m.group(1), int(m.group(2)), int(m.group(3))))
    kind_words = words("kind")
    if kind_words:
        try:
            kind = Kind(kind_words[0])
        except ValueError:
            ln, c = lines["kind"][0]
            raise ParseError(f"unknown kind {kind_words[0]!r}", ln, c) from None
    else:
        kind = Kind.NUMERIC if numerics else Kind.BOOLEAN
    states = tuple(words("states"))
    initial = words("initial")
    if len(initial) != 1:
        raise ParseError("exactly one initial state required", lines["initial"][0][0] if lines["initial"] else 1, 1)
    terminal = tuple(words("terminal"))
    exclusive = tuple(frozenset(s.split()) for s in sections.get("exclusive", []))

    transitions = []
    for s, (ln, c) in zip(sections["transitions"], lines["transitions"]):
        m = _TRANSITION.match(s)
        if not m:
            raise ParseError("expected 'src -> dst [guard] reward'", ln, c)
        g = parse_guard(m.group("guard"), ln, c + m.start("guard"))
        try:
            rew = Fraction(m.group("rew"))
        except (ValueError, ZeroDivisionError):
            raise ParseError(f"bad reward {m.group('rew')!r}", ln, c + m.start("rew")) from None
        transitions.append(Transition(m.group("src"), g, rew, m.group("dst")))

    labels = None
    if "labels" in sections:
        labels = {}
        for s, (ln, c) in zip(sections["labels"], lines["labels"]):
            parts = s.split()
            if len(parts) != 4 or not parts[1].isdigit():
                raise ParseError("expected 'STATE DEPTH AGENDA OBJECTIVE'", ln, c)
            agenda = frozenset() if parts[2] == "-" else frozenset(parts[2].split(","))
            obj = {"*": agenda, "-": None}.get(parts[3], parts[3])
            labels[parts[0]] = StateLabel(int(parts[1]), agenda, obj)
    groups = None
    if "groups" in sections:
        groups = tuple(tuple(s.split()) for s in sections["groups"])

    rm = RewardMachine(states, initial[0], terminal, tuple(transitions), kind=kind,
                       features=features, numerics=tuple(numerics), labels=labels,
                       groups=groups, exclusive=exclusive)
    if validate:
        violations = validate_rm(rm)
        if violations:
            raise ValidationError(violations)
    return rm


def _fmt_reward(r):
    r = Fraction(r)
    return str(r.numerator) if r.denominator == 1 else f"{r.numerator}/{r.denominator}"


def format_rm(rm: RewardMachine) -> str:
    """Serialise ``rm`` to the text format; ``parse_rm`` inverts it."""
    out = [f"kind: {rm.kind.value}"]
    if rm.features:
        out.append("features: " + " ".join(rm.features))
    if rm.numerics:
        out.append("numerics: " + ", ".join(f"{w.name} {w.lower}..{w.upper}" for w in rm.numerics))
    out.append("states: " + " ".join(rm.states))
    out.append(f"initial: {rm.initial}")
    if rm.terminal:
        out.append("terminal: " + " ".join(rm.terminal))
    for g in rm.exclusive:
        out.append("exclusive: " + " ".join(sorted(g)))
    out.append("transitions:")
    for tr in rm.transitions:
        out.append(f"  {tr.source} -> {tr.target} [{tr.guard}] {_fmt_reward(tr.reward)}")
    if rm.labels is not None:
        out.append("labels:")
        for u in rm.all_states:
            lab = rm.labels[u]
            agenda = ",".join(sorted(lab.agenda)) or "-"
            obj = "-" if lab.objective is None else "*" if lab.whole_agenda else lab.objective
            out.append(f"  {u} {lab.depth} {agenda} {obj}")
    if rm.groups is not None:
        out.append("groups:")
        for g in rm.groups:
            out.append("  " + " ".join(g))
    return "\n".join(out) + "\n"


def parse_bindings(text: str) -> dict:
    """Parse ``var: feat1 feat2 ...`` lines (commas also accepted)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if ":" not in body:
            raise ParseError("expected 'var: feature ...'", lineno, 1)
        var, rest = body.split(":", 1)
        out[var.strip()] = rest.replace(",", " ").split()
    return out


# -- unrolling ---------------------------------------------------------------

def _check_bindings(num_rm, bindings):
    if num_rm.kind is not Kind.NUMERIC:
        raise TranslationError("unrolling needs a numeric machine")
    for w in num_rm.numerics:
        if w.name not in bindings:
            raise TranslationError(f"no subtask bindings for numeric variable {w.name}")
        if len(bindings[w.name]) != w.upper - w.lower:
            raise TranslationError(
                f"{w.name}: {len(bindings[w.name])} subtasks bound but domain spans {w.upper - w.lower}")
    seen = [f for w in num_rm.numerics for f in bindings[w.name]]
    if len(set(seen)) != len(seen):
        raise TranslationError("a subtask feature is bound to more than one variable")


def _expand(num_rm, q, remaining, bindings):
    """Concrete (literals, reward, target, fired) tuples leaving numeric state ``q``.

    ``remaining`` maps each variable to the ordered tuple of its pending
    subtasks; ``fired`` is ``(var, subtask)`` or ``None``.
    """
    variables = {w.name: w for w in num_rm.numerics}
    out = []
    for tr in num_rm.outgoing(q):
        for clause in to_dnf(tr.guard):
            lits = [a for a in clause if isinstance(a, Lit)]
            if any(Lit(a.name, not a.positive) in lits for a in lits):
                continue
            wanted = {}
            for a in clause:
                if isinstance(a, NumAtom):
                    wanted.setdefault(a.var, set()).add(a.value)
            per_var = []
            ok = True
            for var, values in sorted(wanted.items()):
                if len(values) > 1:
                    ok = False
                    break
                (value,) = values
                w = variables[var]
                rem = remaining[var]
                v = w.lower + len(rem)
                options = []
                for tau in rem:
                    if (DEC if v - 1 > w.lower else DONE) is value:
                        options.append((var, tau))
                if (DONE if v == w.lower else LIVE) is value:
                    options.append((var, None))
                if not options:
                    ok = False
                    break
                per_var.append(options)
            if not ok:
                continue
            for combo in itertools.product(*per_var):
                fires = [(var, tau) for var, tau in combo if tau is not None]
                if len(fires) > 1:
                    raise TranslationError(
                        f"transition {tr} completes subtasks of several variables in one step")
                # a subtask completion is the step's only event
                if fires and any(a.positive for a in lits):
                    continue
                guard_lits = list(lits)
                for var, tau in combo:
                    if tau is None:
                        guard_lits.extend(Lit(x, False) for x in remaining[var])
                    else:
                        guard_lits.append(Lit(tau))
                if any(Lit(a.name, not a.positive) in guard_lits for a in guard_lits):
                    continue
                # drop duplicate literals but keep order
                seen = []
                for a in guard_lits:
                    if a not in seen:
                        seen.append(a)
                out.append((tuple(seen), tr.reward, tr.target, fires[0] if fires else None))
    return out


def _unroll(num_rm, bindings, agenda_mode):
    _check_bindings(num_rm, bindings)
    order = [w.name for w in num_rm.numerics]
    full = tuple(tuple(bindings[v]) for v in order)

    def remaining_of(ctx):
        _, hist = ctx
        return {v: tuple(t for t in full[i] if t not in hist[i]) for i, v in enumerate(order)}

    def key_of(q, hist):
        if agenda_mode:
            return (q, tuple(frozenset(h) for h in hist))
        return (q, hist)

    start = (num_rm.initial, tuple(() for _ in order))
    contexts = {key_of(*start): start}
    ids = {key_of(*start): 0}
    depth = {key_of(*start): 0}
    queue = deque([key_of(*start)])
    edges = {}  # key -> list of (lits, reward, target key)
    while queue:
        k = queue.popleft()
        q, hist = contexts[k]
        if num_rm.is_terminal(q):
            continue
        rem = remaining_of(contexts[k])
        lst = []
        for lits, reward, target, fired in _expand(num_rm, q, rem, bindings):
            new_hist = hist
            if fired is not None:
                i = order.index(fired[0])
                new_hist = hist[:i] + (hist[i] + (fired[1],),) + hist[i + 1:]
            tk = key_of(target, new_hist)
            if tk not in contexts:
                contexts[tk] = (target, new_hist)
                ids[tk] = len(ids)
                depth[tk] = depth[k] + 1
                queue.append(tk)
            lst.append((lits, reward, tk))
        edges[k] = lst
    return contexts, ids, depth, edges, remaining_of


def _merge_edges(src_id, lst, name):
    """Group concrete edges by target; several clauses to one target become an Or."""
    by_target = {}
    for lits, reward, tk in lst:
        by_target.setdefault((tk, reward), [])
        g = conj(lits)
        if g not in by_target[(tk, reward)]:
            by_target[(tk, reward)].append(g)
    out = []
    for (tk, reward), guards in by_target.items():
        out.append(Transition(src_id, disj(guards), Fraction(reward), name(tk)))
    return out


def _target_features(num_rm, bindings):
    feats = list(num_rm.features)
    for w in num_rm.numerics:
        for f in bindings[w.name]:
            if f not in feats:
                feats.append(f)
    return tuple(feats)


def _exclusive(num_rm, bindings):
    return tuple(num_rm.exclusive) + tuple(frozenset(bindings[w.name]) for w in num_rm.numerics)


def unroll_to_boolean(num_rm: RewardMachine, subtask_bindings: dict) -> RewardMachine:
    """Unroll a numeric machine over every completion order (no state merging)."""
    contexts, ids, depth, edges, _ = _unroll(num_rm, subtask_bindings, agenda_mode=False)

    def name(k):
        return f"u{ids[k]}"

    keys = sorted(ids, key=ids.get)
    states = tuple(name(k) for k in keys if not num_rm.is_terminal(contexts[k][0]))
    terminal = tuple(name(k) for k in keys if num_rm.is_terminal(contexts[k][0]))
    transitions = []
    for k in keys:
        transitions.extend(_merge_edges(name(k), edges.get(k, []), name))
    return RewardMachine(states, name(keys[0]), terminal, tuple(transitions), kind=Kind.BOOLEAN,
                         features=_target_features(num_rm, subtask_bindings),
                         exclusive=_exclusive(num_rm, subtask_bindings))


def _objective(lst, own_key, remaining):
    """Objective of an agenda state from its progress edges."""
    triggers = []
    for lits, _, tk in lst:
        if tk == own_key:
            continue
        pos = [a.name for a in lits if a.positive]
        if len(pos) != 1:
            raise TranslationError(f"progress edge with {len(pos)} positive features has no single objective")
        if pos[0] not in triggers:
            triggers.append(pos[0])
    pending = frozenset(t for ts in remaining.values() for t in ts)
    if len(triggers) == 1:
        return triggers[0]
    if len(triggers) > 1 and frozenset(triggers) == pending:
        return pending
    raise TranslationError(f"objective ambiguous: triggers {triggers}, agenda {sorted(pending)}")


def unroll_to_agenda(num_rm: RewardMachine, subtask_bindings: dict) -> RewardMachine:
    """Unroll keyed by remaining subtasks; symmetric states share one label."""
    contexts, ids, depth, edges, remaining_of = _unroll(num_rm, subtask_bindings, agenda_mode=True)
    labels = {}
    for k, ctx in contexts.items():
        rem = remaining_of(ctx)
        agenda = frozenset(t for ts in rem.values() for t in ts)
        if num_rm.is_terminal(ctx[0]):
            obj = None
        else:
            obj = _objective(edges[k], k, rem)
        labels[k] = StateLabel(depth[k], agenda, obj)
    by_label = {}
    for k, lab in labels.items():
        if lab in by_label:
            raise TranslationError(f"label {lab} identifies two distinct task progressions")
        by_label[lab] = k

    def name(k):
        return str(labels[k])

    keys = sorted(contexts, key=lambda k: labels[k].sort_key())
    states = tuple(name(k) for k in keys if not num_rm.is_terminal(contexts[k][0]))
    terminal = tuple(name(k) for k in keys if num_rm.is_terminal(contexts[k][0]))
    transitions = []
    for k in keys:
        transitions.extend(_merge_edges(name(k), edges.get(k, []), name))
    initial = [k for k in contexts if depth[k] == 0][0]
    return RewardMachine(states, name(initial), terminal, tuple(transitions), kind=Kind.AGENDA,
                         features=_target_features(num_rm, subtask_bindings),
                         labels={name(k): labels[k] for k in keys},
                         exclusive=_exclusive(num_rm, subtask_bindings))


def _positives(g):
    return {a.name for a in g.atoms() if isinstance(a, Lit) and a.positive}


def split_to_coupled(agenda_rm: RewardMachine) -> RewardMachine:
    """Split every whole-agenda state into one coupled member per subtask."""
    if agenda_rm.kind is not Kind.AGENDA or agenda_rm.labels is None:
        raise TranslationError("splitting needs a labelled agenda machine")
    bad = [v for v in validate_rm(agenda_rm) if v.kind.startswith("Label") or v.kind == "DepthViolation"]
    if bad:
        raise TranslationError("; ".join(map(str, bad)))
    split = {}
    for u in agenda_rm.states:
        lab = agenda_rm.labels[u]
        if lab.whole_agenda:
            split[u] = [(str(StateLabel(lab.depth, lab.agenda, t)), t) for t in sorted(lab.agenda)]

    def redirect(v):
        return split[v][0][0] if v in split else v

    labels = {}
    states = []
    transitions = []
    groups = []
    for u in agenda_rm.all_states:
        lab = agenda_rm.labels[u]
        if u in split:
            members = []
            for name, tau in split[u]:
                members.append(name)
                labels[name] = StateLabel(lab.depth, lab.agenda, tau)
                states.append(name)
                mine = [tr for tr in agenda_rm.outgoing(u) if tr.target != u and _positives(tr.guard) == {tau}]
                if len(mine) != 1:
                    raise TranslationError(f"{u}: expected one transition for subtask {tau}, found {len(mine)}")
                transitions.append(Transition(name, Lit(tau, False), Fraction(0), name))
                transitions.append(Transition(name, mine[0].guard, mine[0].reward, redirect(mine[0].target)))
            groups.append(tuple(members))
        else:
            labels[u] = lab
            if not agenda_rm.is_terminal(u):
                states.append(u)
            for tr in agenda_rm.outgoing(u):
                transitions.append(Transition(u, tr.guard, tr.reward, redirect(tr.target)))
            groups.append((u,))
    return RewardMachine(tuple(states), redirect(agenda_rm.initial), tuple(agenda_rm.terminal),
                         tuple(transitions), kind=Kind.COUPLED, features=agenda_rm.features,
                         labels=labels, groups=tuple(groups), exclusive=agenda_rm.exclusive)


def compile_rm(num_rm: RewardMachine, bindings: dict, to: str) -> RewardMachine:
    if to == "boolean":
        return unroll_to_boolean(num_rm, bindings)
    if to == "agenda":
        return unroll_to_agenda(num_rm, bindings)
    if to == "coupled":
        return split_to_coupled(unroll_to_agenda(num_rm, bindings))
    raise TranslationError(f"unknown target {to!r}")


# -- DOT ---------------------------------------------------------------------

def _q(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(rm: RewardMachine) -> str:
    """Graphviz text; coupled groups become dashed red clusters."""
    out = ["digraph rm {", "  rankdir=LR;", "  node [shape=circle];",
           '  __start [shape=point, label=""];']
    clustered = set()
    if rm.groups is not None:
        for i, g in enumerate(x for x in rm.groups if len(x) > 1):
            out.append(f"  subgraph cluster_{i} {{")
            out.append("    style=dashed; color=red;")
            for u in g:
                out.append(f"    {_q(u)} [shape=circle];")
                clustered.add(u)
            out.append("  }")
    for u in rm.all_states:
        if u in clustered:
            continue
        shape = "doublecircle" if rm.is_terminal(u) else "circle"
        out.append(f"  {_q(u)} [shape={shape}];")
    for u in (rm.initial_group if rm.kind is Kind.COUPLED else (rm.initial,)):
        out.append(f"  __start -> {_q(u)};")
    for tr in rm.transitions:
        out.append(f"  {_q(tr.source)} -> {_q(tr.target)} [label={_q(f'<{tr.guard}; {_fmt_reward(tr.reward)}>')}];")
    out.append("}")
    return "\n".join(out) + "\n"

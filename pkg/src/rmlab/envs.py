"""Deterministic labelled gridworlds: Delivery and Office.

Cells are ``(row, col)`` with row 0 at the top. Walls block the edge between
two adjacent cells; the grid border is always walled.
"""
from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import NamedTuple, Optional

from .core import (
    Kind, NumericVariable, RMError, RewardMachine, TruthAssignment,
    eval_numeric_feature, rm_step,
)

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTIONS = (UP, DOWN, LEFT, RIGHT)
ACTION_NAMES = ("up", "down", "left", "right")
_DELTA = ((-1, 0), (1, 0), (0, -1), (0, 1))


class MapError(RMError):
    pass


class ResourceError(RMError):
    pass


@dataclass(frozen=True)
class GridMap:
    kind: str
    height: int
    width: int
    agent_start: tuple
    walls: frozenset = frozenset()
    boxes: tuple = ()
    station: Optional[tuple] = None
    coffee: tuple = ()
    offices: tuple = ()
    decorations: frozenset = frozenset()
    name: str = ""

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def blocked(self, a, b) -> bool:
        return frozenset((a, b)) in self.walls

    def neighbour(self, cell, action) -> tuple:
        dr, dc = _DELTA[action]
        nxt = (cell[0] + dr, cell[1] + dc)
        if not self.in_bounds(nxt) or self.blocked(cell, nxt):
            return cell
        return nxt

    def with_offices(self, n: int) -> "GridMap":
        """Same map with the task restricted to the first ``n`` offices."""
        if not 1 <= n <= len(self.offices):
            raise MapError(f"map has {len(self.offices)} offices, asked for {n}")
        return GridMap(self.kind, self.height, self.width, self.agent_start, self.walls,
                       self.boxes, self.station, self.coffee, self.offices[:n],
                       self.decorations, self.name)


class GridState(NamedTuple):
    """Agent cell, carried item and the objects still to be handled.

    ``carried`` is a box id (Delivery) or a coffee flag (Office);
    ``remaining`` holds uncollected boxes or undelivered offices.
    """

    pos: tuple
    carried: object
    remaining: frozenset


class StepOutcome(NamedTuple):
    next_state: GridState
    assignment: TruthAssignment
    terminated: bool = False
    termination_kind: str = "none"


class FeatureCatalog(NamedTuple):
    features: tuple
    numerics: tuple
    bindings: dict


def validate_map(m: GridMap) -> None:
    if m.kind not in ("delivery", "office"):
        raise MapError(f"unknown map kind {m.kind!r}")
    if m.height < 1 or m.width < 1:
        raise MapError("empty grid")
    cells = [m.agent_start, *m.boxes, *m.coffee, *m.offices, *m.decorations]
    if m.station is not None:
        cells.append(m.station)
    for cell in cells:
        if not m.in_bounds(cell):
            raise MapError(f"cell {cell} outside {m.height}x{m.width} grid")
    for edge in m.walls:
        a, b = tuple(edge)
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
            raise MapError(f"wall between non-adjacent cells {a} {b}")
    if m.kind == "delivery":
        if m.station is None or not m.boxes:
            raise MapError("delivery map needs a station and at least one box")
        if len(set(m.boxes)) != len(m.boxes) or m.station in m.boxes:
            raise MapError("boxes and station must occupy distinct cells")
    else:
        if not m.coffee or not m.offices:
            raise MapError("office map needs coffee machines and offices")
    if m.agent_start in m.decorations:
        raise MapError("agent starts on a decoration")
    reach = _reachable_cells(m)
    targets = [*m.boxes, *m.coffee, *m.offices] + ([m.station] if m.station else [])
    stranded = [c for c in targets if c not in reach]
    if stranded:
        raise MapError(f"cells {stranded} unreachable from the agent start")


def _reachable_cells(m: GridMap) -> set:
    seen = {m.agent_start}
    queue = deque([m.agent_start])
    while queue:
        cell = queue.popleft()
        for a in ACTIONS:
            nxt = m.neighbour(cell, a)
            if nxt not in seen and nxt not in m.decorations:
                seen.add(nxt)
                queue.append(nxt)
    return seen


# -- map files ---------------------------------------------------------------

def parse_map(text: str, name: str = "") -> GridMap:
    """Parse the ASCII map format (see ``maps/*.map`` for examples)."""
    kind = None
    section = None
    rows, walls = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        if not body[:1].isspace():
            head, _, rest = body.partition(":")
            section = head.strip()
            if section == "kind":
                kind = rest.strip()
            elif section not in ("grid", "walls", "legend"):
                raise MapError(f"line {lineno}: unknown section {section!r}")
            continue
        if section == "grid":
            rows.append(body.split())
        elif section == "walls":
            try:
                a, b = (tuple(int(x) for x in p.split(",")) for p in body.split())
            except ValueError:
                raise MapError(f"line {lineno}: expected 'row,col row,col'") from None
            walls.append(frozenset((a, b)))
    if kind is None or not rows:
        raise MapError("map needs 'kind:' and 'grid:' sections")
    if len({len(r) for r in rows}) != 1:
        raise MapError("grid rows differ in length")
    boxes, offices = {}, {}
    coffee, decorations = [], []
    agent = station = None
    for r, row in enumerate(rows):
        for c, tok in enumerate(row):
            cell = (r, c)
            if tok == ".":
                continue
            if tok == "A":
                agent = cell
            elif tok == "S":
                station = cell
            elif tok == "C":
                coffee.append(cell)
            elif tok == "*":
                decorations.append(cell)
            elif tok.isdigit():
                boxes[int(tok)] = cell
            elif tok[0] == "O" and tok[1:].isdigit():
                offices[int(tok[1:])] = cell
            else:
                raise MapError(f"unknown grid token {tok!r} at {cell}")
    if agent is None:
        raise MapError("grid has no agent 'A'")
    for label, d in (("box", boxes), ("office", offices)):
        if sorted(d) != list(range(1, len(d) + 1)):
            raise MapError(f"{label} numbers must be 1..n, got {sorted(d)}")
    m = GridMap(kind, len(rows), len(rows[0]), agent, frozenset(walls),
                tuple(boxes[i] for i in sorted(boxes)), station, tuple(coffee),
                tuple(offices[i] for i in sorted(offices)), frozenset(decorations), name)
    validate_map(m)
    return m


def format_map(m: GridMap) -> str:
    grid = [["."] * m.width for _ in range(m.height)]
    for i, cell in enumerate(m.boxes, 1):
        grid[cell[0]][cell[1]] = str(i)
    for i, cell in enumerate(m.offices, 1):
        grid[cell[0]][cell[1]] = f"O{i}"
    for cell in m.coffee:
        grid[cell[0]][cell[1]] = "C"
    for cell in m.decorations:
        grid[cell[0]][cell[1]] = "*"
    if m.station is not None:
        grid[m.station[0]][m.station[1]] = "S"
    grid[m.agent_start[0]][m.agent_start[1]] = "A"
    out = [f"kind: {m.kind}", "grid:"]
    out += ["  " + " ".join(f"{t:<2}" for t in row).rstrip() for row in grid]
    if m.walls:
        out.append("walls:")
        for edge in sorted(tuple(sorted(e)) for e in m.walls):
            (r1, c1), (r2, c2) = edge
            out.append(f"  {r1},{c1} {r2},{c2}")
    return "\n".join(out) + "\n"


def load_map(name_or_path: str) -> GridMap:
    """Load a shipped map by name (``delivery_two_box``, ``office``) or a file path."""
    try:
        text = resources.files("rmlab.maps").joinpath(f"{name_or_path}.map").read_text("utf-8")
        return parse_map(text, name_or_path)
    except FileNotFoundError:
        pass
    with open(name_or_path, encoding="utf-8") as fh:
        return parse_map(fh.read(), name_or_path)


def two_box_map() -> GridMap:
    return load_map("delivery_two_box")


def office_map(n_offices: int = 6) -> GridMap:
    return load_map("office").with_offices(n_offices)


def random_delivery_map(height: int, width: int, n_boxes: int, seed: int,
                        agent_start=(0, 0)) -> GridMap:
    """Open grid with boxes and station placed uniformly at random."""
    rng = random.Random(seed)
    cells = [(r, c) for r in range(height) for c in range(width) if (r, c) != tuple(agent_start)]
    if n_boxes + 1 > len(cells):
        raise MapError("grid too small for the requested boxes")
    picked = rng.sample(cells, n_boxes + 1)
    m = GridMap("delivery", height, width, tuple(agent_start), frozenset(), tuple(picked[:-1]),
                picked[-1], name=f"delivery-{height}x{width}-{n_boxes}-seed{seed}")
    validate_map(m)
    return m


# -- dynamics ----------------------------------------------------------------

class GridEnv:
    """Deterministic labelled MDP over a :class:`GridMap`.

    ``step`` is memoised: states are hashable and transitions deterministic.
    """

    def __init__(self, grid_map: GridMap):
        validate_map(grid_map)
        self.map = grid_map
        self._moves = {
            (r, c): tuple(grid_map.neighbour((r, c), a) for a in ACTIONS)
            for r in range(grid_map.height) for c in range(grid_map.width)
        }
        self._cache = {}
        self._assignments = {}
        self.catalog = self._catalog()

    def _catalog(self) -> FeatureCatalog:
        raise NotImplementedError

    def reset(self, seed: int = 0) -> GridState:
        raise NotImplementedError

    def consumed(self, state: GridState) -> frozenset:
        """Features that can never become true again from ``state``."""
        return frozenset()

    @staticmethod
    def observe(state: GridState, mode: str = "cell"):
        """What the learner keys its tables on: the agent cell, or the full state."""
        return state.pos if mode == "cell" else state

    def _assignment(self, event, w_prev, w_curr):
        key = (event, w_prev, w_curr)
        t = self._assignments.get(key)
        if t is None:
            (w,) = self.catalog.numerics
            num = eval_numeric_feature(w_prev, w_curr, w.lower, w.domain)
            t = TruthAssignment({f: f == event for f in self.catalog.features}, {w.name: num})
            self._assignments[key] = t
        return t

    def step(self, state: GridState, action: int) -> StepOutcome:
        key = (state, action)
        out = self._cache.get(key)
        if out is None:
            out = self._cache[key] = self._step(state, action)
        return out

    def _step(self, state, action):
        raise NotImplementedError


class DeliveryEnv(GridEnv):
    """Pick up boxes one at a time and bring each to the station."""

    def _catalog(self):
        boxes = tuple(f"b{i}" for i in range(1, len(self.map.boxes) + 1))
        return FeatureCatalog(boxes + ("s",), (NumericVariable("b", 0, len(boxes)),), {"b": list(boxes)})

    def reset(self, seed: int = 0) -> GridState:
        return GridState(self.map.agent_start, None, frozenset(self.catalog.bindings["b"]))

    def consumed(self, state):
        return frozenset(self.catalog.bindings["b"]) - state.remaining

    def _step(self, state, action):
        pos, carried, remaining = state
        nxt = self._moves[pos][action]
        event = None
        if nxt != pos:
            if carried is None:
                for i, cell in enumerate(self.map.boxes, 1):
                    box = f"b{i}"
                    if cell == nxt and box in remaining:
                        carried, remaining, event = box, remaining - {box}, box
                        break
            elif nxt == self.map.station:
                carried, event = None, "s"
        t = self._assignment(event, len(state.remaining), len(remaining))
        return StepOutcome(GridState(nxt, carried, remaining), t)


class OfficeEnv(GridEnv):
    """Fetch coffee and deliver it to every task office; decorations end the episode."""

    def _catalog(self):
        offices = tuple(f"o{i}" for i in range(1, len(self.map.offices) + 1))
        return FeatureCatalog(("coffee",) + offices, (NumericVariable("o", 0, len(offices)),),
                              {"o": list(offices)})

    def reset(self, seed: int = 0) -> GridState:
        return GridState(self.map.agent_start, False, frozenset(self.catalog.bindings["o"]))

    def consumed(self, state):
        return frozenset(self.catalog.bindings["o"]) - state.remaining

    def _step(self, state, action):
        pos, carried, remaining = state
        nxt = self._moves[pos][action]
        n = len(remaining)
        if nxt in self.map.decorations:
            return StepOutcome(GridState(nxt, carried, remaining), self._assignment(None, n, n),
                               True, "env_failure")
        event = None
        if nxt != pos:
            if not carried and nxt in self.map.coffee:
                carried, event = True, "coffee"
            elif carried and nxt in self.map.offices:
                office = f"o{self.map.offices.index(nxt) + 1}"
                if office in remaining:
                    carried, remaining, event = False, remaining - {office}, office
        t = self._assignment(event, n, len(remaining))
        return StepOutcome(GridState(nxt, carried, remaining), t)


def make_env(grid_map: GridMap) -> GridEnv:
    return {"delivery": DeliveryEnv, "office": OfficeEnv}[grid_map.kind](grid_map)


def env_reset(grid_map: GridMap, seed: int = 0) -> GridState:
    return make_env(grid_map).reset(seed)


def env_step(state: GridState, action: int, grid_map: GridMap) -> StepOutcome:
    return make_env(grid_map).step(state, action)


def feature_catalog(grid_map: GridMap) -> FeatureCatalog:
    return make_env(grid_map).catalog


# -- oracle ------------------------------------------------------------------

def bfs_optimal_length(env, task_rm: RewardMachine, max_states: int = 2_000_000) -> Optional[int]:
    """Fewest steps to drive ``task_rm`` into a terminal state with total reward 1.

    Breadth-first search over the product of environment and machine states;
    ``None`` if no accepting path exists.
    """
    if isinstance(env, GridMap):
        env = make_env(env)
    u0 = task_rm.initial_group if task_rm.kind is Kind.COUPLED else task_rm.initial
    start = (env.reset(), u0, Fraction(0))
    seen = {start}
    frontier = [start]
    depth = 0
    while frontier:
        depth += 1
        nxt_frontier = []
        for s, u, total in frontier:
            for a in ACTIONS:
                out = env.step(s, a)
                if out.terminated:
                    continue
                u2, r, _ = rm_step(task_rm, u, out.assignment)
                tot = total + r
                if task_rm.is_terminal(u2):
                    if tot == 1:
                        return depth
                    continue
                node = (out.next_state, u2, tot)
                if node not in seen:
                    seen.add(node)
                    if len(seen) > max_states:
                        raise ResourceError(f"product space exceeds {max_states} states")
                    nxt_frontier.append(node)
        frontier = nxt_frontier
    return None


def render(grid_map: GridMap, state: Optional[GridState] = None) -> str:
    """Plain-text picture of a map, optionally with the agent at ``state``."""
    grid = [["."] * grid_map.width for _ in range(grid_map.height)]
    remaining = None if state is None else state.remaining
    for i, cell in enumerate(grid_map.boxes, 1):
        if remaining is None or f"b{i}" in remaining:
            grid[cell[0]][cell[1]] = str(i)
    for i, cell in enumerate(grid_map.offices, 1):
        grid[cell[0]][cell[1]] = f"O{i}"
    for cell in grid_map.coffee:
        grid[cell[0]][cell[1]] = "C"
    for cell in grid_map.decorations:
        grid[cell[0]][cell[1]] = "*"
    if grid_map.station is not None:
        grid[grid_map.station[0]][grid_map.station[1]] = "S"
    pos = grid_map.agent_start if state is None else state.pos
    grid[pos[0]][pos[1]] = "A"
    lines = []
    for r in range(grid_map.height):
        cells = []
        for c in range(grid_map.width):
            sep = "|" if c + 1 < grid_map.width and grid_map.blocked((r, c), (r, c + 1)) else " "
            cells.append(f"{grid[r][c]:<2}{sep}")
        lines.append("".join(cells).rstrip())
        if r + 1 < grid_map.height:
            under = "".join("-- " if grid_map.blocked((r, c), (r + 1, c)) else "   "
                            for c in range(grid_map.width))
            if under.strip():
                lines.append(under.rstrip())
    return "\n".join(lines)

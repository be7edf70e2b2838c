"""Tabular Q-learning over reward machines: QRM, CRM and CoRM.

All learners share one :class:`Learner` record (Q-table, eta table, best
episode length, used RM transitions, random generator) so that a run can be
checkpointed to JSON and resumed bit-identically.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from .core import Kind, Lit, RMError, RewardMachine, rm_step
from .envs import ACTIONS, GridState

INF = math.inf
ALGOS = ("qrm", "crm", "corm")
CHECKPOINT_VERSION = 1


class ParameterError(RMError):
    pass


class UsageError(RMError):
    pass


@dataclass
class Hyperparams:
    alpha: float = 1e-5
    epsilon: float = 0.1
    gamma: float = 0.9
    xi: float = 0.1
    window: int = -1
    init_q: float = 1.0
    episode_cap: int = 1000
    r_min: float = 0.0
    r_max: float = 0.0
    counterfactual: bool = True
    observation: str = "cell"

    def __post_init__(self):
        if self.observation not in ("cell", "state"):
            raise ParameterError("observation must be 'cell' or 'state'")
        if not 0 < self.gamma < 1:
            raise ParameterError("gamma must lie in (0, 1)")
        if self.window < -1:
            raise ParameterError("window must be -1, 0 or a positive integer")
        if self.r_min > self.r_max:
            raise ParameterError("r_min exceeds r_max")


@dataclass
class RewardParams:
    gamma: object = 0.9
    window: int = -1
    r_min: object = 0
    r_max: object = 0
    best_length: object = INF

    @classmethod
    def from_hyperparams(cls, hp: Hyperparams, best_length=INF) -> "RewardParams":
        return cls(hp.gamma, hp.window, hp.r_min, hp.r_max, best_length)


# -- tables ------------------------------------------------------------------

class QTable:
    """Map from product key to a row of action values; absent rows read as ``init_value``."""

    def __init__(self, init_value: float = 1.0, n_actions: int = len(ACTIONS)):
        self.init_value = init_value
        self.n_actions = n_actions
        self.values = {}
        self._default = (init_value,) * n_actions

    def row(self, key):
        return self.values.get(key, self._default)

    def get(self, key, action) -> float:
        return self.row(key)[action]

    def max(self, key) -> float:
        return max(self.row(key))

    def update(self, key, action, target, alpha) -> None:
        row = self.values.get(key)
        if row is None:
            row = self.values[key] = [self.init_value] * self.n_actions
        row[action] += alpha * (target - row[action])

    def __len__(self):
        return len(self.values)


class EtaTable(dict):
    """Fewest observed steps from each RM state to the goal; missing means unvisited."""

    def __missing__(self, key):
        return INF


# -- update rules ------------------------------------------------------------

class Experience(NamedTuple):
    s: GridState
    u: object
    a: int
    s2: GridState
    u2: object
    r: float
    terminal: bool


def _target(q, r, key2, terminal, gamma):
    return r if terminal else r + gamma * q.max(key2)


def qrm_step(q: QTable, transition: Experience, hp: Hyperparams) -> QTable:
    s, u, a, s2, u2, r, terminal = transition
    q.update((s, u), a, _target(q, r, (s2, u2), terminal, hp.gamma), hp.alpha)
    return q


def positive_features(rm: RewardMachine) -> dict:
    """For each state, the features on positive literals of transitions reachable from it."""
    cached = rm._cache.get("__pending__")
    if cached is not None:
        return cached
    own = {u: set() for u in rm.all_states}
    succ = {u: set() for u in rm.all_states}
    for tr in rm.transitions:
        own[tr.source] |= {a.name for a in tr.guard.atoms() if isinstance(a, Lit) and a.positive}
        succ[tr.source].add(tr.target)
    pending = {}
    for u in rm.all_states:
        seen, stack, feats = {u}, [u], set()
        while stack:
            v = stack.pop()
            feats |= own[v]
            for w in succ[v] - seen:
                seen.add(w)
                stack.append(w)
        pending[u] = frozenset(feats)
    rm._cache["__pending__"] = pending
    return pending


def reachable_states(rm: RewardMachine, consumed: frozenset) -> tuple:
    """Non-terminal RM states whose future guards need none of the ``consumed`` features."""
    key = ("__reachable__", consumed)
    hit = rm._cache.get(key)
    if hit is None:
        pending = positive_features(rm)
        hit = rm._cache[key] = tuple(u for u in rm.states if not pending[u] & consumed)
    return hit


class EnvTransition(NamedTuple):
    s: GridState
    a: int
    s2: GridState
    assignment: object
    terminated: bool = False


def crm_step(q: QTable, env_transition: EnvTransition, rm: RewardMachine, reachable, hp: Hyperparams) -> int:
    """Counterfactual update for every state in ``reachable``; returns the update count."""
    s, a, s2, t, env_term = env_transition
    for u in reachable:
        u2, r, _ = rm_step(rm, u, t)
        terminal = env_term or rm.is_terminal(u2)
        q.update((s, u), a, _target(q, float(r), (s2, u2), terminal, hp.gamma), hp.alpha)
    return len(reachable)


def subtask_universe(rm: RewardMachine) -> tuple:
    """Objectives of the non-terminal states of a coupled machine, in first-seen order."""
    out = []
    for u in rm.states:
        obj = rm.objective_of(u)
        if obj is not None and obj not in out:
            out.append(obj)
    return tuple(out)


def corm_low_level_step(q: QTable, s, a, s2, group, rm: RewardMachine, hp: Hyperparams, *,
                        assignment=None, consumed: frozenset = frozenset(), fired_member=None,
                        env_terminated: bool = False) -> int:
    """Lifted updates for the group's objectives plus counterfactual ones; returns the count.

    The member whose transition fired is skipped: its update waits in the
    episode buffer until the final reward is known.
    """
    count = 0
    in_group = set()
    for u in group:
        obj = rm.objective_of(u)
        in_group.add(obj)
        if u == fired_member:
            continue
        q.update((s, obj), a, _target(q, 0.0, (s2, obj), env_terminated, hp.gamma), hp.alpha)
        count += 1
    if hp.counterfactual:
        true = assignment.true_features if assignment is not None else frozenset()
        for obj in subtask_universe(rm):
            if obj in in_group or obj in consumed:
                continue
            if obj in true:
                if hp.window != -1:
                    continue
                q.update((s, obj), a, 1.0, hp.alpha)
            else:
                q.update((s, obj), a, _target(q, 0.0, (s2, obj), env_terminated, hp.gamma), hp.alpha)
            count += 1
    return count


def final_reward(K: int, K_x: int, params: RewardParams):
    """Reward for completing a subtask in an episode of length ``K``.

    It is 1 for the best length seen so far, decays with the excess
    ``K - best_length`` and is clamped after ``window`` extra steps. ``K_x``
    is the number of steps the subtask took. Works on Fractions too.
    """
    lam = params.window
    if lam < -1:
        raise ParameterError("window must be -1, 0 or a positive integer")
    if lam == -1:
        return 1
    best = params.best_length
    dk = 0 if best == INF else K - best
    if dk < 0:
        raise ParameterError(f"episode length {K} below best length {best}")
    if dk == 0:
        return 1
    g = params.gamma
    bonus = g ** (1 - K_x) / (1 - g) * (params.r_max - params.r_min)
    if dk < lam:
        return g ** (dk + 1) + bonus
    return g ** (lam + 1) + bonus


class BufferEntry(NamedTuple):
    key: tuple
    action: int
    state: str
    subtask: str
    step: int
    steps_on_subtask: int
    exploit: bool


@dataclass
class TransitionBuffer:
    entries: list = field(default_factory=list)
    goal_reached: Optional[bool] = None

    def add(self, entry: BufferEntry) -> None:
        self.entries.append(entry)


def corm_grounding_flush(buffer: TransitionBuffer, q: QTable, K: int, params: RewardParams,
                         alpha: float) -> int:
    """Apply the deferred completion updates of a finished episode; returns the update count."""
    if buffer.goal_reached is None:
        raise UsageError("flush before the episode terminated")
    count = 0
    if buffer.goal_reached:
        params.best_length = min(params.best_length, K)
        for e in buffer.entries:
            if e.exploit:
                q.update(e.key, e.action, float(final_reward(K, e.steps_on_subtask, params)), alpha)
                count += 1
    buffer.entries.clear()
    buffer.goal_reached = None
    return count


def _progress(rm, u):
    return [(tr.source, tr.target) for tr in rm.progress_transitions(u)]


def corm_high_level_select(group, eta: EtaTable, xi: float, used_transitions: set, rng: random.Random,
                           rm: Optional[RewardMachine] = None):
    """Pick the group member to pursue; returns ``(member, exploit_flag)``."""
    group = list(group)
    if rng.random() < xi:
        fresh = group
        if rm is not None:
            fresh = [u for u in group if any(p not in used_transitions for p in _progress(rm, u))] or group
        return fresh[rng.randrange(len(fresh))], False
    return _argmin_eta(group, eta, rng), True


def _argmin_eta(group, eta, rng=None):
    best = min(eta[u] for u in group)
    ties = [u for u in group if eta[u] == best]
    if rng is None:
        return ties[0]
    return ties[rng.randrange(len(ties))]


def eta_update(eta: EtaTable, visited, K: int, goal_reached: bool) -> EtaTable:
    if goal_reached:
        for u, t in visited:
            d = K - t
            if d < eta[u]:
                eta[u] = d
    return eta


# -- episodes ----------------------------------------------------------------

@dataclass
class Learner:
    algo: str
    q: QTable
    rng: random.Random
    eta: EtaTable = field(default_factory=EtaTable)
    params: RewardParams = field(default_factory=RewardParams)
    used_transitions: set = field(default_factory=set)
    steps: int = 0
    episodes: int = 0
    updates: int = 0
    peak_step_updates: int = 0

    @classmethod
    def create(cls, algo: str, hp: Hyperparams, seed: int) -> "Learner":
        if algo not in ALGOS:
            raise ParameterError(f"unknown algorithm {algo!r}")
        return cls(algo, QTable(hp.init_q), random.Random(seed), params=RewardParams.from_hyperparams(hp))


@dataclass
class EpisodeRecord:
    length: int
    success: bool
    reward: float
    rewards: list
    updates: int
    failure: str = "none"


def _epsilon_greedy(row, epsilon, rng):
    if rng.random() < epsilon:
        return rng.randrange(len(row))
    best = max(row)
    ties = [a for a, v in enumerate(row) if v == best]
    return ties[0] if len(ties) == 1 else ties[rng.randrange(len(ties))]


def _greedy(row):
    return row.index(max(row))


def run_episode(learner: Learner, env, rm: RewardMachine, hp: Hyperparams,
                max_steps: Optional[int] = None,
                on_step: Optional[Callable[[Learner, float], None]] = None) -> EpisodeRecord:
    """Run one training episode, updating ``learner`` in place.

    ``max_steps`` truncates the episode (counted as a failure);
    ``on_step`` is called after every environment step with the task reward.
    """
    if learner.algo == "corm":
        if rm.kind is not Kind.COUPLED:
            raise ParameterError("CoRM needs a coupled reward machine")
        return _corm_episode(learner, env, rm, hp, max_steps, on_step)
    if rm.kind is Kind.NUMERIC:
        raise ParameterError("compile the numeric machine before learning")
    return _product_episode(learner, env, rm, hp, max_steps, on_step)


def _cap(hp, max_steps):
    return hp.episode_cap if max_steps is None else min(hp.episode_cap, max_steps)


def _product_episode(learner, env, rm, hp, max_steps, on_step):
    q, rng, mode = learner.q, learner.rng, hp.observation
    s, u = env.reset(), rm.initial
    o = env.observe(s, mode)
    cap = _cap(hp, max_steps)
    rewards, updates, t = [], 0, 0
    success, failure = False, "step_limit"
    while t < cap:
        a = _epsilon_greedy(q.row((o, u)), hp.epsilon, rng)
        out = env.step(s, a)
        o2 = env.observe(out.next_state, mode)
        t += 1
        u2, r, _ = rm_step(rm, u, out.assignment)
        done = rm.is_terminal(u2)
        if learner.algo == "qrm":
            qrm_step(q, Experience(o, u, a, o2, u2, float(r), done or out.terminated), hp)
            n = 1
        else:
            reach = reachable_states(rm, env.consumed(s))
            if u not in reach:
                reach = reach + (u,)
            n = crm_step(q, EnvTransition(o, a, o2, out.assignment, out.terminated), rm, reach, hp)
        updates += n
        learner.updates += n
        learner.peak_step_updates = max(learner.peak_step_updates, n)
        learner.steps += 1
        rewards.append(float(r))
        if on_step is not None:
            on_step(learner, float(r))
        s, o, u = out.next_state, o2, u2
        if done:
            success, failure = sum(rewards) == 1, "none"
            break
        if out.terminated:
            failure = out.termination_kind
            break
    learner.episodes += 1
    return EpisodeRecord(t, success, sum(rewards), rewards, updates, failure if not success else "none")


def _corm_episode(learner, env, rm, hp, max_steps, on_step):
    q, rng, eta, mode = learner.q, learner.rng, learner.eta, hp.observation
    s = env.reset()
    o = env.observe(s, mode)
    group = rm.initial_group
    cap = _cap(hp, max_steps)
    chosen, flag = corm_high_level_select(group, eta, hp.xi, learner.used_transitions, rng, rm)
    entry = 0
    buffer = TransitionBuffer()
    visited = []
    rewards, updates, t = [], 0, 0
    success, failure = False, "step_limit"
    while t < cap:
        obj = rm.objective_of(chosen)
        a = _epsilon_greedy(q.row((o, obj)), hp.epsilon, rng)
        out = env.step(s, a)
        o2 = env.observe(out.next_state, mode)
        t += 1
        res = rm_step(rm, group, out.assignment)
        fired = res.fired.source if res.fired is not None else None
        n = corm_low_level_step(q, o, a, o2, group, rm, hp, assignment=out.assignment,
                                consumed=env.consumed(s), fired_member=fired,
                                env_terminated=out.terminated)
        if fired is not None:
            buffer.add(BufferEntry((o, rm.objective_of(fired)), a, fired, rm.objective_of(fired),
                                   t, t - entry, flag and fired == chosen))
            learner.used_transitions.add((fired, res.fired.target))
            visited.append((fired, entry))
        updates += n
        learner.updates += n
        learner.peak_step_updates = max(learner.peak_step_updates, n)
        learner.steps += 1
        rewards.append(float(res.reward))
        if on_step is not None:
            on_step(learner, float(res.reward))
        s, o = out.next_state, o2
        if fired is not None:
            group, entry = res.next, t
            if rm.is_terminal(group):
                visited.append((group[0], t))
                success, failure = sum(rewards) == 1, "none"
                break
            chosen, flag = corm_high_level_select(group, eta, hp.xi, learner.used_transitions, rng, rm)
        if out.terminated:
            failure = out.termination_kind
            break
    buffer.goal_reached = success
    n = corm_grounding_flush(buffer, q, t, learner.params, hp.alpha)
    updates += n
    learner.updates += n
    eta_update(eta, visited, t, success)
    learner.episodes += 1
    return EpisodeRecord(t, success, sum(rewards), rewards, updates, failure if not success else "none")


def greedy_rollout(learner: Learner, env, rm: RewardMachine, cap: int = 1000,
                   observation: str = "cell") -> EpisodeRecord:
    """Follow the greedy policy (no action or RM exploration) without learning."""
    s = env.reset()
    coupled = learner.algo == "corm"
    u = rm.initial_group if coupled else rm.initial
    chosen = _argmin_eta(u, learner.eta) if coupled else None
    rewards, t = [], 0
    while t < cap:
        o = env.observe(s, observation)
        key = (o, rm.objective_of(chosen)) if coupled else (o, u)
        out = env.step(s, _greedy(learner.q.row(key)))
        t += 1
        res = rm_step(rm, u, out.assignment)
        rewards.append(float(res.reward))
        s = out.next_state
        if rm.is_terminal(res.next):
            return EpisodeRecord(t, sum(rewards) == 1, sum(rewards), rewards, 0)
        if out.terminated:
            return EpisodeRecord(t, False, sum(rewards), rewards, 0, out.termination_kind)
        if coupled and res.fired is not None:
            chosen = _argmin_eta(res.next, learner.eta)
        u = res.next
    return EpisodeRecord(t, False, sum(rewards), rewards, 0, "step_limit")


# -- checkpoints -------------------------------------------------------------

def _encode_key(key):
    o, u = key
    if isinstance(o, GridState):
        return [list(o.pos), u, o.carried, sorted(o.remaining)]
    return [list(o), u]


def _decode_key(raw):
    if len(raw) == 2:
        return (tuple(raw[0]), raw[1])
    pos, u, carried, remaining = raw
    return (GridState(tuple(pos), carried, frozenset(remaining)), u)


def _finite(x):
    return None if x == INF else x


def learner_to_dict(learner: Learner) -> dict:
    """JSON-ready dump of a learner.

    Layout (version 1): ``algo``; ``init_q``; ``q`` as a list of
    ``[key, [q_up, q_down, q_left, q_right]]`` pairs where ``key`` is
    ``[[row, col], rm_key]`` (or ``[[row, col], rm_key, carried, remaining]``
    when tables are keyed on the full grid state); ``eta`` as ``{state: steps}`` (unvisited states omitted);
    ``best_length`` (``null`` for none yet); ``used_transitions`` as
    ``[source, target]`` pairs; ``rng`` as the ``random.Random`` state;
    counters ``steps``, ``episodes``, ``updates``, ``peak_step_updates``;
    and ``reward_params``.
    """
    version, internal, gauss = learner.rng.getstate()
    return {
        "version": CHECKPOINT_VERSION,
        "algo": learner.algo,
        "init_q": learner.q.init_value,
        "q": [[_encode_key(k), list(v)] for k, v in learner.q.values.items()],
        "eta": dict(learner.eta),
        "best_length": _finite(learner.params.best_length),
        "reward_params": {"gamma": learner.params.gamma, "window": learner.params.window,
                          "r_min": learner.params.r_min, "r_max": learner.params.r_max},
        "used_transitions": sorted(list(p) for p in learner.used_transitions),
        "rng": [version, list(internal), gauss],
        "steps": learner.steps,
        "episodes": learner.episodes,
        "updates": learner.updates,
        "peak_step_updates": learner.peak_step_updates,
    }


def learner_from_dict(data: dict) -> Learner:
    if data.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {data.get('version')!r}")
    q = QTable(data["init_q"])
    for raw, row in data["q"]:
        q.values[_decode_key(raw)] = list(row)
    rng = random.Random()
    version, internal, gauss = data["rng"]
    rng.setstate((version, tuple(internal), gauss))
    rp = data["reward_params"]
    best = data["best_length"]
    params = RewardParams(rp["gamma"], rp["window"], rp["r_min"], rp["r_max"], INF if best is None else best)
    return Learner(data["algo"], q, rng, EtaTable(data["eta"]), params,
                   {tuple(p) for p in data["used_transitions"]},
                   data["steps"], data["episodes"], data["updates"], data.get("peak_step_updates", 0))


def save_learner(learner: Learner, path, extra: Optional[dict] = None) -> None:
    data = learner_to_dict(learner)
    if extra:
        data["task"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)


def load_learner(path):
    """Return ``(learner, task_info)`` from a checkpoint file."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return learner_from_dict(data), data.get("task", {})

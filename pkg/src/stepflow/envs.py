"""Step-generation interface and enumerable synthetic reasoning environments.

Two built-in environments share one interface:

* :class:`ArithChainEnv` -- reach a target number with ``+d``, ``-d`` and
  ``*d`` steps, then box the answer.  Solutions are judged by their final
  answer, and a chain containing an arithmetic slip is never correct.
* :class:`FlowGridEnv` -- monotone walks on a ``H**D`` grid with an explicit
  ``stop`` step; every cell is a terminal.  Used for exact checks of
  reward-proportional sampling.

States are :class:`~stepflow.core.PartialSolution` values.  Each environment
maps a state to a hashable ``state_key``; states with equal keys have
identical futures, which is what the dynamic programs below memoize on.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Optional, Protocol, Sequence

import numpy as np

from .core import (
    ContractViolation,
    PartialSolution,
    Problem,
    Rollout,
    Step,
    answers_equal,
    extract_final_answer,
    join_steps,
)

DEFAULT_MAX_STATES = 100_000


class CapabilityError(RuntimeError):
    """The environment cannot perform the requested exact computation."""


class CapacityError(RuntimeError):
    """An enumeration exceeded its configured state bound."""


@dataclass(frozen=True)
class StepProposal:
    step: Step
    logprob: Optional[float]

    def __post_init__(self):
        if self.logprob is not None and self.logprob > 1e-12:
            raise ContractViolation(f"logprob must be <= 0, got {self.logprob}")


def tempered_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ContractViolation("temperature must be > 0")
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


class Environment:
    """Finite DAG of partial solutions.

    Subclasses implement ``legal_steps``, ``is_terminal``, ``is_correct``,
    ``state_key`` and ``features``.
    """

    name = "env"
    n_features = 0
    max_states = DEFAULT_MAX_STATES

    def problems(self) -> list[Problem]:
        raise NotImplementedError

    def initial_state(self, problem: Problem) -> PartialSolution:
        return PartialSolution(problem)

    def legal_steps(self, state: PartialSolution) -> list[str]:
        raise NotImplementedError

    def is_terminal(self, state: PartialSolution) -> bool:
        raise NotImplementedError

    def is_correct(self, state: PartialSolution) -> bool:
        raise NotImplementedError

    def state_key(self, state: PartialSolution) -> Hashable:
        return state.texts

    def terminate_step(self, state: PartialSolution) -> Optional[str]:
        """Text of an explicit terminate step, if the environment has one."""
        return None

    def step_logits(self, state: PartialSolution, steps: Sequence[str]) -> np.ndarray:
        """Preferences of the reference generator; uniform by default."""
        return np.zeros(len(steps))

    def features(self, state: PartialSolution, step: Optional[str]) -> list[int]:
        """Environment feature ids in ``[0, n_features)`` for a move (``None`` = sink)."""
        return []

    def text_features(self, question: str, prefix: str, step: str) -> list[int]:
        """Environment feature ids for a (question, prefix, step) text triple."""
        return []

    def step(self, state: PartialSolution, text: str) -> PartialSolution:
        if self.is_terminal(state):
            raise ContractViolation("cannot extend a terminal state")
        return state.extend([text])

    # exact computations -----------------------------------------------------

    supports_success_probability = False

    def success_probability(self, state: PartialSolution) -> float:
        return float(self.success_fraction(state))

    def success_fraction(self, state: PartialSolution) -> Fraction:
        """Exact probability that a uniformly random legal completion is correct."""
        if not self.supports_success_probability:
            raise CapabilityError(f"{self.name} has no notion of a correct terminal")
        memo = self.__dict__.setdefault("_success_memo", {})
        if len(memo) > self.max_states:
            memo.clear()
        return self._success(state, memo)

    def _success(self, state, memo) -> Fraction:
        key = (state.problem.statement, state.problem.gold_answer, self.state_key(state))
        if key in memo:
            return memo[key]
        if self.is_terminal(state):
            val = Fraction(1) if self.is_correct(state) else Fraction(0)
        else:
            steps = self.legal_steps(state)
            val = sum((self._success(self.step(state, s), memo) for s in steps), Fraction(0)) / len(steps)
        memo[key] = val
        return val


def transition_graph(env: Environment, problem: Problem) -> dict:
    """Adjacency ``{key: [child keys]}`` of the reachable DAG, bounded by ``env.max_states``."""
    root = env.initial_state(problem)
    graph: dict = {}
    stack = [root]
    while stack:
        s = stack.pop()
        k = env.state_key(s)
        if k in graph:
            continue
        if len(graph) >= env.max_states:
            raise CapacityError(f"more than {env.max_states} states")
        children = [] if env.is_terminal(s) else [env.step(s, t) for t in env.legal_steps(s)]
        graph[k] = [env.state_key(c) for c in children]
        stack.extend(children)
    return graph


def enumerate_terminals(env: Environment, problem: Problem) -> list[tuple[PartialSolution, int]]:
    """Every terminal with the number of distinct trajectories reaching it.

    Path counts are propagated in topological order over state keys; the
    returned state is a representative trajectory for each terminal key.
    """
    root = env.initial_state(problem)
    reps = {}
    graph: dict = {}
    stack = [root]
    while stack:
        s = stack.pop()
        k = env.state_key(s)
        if k in graph:
            continue
        if len(graph) >= env.max_states:
            raise CapacityError(f"more than {env.max_states} states")
        reps[k] = s
        children = [] if env.is_terminal(s) else [env.step(s, t) for t in env.legal_steps(s)]
        graph[k] = [env.state_key(c) for c in children]
        stack.extend(children)
    order = _topological(graph)
    counts = {k: 0 for k in graph}
    counts[env.state_key(root)] = 1
    for k in order:
        for c in graph[k]:
            counts[c] += counts[k]
    return [(reps[k], counts[k]) for k in order if not graph[k] and env.is_terminal(reps[k])]


def _topological(graph: dict) -> list:
    from graphlib import TopologicalSorter

    ts = TopologicalSorter()
    for k, children in graph.items():
        ts.add(k)
        for c in children:
            ts.add(c, k)
    return list(ts.static_order())


# --- generators ---------------------------------------------------------------


class StepGenerator(Protocol):
    def propose_steps(self, state: PartialSolution, k: int, temperature: float, rng) -> list[StepProposal]: ...

    def complete(self, state: PartialSolution, temperature: float, rng) -> Rollout: ...


class EnvGenerator:
    """Reference generator sampling the environment's tempered step preferences.

    With the default uniform preferences, temperature has no effect and
    rollouts are the uniformly random completions that
    :meth:`Environment.success_probability` is defined over.
    """

    def __init__(self, env: Environment, max_steps: int = 64):
        self.env = env
        self.max_steps = max_steps

    def distribution(self, state: PartialSolution, temperature: float) -> tuple[list[str], np.ndarray]:
        if self.env.is_terminal(state):
            raise ContractViolation("cannot propose steps from a terminal state")
        steps = self.env.legal_steps(state)
        return steps, tempered_probs(self.env.step_logits(state, steps), temperature)

    def propose_steps(self, state, k, temperature, rng) -> list[StepProposal]:
        if k < 1:
            raise ContractViolation("k must be >= 1")
        steps, p = self.distribution(state, temperature)
        picks = rng.choice(len(steps), size=k, p=p)
        n = len(state.steps)
        return [StepProposal(Step(steps[i], n), float(np.log(p[i]))) for i in picks]

    def complete(self, state, temperature, rng) -> Rollout:
        start = len(state.steps)
        cur = state
        for _ in range(self.max_steps):
            if self.env.is_terminal(cur):
                break
            steps, p = self.distribution(cur, temperature)
            cur = self.env.step(cur, steps[rng.choice(len(steps), p=p)])
        texts = cur.texts[start:]
        answer = extract_final_answer(join_steps(cur.steps)) if cur.steps else None
        correct = self.env.is_terminal(cur) and self.env.is_correct(cur)
        return Rollout(tuple(Step(t, i) for i, t in enumerate(texts)), answer, correct)


# --- ArithChain -------------------------------------------------------------------

_STATEMENT_RE = re.compile(r"Start from (-?\d+)\. .*?reach (-?\d+) in at most (\d+) operations", re.S)
_APPLY_RE = re.compile(r"^apply: (-?\d+) ([+\-*]) (\d+) = (-?\d+)$")
_ANSWER_RE = re.compile(r"^answer: \\boxed\{(-?\d+)\}$")

_OPS = {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b}


@dataclass(frozen=True)
class _ArithState:
    value: int
    depth: int
    slipped: bool
    answered: Optional[int]


class ArithChainEnv(Environment):
    """Reach ``target`` from ``start`` with at most ``max_depth`` arithmetic steps.

    Move texts are ``apply: a OP d = c`` and ``answer: \\boxed{v}``.  From every
    non-terminal state the legal moves are one correct step per (op, digit),
    optionally one slip (a ``+`` step whose stated result is off by one), and
    the answer step boxing the current value.  A terminal is correct iff its
    boxed answer equals the gold answer and no step in the chain is
    arithmetically wrong.
    """

    name = "arithchain"
    supports_success_probability = True

    def __init__(
        self,
        n_problems: int = 20,
        digits: Sequence[int] = (1, 2, 3),
        ops: Sequence[str] = ("+", "-", "*"),
        max_depth: int = 4,
        slips: bool = True,
        start_range: tuple[int, int] = (1, 9),
        seed: int = 0,
        max_states: int = DEFAULT_MAX_STATES,
    ):
        self.digits = tuple(int(d) for d in digits)
        self.ops = tuple(ops)
        for op in self.ops:
            if op not in _OPS:
                raise ValueError(f"unknown op {op!r}")
        self.max_depth = int(max_depth)
        self.slips = slips
        self.start_range = start_range
        self.seed = seed
        self.n_problems = n_problems
        self.max_states = max_states
        self._problems = self._generate(n_problems, seed)
        self._cache: dict = {}

    # -- problems
    def statement(self, start: int, target: int) -> str:
        ops = ", ".join(f"{op}d" for op in self.ops)
        digits = ", ".join(str(d) for d in self.digits)
        return (
            f"Start from {start}. Using steps {ops} with d in {{{digits}}}, "
            f"reach {target} in at most {self.max_depth} operations, then box the answer."
        )

    def make_problem(self, pid: str, start: int, target: int) -> Problem:
        return Problem(pid, self.statement(start, target), str(target))

    def _generate(self, n: int, seed: int) -> list[Problem]:
        rng = np.random.default_rng(seed)
        out = []
        lo, hi = self.start_range
        while len(out) < n:
            start = int(rng.integers(lo, hi + 1))
            value = start
            for _ in range(int(rng.integers(1, self.max_depth + 1))):
                op = self.ops[rng.integers(len(self.ops))]
                value = _OPS[op](value, self.digits[rng.integers(len(self.digits))])
            if value != start:
                out.append(self.make_problem(f"arith-{len(out)}", start, value))
        return out

    def problems(self) -> list[Problem]:
        return list(self._problems)

    def parse_problem(self, problem: Problem) -> tuple[int, int]:
        m = _STATEMENT_RE.search(problem.statement)
        if not m:
            raise ContractViolation(f"not an ArithChain problem: {problem.statement!r}")
        return int(m.group(1)), int(m.group(2))

    # -- state decoding
    def decode(self, state: PartialSolution) -> _ArithState:
        key = (state.problem.statement, state.texts)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if state.steps:
            prev = self.decode(PartialSolution(state.problem, state.steps[:-1]))
            out = self._advance(prev, state.steps[-1].text)
        else:
            start, _ = self.parse_problem(state.problem)
            out = _ArithState(start, 0, False, None)
        if len(self._cache) > 4 * self.max_states:
            self._cache.clear()
        self._cache[key] = out
        return out

    def _advance(self, st: _ArithState, text: str) -> _ArithState:
        if st.answered is not None:
            raise ContractViolation("cannot extend an answered chain")
        m = _ANSWER_RE.match(text)
        if m:
            v = int(m.group(1))
            return _ArithState(st.value, st.depth, st.slipped or v != st.value, v)
        m = _APPLY_RE.match(text)
        if m is None:
            return _ArithState(st.value, st.depth + 1, True, None)
        a, op, d, c = int(m.group(1)), m.group(2), int(m.group(3)), int(m.group(4))
        ok = a == st.value and op in self.ops and d in self.digits and _OPS[op](a, d) == c
        return _ArithState(c, st.depth + 1, st.slipped or not ok, None)

    def state_key(self, state):
        st = self.decode(state)
        return (st.value, st.depth, st.slipped, st.answered)

    def is_terminal(self, state) -> bool:
        st = self.decode(state)
        return st.answered is not None

    def is_correct(self, state) -> bool:
        st = self.decode(state)
        if st.answered is None or st.slipped:
            return False
        answer = extract_final_answer(state.text())
        return answer is not None and answers_equal(answer, state.problem.gold_answer)

    def legal_steps(self, state) -> list[str]:
        st = self.decode(state)
        if st.answered is not None:
            return []
        v = st.value
        out = []
        if st.depth < self.max_depth:
            for op in self.ops:
                for d in self.digits:
                    out.append(f"apply: {v} {op} {d} = {_OPS[op](v, d)}")
            if self.slips:
                d = self.digits[0]
                out.append(f"apply: {v} + {d} = {v + d + 1}")
        out.append(f"answer: \\boxed{{{v}}}")
        return out

    # -- features: op/digit identity, answer flag, consistency, distance and depth buckets
    _DIST_BUCKETS = (0, 1, 2, 5, 10, 20)

    @property
    def n_features(self) -> int:
        return len(self.ops) * len(self.digits) + 3 + 2 * (len(self._DIST_BUCKETS) + 1) + self.max_depth + 2

    def _bucket(self, dist: int) -> int:
        for i, b in enumerate(self._DIST_BUCKETS):
            if dist <= b:
                return i
        return len(self._DIST_BUCKETS)

    def _move_features(self, start_target, value, depth, slipped, text) -> list[int]:
        _, target = start_target
        n_od = len(self.ops) * len(self.digits)
        nb = len(self._DIST_BUCKETS) + 1
        feats = []
        m = _APPLY_RE.match(text) if text else None
        a = _ANSWER_RE.match(text) if text else None
        if m:
            op, d, c = m.group(2), int(m.group(3)), int(m.group(4))
            if op in self.ops and d in self.digits:
                feats.append(self.ops.index(op) * len(self.digits) + self.digits.index(d))
            ok = int(m.group(1)) == value and op in _OPS and _OPS[op](int(m.group(1)), d) == c
            feats.append(n_od + (1 if ok else 2))
            if ok:  # distance to the target only matters for a move that keeps the chain alive
                feats.append(n_od + 3 + self._bucket(abs(target - c)))
            depth += 1
        elif a:
            feats.append(n_od)
            feats.append(n_od + 3 + nb + self._bucket(abs(target - int(a.group(1)))))
        if slipped:
            feats.append(n_od + 2)
        feats.append(n_od + 3 + 2 * nb + min(depth, self.max_depth + 1))
        return feats

    def features(self, state, step):
        st = self.decode(state)
        return self._move_features(self.parse_problem(state.problem), st.value, st.depth, st.slipped, step)

    def text_features(self, question, prefix, step):
        try:
            p = Problem("q", question, "0")
            start_target = self.parse_problem(p)
        except ContractViolation:
            return []
        st = _ArithState(start_target[0], 0, False, None)
        for line in prefix.splitlines():
            if line.strip() and st.answered is None:
                st = self._advance(st, line.strip())
        return self._move_features(start_target, st.value, st.depth, st.slipped, step)


# --- FlowGrid ----------------------------------------------------------------------

_MOVE_RE = re.compile(r"^move x(\d+) to (\d+)$")
STOP = "stop"


def two_mode_reward(dim: int, side: int, base: float = 0.01, heights=(1.0, 0.8), width: float = 1.0):
    """Two Gaussian bumps in opposite corners over a small positive floor."""
    hi = side - 2 if side > 2 else side - 1
    lo = 1 if side > 2 else 0
    c1 = np.array([hi] + [lo] * (dim - 1), dtype=float)
    c2 = np.array([lo] * (dim - 1) + [hi], dtype=float)

    def reward(cell) -> float:
        x = np.asarray(cell, dtype=float)
        r = base
        for c, h in zip((c1, c2), heights):
            r += h * math.exp(-float(np.sum((x - c) ** 2)) / (2 * width**2))
        return r

    return reward


class FlowGridEnv(Environment):
    """Monotone walk on ``{0..H-1}^D`` ending with an explicit ``stop`` step."""

    name = "flowgrid"

    def __init__(self, dim: int = 2, side: int = 8, reward=None, max_states: int = DEFAULT_MAX_STATES):
        self.dim = int(dim)
        self.side = int(side)
        if self.dim < 1 or self.side < 1:
            raise ValueError("dim and side must be >= 1")
        self.max_states = max_states
        self.reward_fn = reward or two_mode_reward(self.dim, self.side)
        self._problem = Problem(
            "grid", f"Walk on a {self.dim}-dimensional grid of side {self.side} and stop at a cell.", "-"
        )

    def problems(self):
        return [self._problem]

    def cells(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in c) for c in np.ndindex(*([self.side] * self.dim))]

    def cell(self, state: PartialSolution) -> tuple[int, ...]:
        pos = [0] * self.dim
        for s in state.steps:
            m = _MOVE_RE.match(s.text)
            if m:
                pos[int(m.group(1))] = int(m.group(2))
        return tuple(pos)

    def is_terminal(self, state) -> bool:
        return bool(state.steps) and state.steps[-1].text == STOP

    def is_correct(self, state) -> bool:
        raise CapabilityError("FlowGrid terminals carry rewards, not correctness")

    def state_key(self, state):
        return (self.cell(state), self.is_terminal(state))

    def terminate_step(self, state):
        return STOP

    def legal_steps(self, state):
        if self.is_terminal(state):
            return []
        c = self.cell(state)
        out = [f"move x{i} to {c[i] + 1}" for i in range(self.dim) if c[i] < self.side - 1]
        out.append(STOP)
        return out

    def reward(self, cell) -> float:
        return float(self.reward_fn(cell))

    def path_count(self, cell) -> int:
        """Number of monotone paths from the origin to ``cell`` (a multinomial)."""
        n = math.factorial(sum(cell))
        for v in cell:
            n //= math.factorial(v)
        return n

    def target_distribution(self) -> dict:
        r = {c: self.reward(c) for c in self.cells()}
        z = sum(r.values())
        return {c: v / z for c, v in r.items()}

    @property
    def n_features(self) -> int:
        return self.side**self.dim * (self.dim + 1)

    def cell_index(self, cell) -> int:
        return int(np.ravel_multi_index(cell, [self.side] * self.dim))

    def features(self, state, step):
        c = self.cell(state)
        if step is None or step == STOP:
            a = self.dim
        else:
            a = int(_MOVE_RE.match(step).group(1))
        return [self.cell_index(c) * (self.dim + 1) + a]


def make_env(spec: dict) -> Environment:
    """Build an environment from a config mapping with a ``kind`` key."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "flowgrid":
        spec.pop("seed", None)
    if kind == "arithchain":
        return ArithChainEnv(**spec)
    if kind == "flowgrid":
        return FlowGridEnv(**spec)
    raise ValueError(f"unknown environment kind {kind!r}")

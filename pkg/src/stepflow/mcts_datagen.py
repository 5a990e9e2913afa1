"""MCTS-based generation of step-quality labels.

Every evaluated node stores its ``k`` rollouts and a continuous Monte Carlo
value ``MC(s) = correct / k``.  Incorrect rollouts of open nodes form the
candidate pool; the PUCT rule ``Q(s, r) + U(s)`` picks the next one, and a
binary search over its steps locates the first step whose MC is zero.  That
step is stored with value 0 and its branch is closed.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import ContractViolation, LabeledStep, PartialSolution, Problem, Rollout, Step, join_steps

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class GenerationError(RuntimeError):
    """Rollout generation failed after retries; ``partial`` holds what was produced."""

    def __init__(self, msg: str, partial: Sequence[Rollout] = ()):
        super().__init__(msg)
        self.partial = list(partial)


class BudgetExhausted(Exception):
    pass


@dataclass
class DatagenParams:
    k: int = 96
    temperature: float = 0.6
    alpha: float = 0.5
    beta: float = 0.9
    length_norm: float = 500.0
    c_puct: float = 0.125
    rollout_budget: int = 3000
    max_depth: int = 64
    max_retries: int = 2
    workers: int = 1

    def validate(self, prefix: str = "datagen") -> None:
        checks = {
            "k": self.k >= 1,
            "temperature": self.temperature > 0,
            "alpha": 0 < self.alpha <= 1,
            "beta": 0 < self.beta <= 1,
            "length_norm": self.length_norm > 0,
            "c_puct": self.c_puct > 0,
            "rollout_budget": self.rollout_budget >= 0,
            "max_depth": self.max_depth >= 1,
            "max_retries": self.max_retries >= 0,
            "workers": self.workers >= 1,
        }
        for key, ok in checks.items():
            if not ok:
                raise ValueError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")


@dataclass
class TreeNode:
    node_id: int
    state: PartialSolution
    parent: Optional[int]
    visit_count: int = 0
    mc_value: Optional[float] = None
    rollouts: list = field(default_factory=list)
    children: list = field(default_factory=list)
    expanded: set = field(default_factory=set)

    @property
    def is_open(self) -> bool:
        return self.mc_value is not None and self.mc_value > 0


class Tree:
    """Search tree for one problem; node 0 is the root (empty prefix)."""

    def __init__(self, problem: Problem):
        self.problem = problem
        self.nodes: dict[int, TreeNode] = {}
        self.by_prefix: dict[tuple, int] = {}
        self.rollouts_used = 0
        self._next_id = 0
        self.add(PartialSolution(problem))

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    def add(self, state: PartialSolution) -> TreeNode:
        texts = state.texts
        if texts in self.by_prefix:
            return self.nodes[self.by_prefix[texts]]
        parent = None
        for cut in range(len(texts) - 1, -1, -1):
            if texts[:cut] in self.by_prefix:
                parent = self.by_prefix[texts[:cut]]
                break
        node = TreeNode(self._next_id, state, parent)
        self._next_id += 1
        self.nodes[node.node_id] = node
        self.by_prefix[texts] = node.node_id
        if parent is not None:
            p = self.nodes[parent]
            # re-hang existing descendants that pass through the new node
            for cid in list(p.children):
                if self.nodes[cid].state.texts[: len(texts)] == texts:
                    p.children.remove(cid)
                    node.children.append(cid)
                    self.nodes[cid].parent = node.node_id
            p.children.append(node.node_id)
        return node

    def descendants(self, node_id: int) -> list[int]:
        out, stack = [], list(self.nodes[node_id].children)
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(self.nodes[n].children)
        return out

    def prune_below(self, node_id: int) -> None:
        for d in self.descendants(node_id):
            node = self.nodes.pop(d)
            del self.by_prefix[node.state.texts]
        self.nodes[node_id].children = []

    def has_zero_ancestor(self, texts: tuple) -> bool:
        for cut in range(len(texts) - 1, 0, -1):
            nid = self.by_prefix.get(texts[:cut])
            if nid is not None and self.nodes[nid].mc_value == 0:
                return True
        return False

    def evaluated(self) -> list[TreeNode]:
        """Evaluated non-root nodes in insertion order."""
        return [n for i, n in sorted(self.nodes.items()) if i != 0 and n.mc_value is not None]

    # serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "problem": self.problem.to_dict(),
            "rollouts_used": self.rollouts_used,
            "next_id": self._next_id,
            "nodes": [
                {
                    "node_id": n.node_id,
                    "steps": list(n.state.texts),
                    "parent": n.parent,
                    "visit_count": n.visit_count,
                    "mc_value": n.mc_value,
                    "rollouts": [r.to_dict() for r in n.rollouts],
                    "children": list(n.children),
                    "expanded": sorted(n.expanded),
                }
                for _, n in sorted(self.nodes.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        tree = cls.__new__(cls)
        tree.problem = Problem.from_dict(d["problem"])
        tree.rollouts_used = d["rollouts_used"]
        tree._next_id = d["next_id"]
        tree.nodes, tree.by_prefix = {}, {}
        for nd in d["nodes"]:
            state = PartialSolution(tree.problem).extend(nd["steps"])
            node = TreeNode(
                nd["node_id"],
                state,
                nd["parent"],
                nd["visit_count"],
                nd["mc_value"],
                [Rollout.from_dict(r) for r in nd["rollouts"]],
                list(nd["children"]),
                set(nd["expanded"]),
            )
            tree.nodes[node.node_id] = node
            tree.by_prefix[state.texts] = node.node_id
        return tree


# --- formulas -------------------------------------------------------------------


def rollout_value(mc: float, rollout_len: float, params: DatagenParams) -> float:
    """``Q(s, r) = alpha**(1 - MC(s)) * beta**(len(r) / L)``."""
    return params.alpha ** (1.0 - mc) * params.beta ** (rollout_len / params.length_norm)


def exploration_bonus(visit_count: int, visit_counts: Sequence[int], c_puct: float) -> float:
    """``U(s) = c_puct * sqrt(sum(visit_counts)) / (1 + N(s))``."""
    return c_puct * math.sqrt(sum(visit_counts)) / (1 + visit_count)


def rollout_length(rollout: Rollout) -> int:
    """Length used by the value term: whitespace-separated words."""
    return sum(len(s.text.split()) for s in rollout.steps)


# --- Monte Carlo estimation -----------------------------------------------------------


def mc_estimate(prefix: PartialSolution, generator, params: DatagenParams, rng) -> tuple[float, list[Rollout]]:
    """Fraction of ``k`` sampled completions of ``prefix`` that are correct.

    Each rollout draws from its own child stream of ``rng`` so results do not
    depend on ``params.workers``.
    """
    if params.k < 1:
        raise ContractViolation("k must be >= 1")
    streams = rng.spawn(params.k)

    def one(i):
        err = None
        for _ in range(params.max_retries + 1):
            try:
                return generator.complete(prefix, params.temperature, streams[i])
            except GenerationError:
                raise
            except Exception as e:  # noqa: BLE001 - retried, then surfaced
                err = e
        raise err

    rollouts: list[Rollout] = []
    try:
        if params.workers > 1:
            with ThreadPoolExecutor(params.workers) as ex:
                for r in ex.map(one, range(params.k)):
                    rollouts.append(r)
        else:
            for i in range(params.k):
                rollouts.append(one(i))
    except Exception as e:
        raise GenerationError(f"rollout generation failed: {e}", rollouts) from e
    correct = sum(r.correct for r in rollouts)
    return correct / params.k, rollouts


# --- selection and localization ------------------------------------------------------------


def candidates(tree: Tree) -> list[tuple[TreeNode, int]]:
    out = []
    for _, node in sorted(tree.nodes.items()):
        if not node.is_open:
            continue
        for i, r in enumerate(node.rollouts):
            if not r.correct and r.steps and i not in node.expanded:
                out.append((node, i))
    return out


def select_candidate(tree: Tree, params: DatagenParams) -> Optional[tuple[TreeNode, int]]:
    """Pair maximizing ``Q(s, r) + U(s)``; ``None`` when the pool is exhausted.

    Ties go to the earliest node, then the lowest rollout index.
    """
    pool = candidates(tree)
    if not pool:
        return None
    visits = [n.visit_count for n in tree.nodes.values()]
    best, best_score = None, -math.inf
    for node, i in pool:
        score = rollout_value(node.mc_value, rollout_length(node.rollouts[i]), params) + exploration_bonus(
            node.visit_count, visits, params.c_puct
        )
        if score > best_score:
            best, best_score = (node, i), score
    return best


def find_first_error(rollout_steps: Sequence, evaluate: Callable[[int], float]) -> Optional[int]:
    """Binary search for the first step index whose evaluated MC is 0.

    ``evaluate(i)`` returns the MC of the prefix extended with steps
    ``0..i``.  Correctness is assumed monotone along the rollout, so at most
    ``floor(log2 n) + 1`` evaluations are made.
    """
    lo, hi = 0, len(rollout_steps) - 1
    found = None
    while lo <= hi:
        mid = (lo + hi) // 2
        if evaluate(mid) == 0:
            found, hi = mid, mid - 1
        else:
            lo = mid + 1
    return found


# --- main loop -------------------------------------------------------------------------------


def _evaluate_node(tree: Tree, state: PartialSolution, generator, params: DatagenParams, rng) -> TreeNode:
    node = tree.add(state)
    if node.mc_value is not None:
        return node
    env = getattr(generator, "env", None)
    if env is not None and env.is_terminal(state):
        # nothing to sample: the judged solution itself is the only completion
        done = generator.complete(state, params.temperature, rng)
        node.mc_value = 1.0 if done.correct else 0.0
        node.rollouts = [done] * params.k
    else:
        if tree.rollouts_used + params.k > params.rollout_budget:
            tree.nodes.pop(node.node_id)
            del tree.by_prefix[state.texts]
            if node.parent is not None:
                tree.nodes[node.parent].children.remove(node.node_id)
                for cid in node.children:
                    tree.nodes[cid].parent = node.parent
                    tree.nodes[node.parent].children.append(cid)
            raise BudgetExhausted
        node.mc_value, node.rollouts = mc_estimate(state, generator, params, rng)
        tree.rollouts_used += params.k
    node.visit_count += 1
    if node.mc_value == 0:
        tree.prune_below(node.node_id)
    return node


def run_problem(problem: Problem, generator, params: DatagenParams, rng) -> Tree:
    tree = Tree(problem)
    try:
        _evaluate_node(tree, tree.root.state, generator, params, rng)
    except BudgetExhausted:
        return tree
    while True:
        pick = select_candidate(tree, params)
        if pick is None:
            break
        node, ridx = pick
        node.expanded.add(ridx)
        node.visit_count += 1
        steps = node.rollouts[ridx].texts[: params.max_depth]

        def evaluate(i: int) -> float:
            texts = node.state.texts + tuple(steps[: i + 1])
            if tree.has_zero_ancestor(texts):
                return 0.0
            return _evaluate_node(tree, node.state.extend(steps[: i + 1]), generator, params, rng).mc_value

        try:
            find_first_error(steps, evaluate)
        except BudgetExhausted:
            break
    return tree


def problem_rng(seed: int, index: int):
    return np.random.default_rng([seed, index])


def run_datagen(
    problems: Iterable[Problem],
    generator,
    params: DatagenParams,
    seed: int = 0,
    checkpoint: Optional[str] = None,
) -> tuple[list[Tree], list[LabeledStep]]:
    """Run the search over every problem; resumable through a JSON checkpoint."""
    params.validate()
    problems = list(problems)
    state = _load_checkpoint(checkpoint, params) if checkpoint else {"trees": {}}
    trees = []
    for i, problem in enumerate(problems):
        done = state["trees"].get(problem.id)
        if done is not None:
            trees.append(Tree.from_dict(done))
            continue
        tree = run_problem(problem, generator, params, problem_rng(seed, i))
        log.info("problem %s: %d nodes, %d rollouts", problem.id, len(tree.nodes), tree.rollouts_used)
        trees.append(tree)
        if checkpoint:
            state["trees"][problem.id] = tree.to_dict()
            _save_checkpoint(checkpoint, params, state)
    dataset = [rec for t in trees for rec in collect_dataset(t)]
    return trees, dataset


def collect_dataset(tree: Tree) -> list[LabeledStep]:
    """One mcts-provenance record per evaluated node, rollouts attached."""
    out = []
    for node in tree.evaluated():
        texts = node.state.texts
        out.append(
            LabeledStep(
                problem_id=tree.problem.id,
                prefix=join_steps(texts[:-1]),
                step=texts[-1],
                value=float(node.mc_value),
                provenance="mcts",
                question=tree.problem.statement,
                rollouts=tuple(node.rollouts),
            )
        )
    return out


# --- IO ------------------------------------------------------------------------------------


def _save_checkpoint(path: str, params: DatagenParams, state: dict) -> None:
    payload = {"version": CHECKPOINT_VERSION, "params": asdict(params), "trees": state["trees"]}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)


def _load_checkpoint(path: str, params: DatagenParams) -> dict:
    if not os.path.exists(path):
        return {"trees": {}}
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path} has unsupported version {payload.get('version')}")
    saved = dict(payload["params"])
    mine = asdict(params)
    saved.pop("workers", None)
    mine.pop("workers", None)
    if saved != mine:
        raise ValueError(f"checkpoint {path} was written with different datagen parameters")
    return {"trees": payload["trees"]}


def rollout_rows(records: Sequence[LabeledStep]) -> list[dict]:
    """Rows of the rollouts JSONL; ``node_id`` is the record's line number."""
    return [
        {"node_id": i, "rollout_steps": list(r.texts), "correct": r.correct}
        for i, rec in enumerate(records)
        for r in rec.rollouts
    ]


def attach_rollouts(records: Sequence[LabeledStep], rows: Iterable[dict]) -> list[LabeledStep]:
    """Inverse of :func:`rollout_rows`: re-attach stored rollouts to their records."""
    from dataclasses import replace

    from .core import extract_final_answer

    per: dict[int, list] = {}
    for row in rows:
        steps = tuple(Step(t, j) for j, t in enumerate(row["rollout_steps"]))
        ans = extract_final_answer(join_steps(steps)) if steps else None
        if row["correct"] and ans is None:
            ans = ""
        per.setdefault(int(row["node_id"]), []).append(Rollout(steps, ans, bool(row["correct"])))
    return [replace(rec, rollouts=tuple(per.get(i, ()))) for i, rec in enumerate(records)]

"""Rollout reuse with similarity grouping.

Steps extracted from the stored rollouts of one MCTS node are grouped by a
calculation-aware token edit similarity; each group receives one value:
1 if every member came from a correct rollout, 0 if every member came from
an incorrect one, and the node's MC otherwise.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .core import ContractViolation, LabeledStep, join_steps
from .features import calculation_results as _calculation_results
from .features import tokenize


@dataclass
class AugmentParams:
    threshold: float = 0.85
    mask_numbers: bool = False

    def validate(self, prefix: str = "augment") -> None:
        if not 0 < self.threshold <= 1:
            raise ValueError(f"{prefix}.threshold: value {self.threshold!r} out of range")


@dataclass
class StepRecord:
    """One step pulled out of a stored rollout."""

    text: str
    prefix: tuple
    correct: bool
    rollout_index: int
    position: int


@dataclass
class SimilarityGroup:
    members: list = field(default_factory=list)
    parent_mc: Optional[float] = None
    assigned_value: Optional[float] = None

    @property
    def representative(self) -> StepRecord:
        return self.members[0]


def calculation_results(step_text: str) -> list[Fraction]:
    return _calculation_results(step_text)


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance over arbitrary sequences (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def step_similarity(a: str, b: str, mask_numbers: bool = False) -> float:
    """0 when both steps calculate and their result multisets differ, else token edit similarity."""
    ra, rb = calculation_results(a), calculation_results(b)
    if ra and rb and Counter(ra) != Counter(rb):
        return 0.0
    ta, tb = tokenize(a, mask_numbers), tokenize(b, mask_numbers)
    longest = max(len(ta), len(tb))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(ta, tb) / longest


def group_steps(records: Sequence[StepRecord], params: AugmentParams, parent_mc: Optional[float] = None) -> list[SimilarityGroup]:
    """Greedy first-match grouping against each group's representative, in input order."""
    groups: list[SimilarityGroup] = []
    for rec in records:
        for g in groups:
            if step_similarity(g.representative.text, rec.text, params.mask_numbers) >= params.threshold:
                g.members.append(rec)
                break
        else:
            groups.append(SimilarityGroup([rec], parent_mc))
    return groups


def assign_group_value(group: SimilarityGroup) -> float:
    flags = {m.correct for m in group.members}
    if flags == {True}:
        return 1.0
    if flags == {False}:
        return 0.0
    if group.parent_mc is None:
        raise ValueError("mixed similarity group without the parent node's MC value")
    return float(group.parent_mc)


def node_step_records(node: LabeledStep) -> list[StepRecord]:
    base = tuple(node.prefix.splitlines()) + (node.step,) if node.prefix else (node.step,)
    out = []
    for ri, r in enumerate(node.rollouts):
        for pos, s in enumerate(r.steps):
            out.append(StepRecord(s.text, base + r.texts[:pos], r.correct, ri, pos))
    return out


def augment_node(node: LabeledStep, params: AugmentParams) -> tuple[list[LabeledStep], list[SimilarityGroup]]:
    """Reuse the rollouts stored on one mcts record.

    A rollout stops contributing after its first step whose group value is 0;
    that step itself is kept.  Nodes valued 0 contribute nothing because
    their rollouts continue from an incorrect step.
    """
    if node.value == 0 or not node.rollouts:
        return [], []
    records = node_step_records(node)
    groups = group_steps(records, params, parent_mc=node.value)
    value_of = {}
    for g in groups:
        g.assigned_value = assign_group_value(g)
        for m in g.members:
            value_of[(m.rollout_index, m.position)] = g.assigned_value
    out = []
    stopped: set = set()
    for rec in records:
        if rec.rollout_index in stopped:
            continue
        v = value_of[(rec.rollout_index, rec.position)]
        out.append(
            LabeledStep(
                problem_id=node.problem_id,
                prefix=join_steps(rec.prefix),
                step=rec.text,
                value=v,
                provenance="rollout-reuse",
                question=node.question,
            )
        )
        if v == 0:
            stopped.add(rec.rollout_index)
    return out, groups


def augment_dataset(nodes: Iterable, params: Optional[AugmentParams] = None) -> list[LabeledStep]:
    """mcts records followed by their rollout-reuse records.

    ``nodes`` is a list of mcts records with attached rollouts, or search
    trees (collected first).
    """
    from .mcts_datagen import Tree, collect_dataset

    params = params or AugmentParams()
    params.validate()
    records: list[LabeledStep] = []
    for item in nodes:
        if isinstance(item, Tree):
            records.extend(collect_dataset(item))
        else:
            records.append(item)
    out = list(records)
    for rec in records:
        if rec.provenance != "mcts":
            raise ContractViolation("augmentation expects mcts records")
        extra, _ = augment_node(rec, params)
        out.extend(extra)
    return out


def summary(records: Sequence[LabeledStep], groups_per_node: Optional[Sequence[int]] = None) -> dict:
    """Counts by provenance plus a 10-bin value histogram."""
    hist = [0] * 10
    for r in records:
        hist[min(int(r.value * 10), 9)] += 1
    prov = Counter(r.provenance for r in records)
    out = {
        "records": len(records),
        "by_provenance": dict(sorted(prov.items())),
        "value_histogram": {"edges": [i / 10 for i in range(11)], "counts": hist},
        "zero": sum(r.value == 0 for r in records),
        "one": sum(r.value == 1 for r in records),
        "intermediate": sum(0 < r.value < 1 for r in records),
    }
    if groups_per_node is not None:
        out["groups"] = int(sum(groups_per_node))
    return out

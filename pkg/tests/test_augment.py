from functools import lru_cache

import numpy as np
import pytest

from stepflow.augment import (
    AugmentParams,
    SimilarityGroup,
    StepRecord,
    assign_group_value,
    augment_dataset,
    augment_node,
    edit_distance,
    group_steps,
    step_similarity,
    summary,
)
from stepflow.core import ContractViolation, LabeledStep, Rollout, Step
from stepflow.features import tokenize


def _dp_distance(a, b):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def test_similarity_examples():
    assert step_similarity("Calculate: 24 - 6 = 18", "Calculate: 24 - 6 = 18") == 1.0
    assert step_similarity("24 - 6 = 18", "24 - 6 = 16") == 0.0
    assert step_similarity("", "") == 1.0


PAIRS = [
    ("we add the two numbers", "we add both numbers"),
    ("so x equals five", "so x equals 5"),
    ("first compute the sum", "then compute the product"),
    ("a b c d", "d c b a"),
    ("", "nothing"),
    ("one", "one"),
    ("the area is base times height", "the area is half base times height"),
    ("divide both sides by 3", "divide both sides by three"),
    ("let n be the count", "let m be the count of apples"),
    ("12 + 3 = 15 so far", "12 + 3 = 15 in total"),
]


@pytest.mark.parametrize("a,b", PAIRS)
def test_edit_distance_matches_dp_oracle(a, b):
    ta, tb = tokenize(a), tokenize(b)
    assert edit_distance(ta, tb) == _dp_distance(tuple(ta), tuple(tb))


def test_edit_distance_random_strings():
    r = np.random.default_rng(0)
    for _ in range(200):
        a = tuple(r.integers(0, 4, size=r.integers(0, 9)))
        b = tuple(r.integers(0, 4, size=r.integers(0, 9)))
        assert edit_distance(a, b) == _dp_distance(a, b)


def _rec(text, correct=True, ri=0, pos=0):
    return StepRecord(text, (), correct, ri, pos)


def test_distinct_and_duplicate_grouping():
    p = AugmentParams()
    distinct = [_rec(t) for t in ("1 + 1 = 2", "2 + 2 = 4", "3 + 3 = 6")]
    assert len(group_steps(distinct, p)) == 3
    dup = [_rec("the same step") for _ in range(4)]
    assert len(group_steps(dup, p)) == 1


def test_grouping_matches_representative_oracle():
    r = np.random.default_rng(1)
    vocab = ["add", "the", "sum", "of", "both", "terms", "now", "so"]
    base = [" ".join(r.choice(vocab, size=6)) for _ in range(5)]
    texts = []
    for _ in range(20):
        words = base[r.integers(5)].split()
        if r.random() < 0.5:
            words[r.integers(len(words))] = str(r.choice(vocab))
        texts.append(" ".join(words))
    recs = [_rec(t, ri=i) for i, t in enumerate(texts)]
    p = AugmentParams(threshold=0.8)
    sim = np.array([[step_similarity(a, b) for b in texts] for a in texts])
    reps, assign = [], []
    for i in range(len(texts)):
        hit = next((g for g, rep in enumerate(reps) if sim[rep, i] >= p.threshold), None)
        if hit is None:
            reps.append(i)
            hit = len(reps) - 1
        assign.append(hit)
    groups = group_steps(recs, p)
    got = [None] * len(texts)
    for g, grp in enumerate(groups):
        for m in grp.members:
            got[m.rollout_index] = g
    assert got == assign


def test_group_values():
    assert assign_group_value(SimilarityGroup([_rec("a", True), _rec("a", True)], 0.5)) == 1.0
    assert assign_group_value(SimilarityGroup([_rec("a", False), _rec("a", False)], 0.5)) == 0.0
    assert assign_group_value(SimilarityGroup([_rec("a", True), _rec("a", False)], 0.5)) == 0.5
    with pytest.raises(ValueError):
        assign_group_value(SimilarityGroup([_rec("a", True), _rec("a", False)], None))


def _node(rollouts, value=0.5):
    return LabeledStep("p", "", "start", value, "mcts", "q", tuple(rollouts))


def _roll(texts, correct):
    return Rollout(tuple(Step(t, i) for i, t in enumerate(texts)), "1" if correct else None, correct)


def test_unique_one_step_rollouts_give_k_records():
    k = 6
    node = _node([_roll([f"{i} * {i} = {i * i + 100}"], i % 2 == 0) for i in range(k)])
    out, groups = augment_node(node, AugmentParams())
    assert len(out) == k and len(groups) == k
    assert all(r.provenance == "rollout-reuse" and r.prefix == "start" for r in out)


def test_empty_rollout_store():
    node = _node([])
    assert augment_dataset([node]) == [node]


def test_no_record_after_a_zero_step():
    node = _node([_roll(["bad step 1 = 2", "after it", "answer: \\boxed{0}"], False), _roll(["ok 2 = 2", "answer: \\boxed{1}"], True)])
    out, _ = augment_node(node, AugmentParams())
    bad = [r for r in out if r.step.startswith("bad")]
    assert bad and bad[0].value == 0
    assert not any(r.prefix.startswith("start\nbad") for r in out)


def test_zero_node_contributes_nothing():
    assert augment_node(_node([_roll(["x"], False)], value=0.0), AugmentParams()) == ([], [])


def test_count_matches_independent_recount():
    r = np.random.default_rng(2)
    nodes = []
    for n in range(5):
        rolls = []
        for _ in range(4):
            length = int(r.integers(1, 4))
            ok = bool(r.random() < 0.5)
            rolls.append(_roll([f"step {n} {int(r.integers(3))} {j}" for j in range(length)], ok))
        nodes.append(_node(rolls, value=float(r.choice([0.25, 0.5, 1.0]))))
    out = augment_dataset(nodes)
    expected = len(nodes)
    for node in nodes:
        extra, groups = augment_node(node, AugmentParams())
        value = {(m.rollout_index, m.position): g.assigned_value for g in groups for m in g.members}
        for ri, ro in enumerate(node.rollouts):
            for pos in range(len(ro.steps)):
                expected += 1
                if value[(ri, pos)] == 0:
                    break
    assert len(out) == expected


def test_dataset_rejects_non_mcts_records():
    with pytest.raises(ContractViolation):
        augment_dataset([LabeledStep("p", "", "s", 1.0, "rollout-reuse")])


def test_summary_counts():
    recs = [LabeledStep("p", "", "s", v, "mcts") for v in (0.0, 0.5, 1.0, 1.0)]
    s = summary(recs)
    assert s["records"] == 4 and s["zero"] == 1 and s["one"] == 2 and s["intermediate"] == 1
    assert sum(s["value_histogram"]["counts"]) == 4

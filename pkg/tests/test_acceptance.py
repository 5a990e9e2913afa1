"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the summary."""
import filecmp
import math
import os
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import ACCEPTANCE, ChoiceEnv
from schemas import validate_run_dir
from stepflow.augment import AugmentParams, SimilarityGroup, StepRecord, assign_group_value, augment_dataset, step_similarity
from stepflow.cli import main, smooth
from stepflow.config import bundled_config_path
from stepflow.core import Problem
from stepflow.envs import ArithChainEnv, EnvGenerator, FlowGridEnv
from stepflow.gfn import (
    BaselineConfig,
    GFNConfig,
    GridReward,
    PolicyModel,
    PRMReward,
    ReplayBuffer,
    TrajectoryRecord,
    entropy,
    l1_distance,
    recompute_logprobs,
    sample_trajectory,
    subtb_gradient,
    subtb_loss,
    terminal_distribution,
    train_baseline_maximizer,
    train_gfn,
)
from stepflow.mcts_datagen import DatagenParams, find_first_error, mc_estimate, run_datagen
from stepflow.prm import FeaturizedScorer, OraclePRM, PRMTrainConfig, bce_gradient, bce_loss, roc_auc, sigmoid, train_prm
from stepflow.search_eval import accuracy_eval, guided_search, pairwise_similarity, policy_sampler


def record(n, title, ok, detail):
    ACCEPTANCE[n] = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    assert ok, ACCEPTANCE[n]


# --- shared two-mode FlowGrid runs -----------------------------------------------------------

GRID_DIM, GRID_SIDE = 2, 8
GFN_UPDATES = 2000


@pytest.fixture(scope="module")
def grid_gfn():
    env = FlowGridEnv(GRID_DIM, GRID_SIDE)
    policy = PolicyModel(env, hash_dim=0)
    cfg = GFNConfig(lam=1.0, learning_rate=0.05, k=16, batch_size=16, temperature=1.0, iterations=GFN_UPDATES, lr_schedule="cosine")
    t0 = time.perf_counter()
    _, metrics = train_gfn(env.problems(), policy, GridReward(env), cfg, np.random.default_rng(0))
    return env, policy, len(metrics), time.perf_counter() - t0


@pytest.fixture(scope="module")
def grid_baseline():
    env = FlowGridEnv(GRID_DIM, GRID_SIDE)
    policy = PolicyModel(env, hash_dim=0)
    cfg = BaselineConfig(learning_rate=0.05, batch_size=64, iterations=100)
    train_baseline_maximizer(env.problems(), policy, GridReward(env), cfg, np.random.default_rng(0))
    return policy


def test_criterion_01_reward_proportional_sampling(grid_gfn):
    env, policy, updates, seconds = grid_gfn
    p = env.problems()[0]
    l1 = l1_distance(terminal_distribution(policy, env, p), env.target_distribution())
    ok = l1 <= 0.05 and updates <= 50_000 and seconds <= 300
    record(1, "reward-proportional sampling", ok, f"L1={l1:.4f} after {updates} updates in {seconds:.0f}s")


def test_criterion_02_subtb_correctness():
    prob = Problem("p", "q", "0")
    lr, lpf, lps = np.array([0.0, -1.0, -2.5]), np.array([-0.4, -0.9]), np.array([-1.1, -0.6, -0.2])
    zero = subtb_loss(TrajectoryRecord(prob, ("a", "b"), lpf, lps, lr), lam=0.0)
    c = np.concatenate([[0.0], np.cumsum(lpf)])
    balanced = subtb_loss(TrajectoryRecord(prob, ("a", "b"), lpf, lps, lps + c + 0.3), lam=1.0)

    env = ArithChainEnv(n_problems=3, digits=(1, 2), ops=("+", "*"), max_depth=2, seed=1)
    r = np.random.default_rng(0)
    policy = PolicyModel(env, hash_dim=32)
    policy.theta = r.normal(0, 0.5, policy.size)
    policy.theta[-1] = -2.0
    reward = PRMReward(OraclePRM(env))
    worst, h = 0.0, 1e-5
    for t in range(10):
        rec = sample_trajectory(policy, env, env.problems()[t % 3], 1.0, r, reward)
        _, g = subtb_gradient(rec, policy, 1.0)
        num = np.zeros(policy.size)
        for i in range(policy.size):
            th = policy.theta.copy()
            th[i] += h
            up = subtb_loss(rec, 1.0, *recompute_logprobs(policy, rec, th))
            th[i] -= 2 * h
            num[i] = (up - subtb_loss(rec, 1.0, *recompute_logprobs(policy, rec, th))) / (2 * h)
        if np.max(np.abs(num)) > 0:
            worst = max(worst, float(np.max(np.abs(g - num)) / np.max(np.abs(num))))
    ok = zero == 0.0 and balanced <= 1e-9 and worst <= 1e-4
    record(2, "SubTB correctness", ok, f"lambda=0 loss={zero}, balanced loss={balanced:.2e}, max grad rel err={worst:.2e}")


def test_criterion_03_mc_estimator():
    env = ChoiceEnv(4)
    s = env.initial_state(env.problems()[0])
    p = env.success_probability(s)
    params = DatagenParams(k=96, temperature=1.0)
    r = np.random.default_rng(0)
    est = np.mean([mc_estimate(s, EnvGenerator(env), params, r)[0] for _ in range(200)])
    bound = 3 * math.sqrt(p * (1 - p) / 96)
    record(3, "MC estimator", p == 0.25 and abs(est - p) <= bound, f"mean={est:.4f}, |err|={abs(est - p):.4f} <= {bound:.4f}")


def test_criterion_04_binary_search_localization():
    r = np.random.default_rng(0)
    agree, max_excess = 0, -math.inf
    for _ in range(1000):
        n = int(r.integers(1, 65))
        z = int(r.integers(0, n + 1))
        labels = list(r.uniform(0.01, 1, size=z)) + [0.0] * (n - z)
        calls = []
        got = find_first_error(labels, lambda i: calls.append(i) or labels[i])
        agree += got == next((i for i, v in enumerate(labels) if v == 0), None)
        max_excess = max(max_excess, len(calls) - (math.ceil(math.log2(n)) + 1))
    record(4, "binary-search localization", agree == 1000 and max_excess <= 0, f"{agree}/1000 agree, worst eval excess over bound {max_excess}")


def test_criterion_05_similarity_and_group_values():
    diff_pairs = [("24 - 6 = 18", "24 - 6 = 16"), ("so 3 * 4 = 12", "so 3 * 4 = 13"), ("x = 5", "x = 7")]
    same = ["24 - 6 = 18", "we add the numbers", "answer: \\boxed{3}"]
    zero_ok = all(step_similarity(a, b) == 0.0 for a, b in diff_pairs)
    one_ok = all(step_similarity(t, t) == 1.0 for t in same)

    def rec(correct):
        return StepRecord("s", (), correct, 0, 0)

    rules = (
        assign_group_value(SimilarityGroup([rec(True), rec(True)], 0.4)) == 1.0
        and assign_group_value(SimilarityGroup([rec(False), rec(False)], 0.4)) == 0.0
        and assign_group_value(SimilarityGroup([rec(True), rec(False)], 0.4)) == 0.4
    )
    env = ArithChainEnv(n_problems=6, seed=3)
    _, data = run_datagen(env.problems(), EnvGenerator(env), DatagenParams(k=16, rollout_budget=400), seed=0)
    out = augment_dataset(data, AugmentParams())
    zeros = {(r.problem_id, tuple(filter(None, r.prefix.split("\n"))) + (r.step,)) for r in out if r.value == 0}
    violations = 0
    for r in out:
        path = tuple(filter(None, r.prefix.split("\n"))) + (r.step,)
        violations += any((r.problem_id, path[:c]) in zeros for c in range(1, len(path)))
    ok = zero_ok and one_ok and rules and violations == 0 and len(zeros) > 0
    record(5, "similarity and group values", ok, f"diff-calc=0 {zero_ok}, identical=1 {one_ok}, rules {rules}, {violations} records after a zero among {len(out)}")


def test_criterion_06_prm_training():
    r = np.random.default_rng(0)
    from stepflow.core import LabeledStep

    noise = ["we", "then", "so", "next", "compute", "the", "value", "step"]
    data = []
    for i in range(400):
        y = int(r.random() < 0.5)
        words = list(r.choice(noise, size=4)) + ["verified" if y else "mistaken"]
        r.shuffle(words)
        data.append(LabeledStep(f"p{i}", "", " ".join(words), float(y), "mcts", "q"))
    sc = train_prm(data, PRMTrainConfig(learning_rate=0.5, batch_size=16, epochs=5, weight_decay=0.0), FeaturizedScorer(dim=1024))
    preds = [sc.score(d.question, d.prefix, d.step) for d in data]
    labels = [int(d.value) for d in data]
    loss, auc = bce_loss(preds, labels), roc_auc(preds, labels)

    sc2 = FeaturizedScorer(dim=32)
    sc2.theta = r.normal(0, 0.3, sc2.size)
    batch = [np.unique(r.integers(0, sc2.size, 5)) for _ in range(12)]
    y = r.uniform(size=12)
    g, _ = bce_gradient(batch, y, sc2)

    def obj(theta):
        sc2.theta = theta
        p = sigmoid([sc2.logit(f) for f in batch])
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

    base = sc2.theta.copy()
    num = np.array([(obj(base + 1e-5 * e) - obj(base - 1e-5 * e)) / 2e-5 for e in np.eye(sc2.size)])
    sc2.theta = base
    rel = float(np.max(np.abs(g - num)) / np.max(np.abs(num)))
    record(6, "PRM training", loss < 0.2 and auc > 0.95 and rel <= 1e-4, f"BCE={loss:.4f}, AUC={auc:.4f} after 5 epochs, grad rel err={rel:.2e}")


def test_criterion_07_guided_search():
    env = ArithChainEnv(n_problems=500, seed=7)
    prm = OraclePRM(env)
    acc = {}
    for k in (1, 8):
        rng = np.random.default_rng(7)
        acc[k] = accuracy_eval(env.problems(), lambda p: guided_search(p, EnvGenerator(env), prm, k=k, rng=rng))
    gain = acc[8] - acc[1]
    record(7, "guided search", gain >= 0.10, f"accuracy k=1 {acc[1]:.3f}, k=8 {acc[8]:.3f}, gain {100 * gain:.1f} points over 500 problems")


def test_criterion_08_diversity_contrast(grid_gfn, grid_baseline):
    env, gfn, _, _ = grid_gfn
    p = env.problems()[0]
    target = env.target_distribution()
    h_target = entropy(target)
    h_gfn = entropy(terminal_distribution(gfn, env, p))
    h_base = entropy(terminal_distribution(grid_baseline, env, p))
    sims = {}
    for name, pol in (("gfn", gfn), ("baseline", grid_baseline)):
        sample = policy_sampler(pol, temperature=1.0)
        rng = np.random.default_rng(1)
        sims[name] = pairwise_similarity([sample(p, rng) for _ in range(64)])
    ok = sims["baseline"] - sims["gfn"] >= 0.02 and h_base < 0.2 * h_target and abs(h_gfn - h_target) <= 0.1 * h_target
    record(
        8,
        "diversity contrast",
        ok,
        f"similarity gfn {sims['gfn']:.3f} vs baseline {sims['baseline']:.3f}; entropy/H(R/Z) gfn {h_gfn / h_target:.3f}, baseline {h_base / h_target:.3f}",
    )


def test_criterion_09_training_dynamics():
    env = ArithChainEnv(n_problems=10, seed=0)
    policy = PolicyModel(env, hash_dim=0)
    cfg = GFNConfig(learning_rate=0.01, k=8, batch_size=16, iterations=20)
    _, m = train_gfn(env.problems(), policy, PRMReward(OraclePRM(env)), cfg, np.random.default_rng(0))
    w = max(1, len(m) // 20)
    gap = smooth([r["proportionality_gap"] for r in m], w)
    loss = smooth([r["subtb_loss"] for r in m], w)
    ok = gap[-1] < 0.5 * gap[w - 1] and loss[-1] < loss[w - 1]
    # updates whose k fresh trajectories were all empty have no steps to measure a gap on
    empty = sum(math.isnan(r["proportionality_gap"]) for r in m)
    detail = f"smoothed gap {gap[w - 1]:.4f} -> {gap[-1]:.4f}, smoothed SubTB loss {loss[w - 1]:.3f} -> {loss[-1]:.3f} over {len(m)} updates"
    record(9, "training dynamics", ok, f"{detail} ({empty} updates sampled only empty solutions)")


def test_criterion_10_replay_buffer():
    r = np.random.default_rng(0)
    prob = Problem("p", "q", "0")

    def rec(v):
        return TrajectoryRecord(prob, ("a",), np.array([-0.1]), np.array([-0.1, -0.1]), np.array([0.0, math.log(v)]))

    buf = ReplayBuffer(1000)
    peak = 0
    for _ in range(10_000):
        buf.insert(rec(float(r.uniform(1e-3, 1.0))))
        peak = max(peak, len(buf))
    exact = all(p == math.exp(float(e.log_rewards[-1])) for p, e in zip(buf.priorities, buf.entries))
    small = ReplayBuffer(8)
    for v in r.uniform(0.05, 1.0, size=8):
        small.insert(rec(float(v)))
    n = 10_000
    idx = {id(e): i for i, e in enumerate(small.entries)}
    counts = np.bincount([idx[id(e)] for e in small.sample(n, r)], minlength=8)
    pri = np.array(small.priorities)
    pval = chisquare(counts, n * pri / pri.sum()).pvalue
    record(10, "replay buffer", peak <= 1000 and exact and pval > 0.01, f"peak size {peak}, priorities exact {exact}, chi-square p={pval:.3f}")


def test_criterion_11_reward_structure():
    env = ArithChainEnv(n_problems=20, seed=4)
    r = np.random.default_rng(0)
    scorer = FeaturizedScorer(dim=256, env=env)
    violations = total = 0
    for i in range(10_000):
        if i % 500 == 0:
            scorer.theta = r.normal(0, 2.0, scorer.size)
            scorer.bias = float(r.normal(0, 2.0))
            policy = PolicyModel(env, hash_dim=64)
            policy.theta = r.normal(0, 1.0, policy.size)
            policy.theta[-1] = r.uniform(-4, 0)
            reward = PRMReward(scorer)
        rec = sample_trajectory(policy, env, env.problems()[i % 20], 1.0, r, reward)
        rw = rec.rewards
        violations += bool(np.any(rw <= 0) or np.any(np.diff(rw) > 0))
        total += 1
    record(11, "reward structure", violations == 0, f"{violations} violations in {total} trajectories")


def test_criterion_12_end_to_end_smoke(tmp_path):
    cfg = bundled_config_path()
    stages = ["datagen", "augment", "train-prm", "train-gfn", "train-baseline", "guided-search", "eval", "report"]
    t0 = time.perf_counter()
    codes = {}
    for run in ("a", "b"):
        out = str(tmp_path / run)
        codes[run] = [main([s, "--config", cfg, "--out-dir", out]) for s in stages]
    seconds = (time.perf_counter() - t0) / 2
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

    def mismatches(d):
        bad = d.left_only + d.right_only + [f for f in d.common_files if not filecmp.cmp(os.path.join(d.left, f), os.path.join(d.right, f), shallow=False)]
        return bad + [x for sub in d.subdirs.values() for x in mismatches(sub)]

    diff = mismatches(cmp)
    checked = validate_run_dir(str(tmp_path / "a"))
    ok = codes["a"] == codes["b"] == [0] * len(stages) and not diff and len(checked) >= 12 and seconds <= 300
    record(12, "end-to-end smoke", ok, f"exit codes {codes['a']}, {len(checked)} artifacts schema-valid, {len(diff)} differing files, {seconds:.0f}s per run")

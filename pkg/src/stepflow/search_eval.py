"""PRM-guided step search and evaluation metrics."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .core import ContractViolation, PartialSolution, Problem, answers_equal, extract_final_answer
from .features import stable_hash, ngrams, tokenize

log = logging.getLogger(__name__)

BOXED = "\\boxed{"
EMPTY_TOKEN = "<empty>"


class Embedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class HashedEmbedder:
    """L2-normalised bag of hashed token n-grams, counted per line."""

    def __init__(self, dim: int = 512, seed: int = 0, ngram: int = 2):
        self.dim = dim
        self.seed = seed
        self.ngram = ngram

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        grams = [g for line in text.splitlines() for g in ngrams(tokenize(line), self.ngram)]
        if not grams:
            grams = [text.strip() or EMPTY_TOKEN]
        for g in grams:
            v[stable_hash(g, self.seed) % self.dim] += 1.0
        return v / np.linalg.norm(v)


def pairwise_similarity(solutions: Sequence[str], embedder: Optional[Embedder] = None) -> float:
    """Mean cosine similarity over all unordered pairs."""
    if len(solutions) < 2:
        raise ContractViolation("pairwise similarity needs at least two solutions")
    embedder = embedder or HashedEmbedder()
    e = np.array([embedder.embed(s) for s in solutions], dtype=float)
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0):
        raise ContractViolation("embedder returned a zero vector")
    e = e / norms[:, None]
    sims = e @ e.T
    iu = np.triu_indices(len(solutions), 1)
    return float(np.clip(sims[iu], -1.0, 1.0).mean())


# --- guided search ---------------------------------------------------------------


@dataclass
class SearchResult:
    solution: PartialSolution
    scores: list = field(default_factory=list)
    error: Optional[str] = None

    @property
    def text(self) -> str:
        return self.solution.text()


def _finished(state: PartialSolution, generator) -> bool:
    env = getattr(generator, "env", None)
    if env is not None and env.is_terminal(state):
        return True
    return bool(state.steps) and BOXED in state.steps[-1].text


def guided_search(
    problem: Problem,
    generator,
    prm,
    k: int = 8,
    temperature: float = 0.8,
    max_steps: int = 32,
    rng=None,
) -> SearchResult:
    """Grow a solution by appending, at each step, the best-scored of ``k`` proposals.

    Ties go to the lowest candidate index.  Stops after an answer-bearing
    step, a terminal state or ``max_steps`` steps.
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    state = PartialSolution(problem)
    scores = []
    for _ in range(max_steps):
        if _finished(state, generator):
            break
        try:
            proposals = generator.propose_steps(state, k, temperature, rng)
        except Exception as exc:  # generator failures leave a flagged partial solution
            log.warning("generator failed on %s: %s", problem.id, exc)
            return SearchResult(state, scores, error=str(exc))
        if not proposals:
            return SearchResult(state, scores, error="generator returned no candidates")
        prefix = state.text()
        if len(proposals) == 1:
            best, best_score = 0, prm.score(problem.statement, prefix, proposals[0].step.text)
        else:
            vals = [prm.score(problem.statement, prefix, p.step.text) for p in proposals]
            best = int(np.argmax(vals))
            best_score = vals[best]
        scores.append(float(best_score))
        state = state.extend([proposals[best].step.text])
    return SearchResult(state, scores)


def answer_judge(problem: Problem, solution: str) -> bool:
    ans = extract_final_answer(solution)
    return ans is not None and answers_equal(ans, problem.gold_answer)


def _solution_text(out) -> str:
    if isinstance(out, str):
        return out
    if isinstance(out, PartialSolution):
        return out.text()
    return out.text


def accuracy_eval(
    problems: Sequence[Problem],
    solver: Callable[[Problem], object],
    judge: Callable[[Problem, str], bool] = answer_judge,
) -> float:
    """Fraction of problems whose solver output the judge accepts (default: boxed answer equals gold)."""
    if not problems:
        raise ContractViolation("no problems to evaluate")
    hits = 0
    for p in problems:
        out = solver(p)
        hits += bool(judge(p, _solution_text(out)))
    return hits / len(problems)


# --- training diagnostics ----------------------------------------------------------


def proportionality_gap(records: Sequence) -> float:
    """Mean of ``|p_t - r_t|`` over every step of every record."""
    diffs = []
    for r in records:
        if r.step_scores is None:
            raise ContractViolation("record has no step scores")
        if len(r.step_scores) != len(r.log_pf):
            raise ContractViolation("step scores and log-probabilities differ in length")
        diffs.append(np.abs(np.exp(np.asarray(r.log_pf)) - np.asarray(r.step_scores)))
    if not diffs or sum(d.size for d in diffs) == 0:
        raise ContractViolation("no steps to compare")
    return float(np.concatenate(diffs).mean())


@dataclass
class DiversityReport:
    per_problem: dict
    corpus_mean: float
    n_solutions: int

    def to_dict(self) -> dict:
        return asdict(self)


def diversity_report(
    policies: Mapping[str, Callable[[Problem, object], str]],
    problems: Sequence[Problem],
    samples_per_problem: int,
    embedder: Optional[Embedder] = None,
    seed: int = 0,
) -> dict[str, DiversityReport]:
    """Sample ``samples_per_problem`` solutions per problem from each policy and score their similarity.

    Each policy is a callable ``(problem, rng) -> solution text``.  Every
    policy gets the same seeded RNG stream so reports are reproducible.
    """
    if samples_per_problem < 2:
        raise ContractViolation("samples_per_problem must be >= 2")
    embedder = embedder or HashedEmbedder()
    out = {}
    for name, sampler in policies.items():
        rng = np.random.default_rng(seed)
        per, n = {}, 0
        for p in problems:
            sols = [sampler(p, rng) for _ in range(samples_per_problem)]
            per[p.id] = pairwise_similarity(sols, embedder)
            n += len(sols)
        out[name] = DiversityReport(per, float(np.mean(list(per.values()))), n)
    return out


def policy_sampler(policy, temperature: Optional[float] = None, max_depth: int = 64):
    """Adapt a GFlowNet policy to the ``(problem, rng) -> text`` sampler interface."""
    from .gfn import sample_trajectory

    def sample(problem: Problem, rng) -> str:
        return sample_trajectory(policy, policy.env, problem, temperature, rng, max_depth=max_depth).solution_text()

    return sample


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")

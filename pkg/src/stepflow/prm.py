"""Process reward models: a trainable featurized scorer and an exact oracle."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .core import ContractViolation, LabeledStep, PartialSolution, Problem
from .features import N_CALC_FEATURES, HashedFeatures, calc_features

log = logging.getLogger(__name__)

EPS = 1e-6
WEIGHTS_VERSION = 1


class PRMModel(Protocol):
    def score(self, question: str, prefix: str, step: str) -> float: ...


def clamp(p, eps: float = EPS):
    return np.clip(p, eps, 1.0 - eps)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def bce_loss(predictions: Sequence[float], labels: Sequence[float], eps: float = EPS) -> float:
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise ContractViolation(f"{p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ContractViolation("empty batch")
    p = clamp(p, eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass
class PRMTrainConfig:
    learning_rate: float = 8e-6
    batch_size: int = 144
    epochs: int = 1
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self, prefix: str = "prm") -> None:
        for key in ("learning_rate", "batch_size"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")
        for key in ("epochs", "weight_decay"):
            if getattr(self, key) < 0:
                raise ValueError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")


class FeaturizedScorer:
    """``score = sigmoid(theta . phi + bias)`` over sparse binary features.

    ``phi`` concatenates hashed n-grams of the step, hashed n-grams of the
    last prefix line (own namespace), calculation-consistency flags and any
    environment features supplied by ``env``.
    """

    def __init__(self, dim: int = 1 << 16, hash_seed: int = 0, ngram: int = 2, env=None, mask_numbers: bool = False):
        self.hasher = HashedFeatures(dim, ngram, hash_seed, mask_numbers)
        self.env = env
        self.n_env = int(getattr(env, "n_features", 0)) if env is not None else 0
        self.size = dim + N_CALC_FEATURES + self.n_env
        self.theta = np.zeros(self.size)
        self.bias = 0.0
        self.loss_history: list[float] = []

    @property
    def hash_seed(self) -> int:
        return self.hasher.seed

    def featurize(self, question: str, prefix: str, step: str) -> np.ndarray:
        dim = self.hasher.dim
        idx = self.hasher.indices(step)
        last = prefix.rsplit("\n", 1)[-1] if prefix else ""
        if last:
            idx += self.hasher.indices(last, "prev:")
        idx += [dim + i for i in calc_features(step)]
        if self.env is not None:
            idx += [dim + N_CALC_FEATURES + i for i in self.env.text_features(question, prefix, step)]
        return np.asarray(idx, dtype=np.int64)

    def logit(self, feats: np.ndarray) -> float:
        return float(self.theta[feats].sum() + self.bias)

    def score(self, question: str, prefix: str, step: str) -> float:
        return float(clamp(sigmoid(self.logit(self.featurize(question, prefix, step)))))

    def predict(self, batch: Sequence[np.ndarray]) -> np.ndarray:
        return clamp(sigmoid([self.logit(f) for f in batch]))

    # persistence -----------------------------------------------------------
    def save(self, path: str) -> None:
        meta = {
            "version": WEIGHTS_VERSION,
            "dim": self.hasher.dim,
            "hash_seed": self.hasher.seed,
            "ngram": self.hasher.n,
            "mask_numbers": self.hasher.mask_numbers,
            "n_env": self.n_env,
            "bias": self.bias,
            "loss_history": self.loss_history,
        }
        with open(path, "wb") as fh:
            np.savez(fh, theta=self.theta, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path: str, env=None, expect_hash_seed: Optional[int] = None) -> "FeaturizedScorer":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            theta = data["theta"].copy()
        if meta.get("version") != WEIGHTS_VERSION:
            raise ValueError(f"unsupported scorer weights version {meta.get('version')}")
        if expect_hash_seed is not None and meta["hash_seed"] != expect_hash_seed:
            raise ValueError(f"scorer was trained with hash seed {meta['hash_seed']}, config says {expect_hash_seed}")
        obj = cls(meta["dim"], meta["hash_seed"], meta["ngram"], env, meta["mask_numbers"])
        if obj.n_env != meta["n_env"]:
            raise ValueError(f"scorer expects {meta['n_env']} environment features, got {obj.n_env}")
        obj.theta = theta
        obj.bias = float(meta["bias"])
        obj.loss_history = list(meta["loss_history"])
        return obj


def bce_gradient(batch: Sequence[np.ndarray], labels: Sequence[float], scorer: FeaturizedScorer, weight_decay: float = 0.0):
    """Gradient of mean BCE plus ``weight_decay/2 * |theta|^2`` w.r.t. (theta, bias).

    Uses the unclamped sigmoid, so it is exact wherever predictions stay
    inside ``[eps, 1 - eps]``.
    """
    y = np.asarray(labels, dtype=float)
    p = sigmoid([scorer.logit(f) for f in batch])
    r = (p - y) / len(batch)
    g = weight_decay * scorer.theta
    for f, ri in zip(batch, r):
        np.add.at(g, f, ri)
    return g, float(r.sum())


def _labels_warning(labels: np.ndarray) -> None:
    if np.all(labels == labels[0]):
        log.warning("all %d training labels equal %.3f; the scorer will learn a constant", labels.size, labels[0])


def train_prm(
    dataset: Sequence[LabeledStep],
    config: Optional[PRMTrainConfig] = None,
    scorer: Optional[FeaturizedScorer] = None,
    env=None,
) -> FeaturizedScorer:
    """Mini-batch gradient descent on BCE; ``loss_history`` holds per-epoch mean loss."""
    config = config or PRMTrainConfig()
    config.validate()
    if not dataset:
        raise ContractViolation("cannot train on an empty dataset")
    scorer = scorer or FeaturizedScorer(env=env)
    feats = [scorer.featurize(r.question, r.prefix, r.step) for r in dataset]
    labels = np.array([r.value for r in dataset])
    _labels_warning(labels)
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [feats[i] for i in idx]
            losses.append(bce_loss(scorer.predict(batch), labels[idx]) * len(idx))
            g, gb = bce_gradient(batch, labels[idx], scorer, config.weight_decay)
            scorer.theta -= config.learning_rate * g
            scorer.bias -= config.learning_rate * gb
        scorer.loss_history.append(float(sum(losses) / len(order)))
        log.info("prm epoch %d: bce %.4f", epoch, scorer.loss_history[-1])
    return scorer


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    from scipy.stats import rankdata

    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


class OraclePRM:
    """Scores a step by the environment's exact success probability after it."""

    def __init__(self, env, eps: float = EPS):
        if not getattr(env, "supports_success_probability", False):
            from .envs import CapabilityError

            raise CapabilityError(f"{env.name} cannot compute success probabilities")
        self.env = env
        self.eps = eps
        self._problems: dict[str, Problem] = {p.statement: p for p in env.problems()}

    def score_state(self, state: PartialSolution) -> float:
        return float(clamp(self.env.success_probability(state), self.eps))

    def score(self, question: str, prefix: str, step: str) -> float:
        problem = self._problems.get(question) or Problem("oracle", question, self._gold(question))
        lines = [ln for ln in prefix.splitlines() if ln.strip()]
        return self.score_state(PartialSolution(problem).extend(lines + [step]))

    def _gold(self, question: str) -> str:
        _, target = self.env.parse_problem(Problem("q", question, "0"))
        return str(target)


def oracle_prm(env) -> OraclePRM:
    return OraclePRM(env)

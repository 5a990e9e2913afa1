"""Step-level GFlowNet training with the subtrajectory balance loss.

States are partial solutions; an action appends one step or moves to the
sink ``s_f``.  Every state may terminate, so the policy's action set at
``s`` is the environment's legal steps (minus any explicit terminate step,
which the sink replaces) plus the sink.

The loss for one trajectory with per-prefix rewards ``R_i``, transition
log-probabilities ``l_k`` and termination log-probabilities ``f_i`` is

    sum_{i<j} lam^(j-i) * (log R_i + sum_{k=i+1..j} l_k + f_j - log R_j - f_i)^2

Writing ``v_i = log R_i - f_i - C_i`` with ``C_i = sum_{k<=i} l_k`` turns
each bracket into ``v_i - v_j``, which is how it is evaluated here.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ContractViolation, PartialSolution, Problem
from .envs import CapacityError, Environment
from .features import HashedFeatures

log = logging.getLogger(__name__)

SINK = None
SINK_TOKEN = "<sink>"
METRIC_COLUMNS = ("iteration", "subtb_loss", "mean_reward", "proportionality_gap", "buffer_size", "grad_norm")


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


# --- policy ------------------------------------------------------------------------


@dataclass
class _ActionTable:
    actions: list
    flat: np.ndarray  # feature ids of every action, concatenated
    seg: np.ndarray  # owning action of each entry in ``flat``


class PolicyModel:
    """Log-linear policy ``pi(a|s) ∝ exp(theta . psi(s, a))`` with a sink action.

    ``psi`` concatenates hashed n-grams of the step text (``hash_dim`` slots,
    0 disables them), the environment's move features and one sink-bias slot.
    """

    def __init__(
        self,
        env: Environment,
        hash_dim: int = 1 << 12,
        ngram: int = 2,
        hash_seed: int = 0,
        temperature: float = 1.0,
        theta: Optional[np.ndarray] = None,
    ):
        self.env = env
        self.hash_dim = int(hash_dim)
        self.hasher = HashedFeatures(max(self.hash_dim, 1), ngram, hash_seed) if self.hash_dim else None
        self.n_env = int(env.n_features)
        self.size = self.hash_dim + self.n_env + 1
        self.temperature = temperature
        self.theta = np.zeros(self.size) if theta is None else np.asarray(theta, dtype=float).copy()
        if self.theta.shape != (self.size,):
            raise ContractViolation(f"theta has shape {self.theta.shape}, expected ({self.size},)")
        self._tables: dict = {}

    def copy(self) -> "PolicyModel":
        other = PolicyModel.__new__(PolicyModel)
        other.__dict__.update(self.__dict__)
        other.theta = self.theta.copy()
        return other

    def key(self, state: PartialSolution):
        return (state.problem.id, state.problem.statement, self.env.state_key(state))

    def actions(self, state: PartialSolution) -> list:
        stop = self.env.terminate_step(state)
        steps = [s for s in self.env.legal_steps(state) if s != stop] if not self.env.is_terminal(state) else []
        return steps + [SINK]

    def _psi(self, state: PartialSolution, action) -> list[int]:
        idx = []
        if self.hasher is not None:
            idx += self.hasher.indices(action if action is not SINK else SINK_TOKEN)
        off = self.hash_dim
        idx += [off + i for i in self.env.features(state, action)]
        if action is SINK:
            idx.append(self.size - 1)
        return idx

    def table(self, state: PartialSolution) -> _ActionTable:
        k = self.key(state)
        t = self._tables.get(k)
        if t is None:
            acts = self.actions(state)
            feats = [self._psi(state, a) for a in acts]
            flat = np.fromiter((i for f in feats for i in f), dtype=np.int64)
            seg = np.repeat(np.arange(len(acts)), [len(f) for f in feats])
            t = _ActionTable(acts, flat, seg)
            if len(self._tables) > 200_000:
                self._tables.clear()
            self._tables[k] = t
        return t

    def logits(self, state: PartialSolution, theta: Optional[np.ndarray] = None) -> tuple[list, np.ndarray]:
        t = self.table(state)
        th = self.theta if theta is None else theta
        z = np.bincount(t.seg, weights=th[t.flat], minlength=len(t.actions))
        return t.actions, z

    def log_probs(self, state: PartialSolution, theta: Optional[np.ndarray] = None) -> tuple[list, np.ndarray]:
        """Untempered log pi over ``actions(state)``; the sink is last."""
        acts, z = self.logits(state, theta)
        return acts, _log_softmax(z)

    def probs(self, state: PartialSolution, temperature: float = 1.0) -> tuple[list, np.ndarray]:
        acts, z = self.logits(state)
        return acts, np.exp(_log_softmax(z / temperature))

    def scatter(self, state: PartialSolution, logit_grad: np.ndarray, out: np.ndarray) -> None:
        """Add ``d/dtheta`` of a function whose gradient w.r.t. this state's logits is ``logit_grad``."""
        t = self.table(state)
        np.add.at(out, t.flat, logit_grad[t.seg])

    def save(self, path: str) -> None:
        meta = {"hash_dim": self.hash_dim, "size": self.size, "temperature": self.temperature}
        np.savez(path, theta=self.theta, meta=np.array(list(meta.values()), dtype=float))

    def load_theta(self, path: str) -> None:
        with np.load(path) as data:
            theta = data["theta"]
        if theta.shape != self.theta.shape:
            raise ValueError(f"saved policy has {theta.size} parameters, expected {self.size}")
        self.theta = theta.copy()


# --- trajectories and rewards -------------------------------------------------------


@dataclass
class TrajectoryRecord:
    """One sampled trajectory ``s_0 .. s_n -> s_f``.

    ``log_pf[k-1]`` is ``log pi(s_k|s_{k-1})`` and ``log_pstop[i]`` is
    ``log pi(s_f|s_i)``, both recorded untempered at sampling time.
    ``log_rewards[i]`` is ``log R(s_i)`` and ``step_scores[k-1]`` the
    per-step score used for the proportionality gap.
    """

    problem: Problem
    steps: tuple
    log_pf: np.ndarray
    log_pstop: np.ndarray
    log_rewards: Optional[np.ndarray] = None
    step_scores: Optional[np.ndarray] = None
    capped: bool = False

    def __post_init__(self):
        n = len(self.steps)
        if len(self.log_pf) != n or len(self.log_pstop) != n + 1:
            raise ContractViolation("log-probability arrays do not match the number of steps")

    @property
    def n(self) -> int:
        return len(self.steps)

    def states(self) -> list[PartialSolution]:
        s = PartialSolution(self.problem)
        out = [s]
        for t in self.steps:
            s = s.extend([t])
            out.append(s)
        return out

    @property
    def rewards(self) -> np.ndarray:
        return np.exp(self.log_rewards)

    @property
    def terminal_reward(self) -> float:
        return float(math.exp(self.log_rewards[-1]))

    def solution_text(self) -> str:
        return "\n".join(self.steps)


def trajectory_reward(
    step_scores: Sequence[float],
    reference_logprobs: Optional[Sequence[float]] = None,
    gamma: float = 0.0,
) -> list[float]:
    """``R(s_i) = prod_{j<=i} U_j * P_ref(s_1..i)^gamma`` for i = 0..n."""
    return [math.exp(v) for v in trajectory_log_reward(step_scores, reference_logprobs, gamma)]


def trajectory_log_reward(step_scores, reference_logprobs=None, gamma: float = 0.0) -> np.ndarray:
    u = np.asarray(step_scores, dtype=float)
    if np.any(u <= 0) or np.any(u > 1):
        raise ContractViolation("step scores must lie in (0, 1]")
    out = np.concatenate([[0.0], np.cumsum(np.log(u))])
    if gamma:
        if reference_logprobs is None:
            raise ContractViolation("gamma > 0 needs reference log-probabilities")
        ref = np.asarray(reference_logprobs, dtype=float)
        if ref.shape != u.shape:
            raise ContractViolation("one reference log-probability per step is required")
        out[1:] += gamma * np.cumsum(ref)
    return out


class PRMReward:
    """Per-prefix rewards from a PRM's step scores, optionally tilted by a reference policy."""

    def __init__(self, prm, gamma: float = 0.0, reference: Optional[PolicyModel] = None):
        if gamma and reference is None:
            raise ContractViolation("gamma > 0 needs a reference policy")
        self.prm = prm
        self.gamma = gamma
        self.reference = reference

    def step_scores(self, problem: Problem, steps: Sequence[str]) -> np.ndarray:
        out = []
        for k, step in enumerate(steps):
            out.append(self.prm.score(problem.statement, "\n".join(steps[:k]), step))
        return np.asarray(out, dtype=float)

    def __call__(self, problem: Problem, steps: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        u = self.step_scores(problem, steps)
        ref = None
        if self.gamma:
            ref = []
            s = PartialSolution(problem)
            for t in steps:
                acts, lp = self.reference.log_probs(s)
                ref.append(lp[acts.index(t)])
                s = s.extend([t])
        return trajectory_log_reward(u, ref, self.gamma), u

    def trajectory_return(self, record: TrajectoryRecord) -> float:
        return record.terminal_reward


class GridReward:
    """Oracle rewards for FlowGrid.

    The grid is not a tree: a cell is reached by many step orders.  Giving
    prefix ``s`` at cell ``c`` the reward ``R(c) / paths(c)`` makes balance
    over every sub-path attainable and the balanced terminal distribution
    exactly ``R / Z``.  Step scores are the ratios ``R(s_k) / R(s_{k-1})``.
    """

    def __init__(self, env):
        self.env = env

    def __call__(self, problem: Problem, steps: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        s = PartialSolution(problem)
        vals = []
        for t in (None,) + tuple(steps):
            if t is not None:
                s = s.extend([t])
            c = self.env.cell(s)
            vals.append(math.log(self.env.reward(c)) - math.log(self.env.path_count(c)))
        lr = np.asarray(vals)
        return lr, np.exp(np.diff(lr))

    def trajectory_return(self, record: TrajectoryRecord) -> float:
        return self.env.reward(self.env.cell(record.states()[-1]))


def sample_trajectory(
    policy: PolicyModel,
    env: Environment,
    problem: Problem,
    temperature: Optional[float] = None,
    rng=None,
    reward_fn: Optional[Callable] = None,
    max_depth: int = 64,
) -> TrajectoryRecord:
    """Roll the tempered policy from ``s_0`` until the sink or the depth cap."""
    temperature = policy.temperature if temperature is None else temperature
    if temperature <= 0:
        raise ContractViolation("temperature must be > 0")
    rng = rng if rng is not None else np.random.default_rng()
    s = env.initial_state(problem)
    steps, log_pf, log_pstop = [], [], []
    capped = False
    while True:
        acts, z = policy.logits(s)
        lp = _log_softmax(z)
        log_pstop.append(float(lp[-1]))
        if len(steps) >= max_depth:
            capped = len(acts) > 1
            break
        q = np.exp(_log_softmax(z / temperature))
        a = int(rng.choice(len(acts), p=q))
        if acts[a] is SINK:
            break
        steps.append(acts[a])
        log_pf.append(float(lp[a]))
        s = env.step(s, acts[a])
    rec = TrajectoryRecord(problem, tuple(steps), np.asarray(log_pf), np.asarray(log_pstop), capped=capped)
    if reward_fn is not None:
        rec.log_rewards, rec.step_scores = reward_fn(problem, rec.steps)
    return rec


def recompute_logprobs(policy: PolicyModel, record: TrajectoryRecord, theta=None) -> tuple[np.ndarray, np.ndarray]:
    """Untempered (log_pf, log_pstop) of ``record`` under the current parameters."""
    log_pf, log_pstop = [], []
    states = record.states()
    for i, s in enumerate(states):
        acts, lp = policy.log_probs(s, theta)
        log_pstop.append(lp[-1])
        if i < record.n:
            log_pf.append(lp[acts.index(record.steps[i])])
    return np.asarray(log_pf), np.asarray(log_pstop)


# --- loss ----------------------------------------------------------------------------


def _balance_residuals(log_rewards, log_pf, log_pstop) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(log_pf)])
    return np.asarray(log_rewards) - np.asarray(log_pstop) - c


def _check_record(record: TrajectoryRecord) -> None:
    if record.log_rewards is None:
        raise ContractViolation("record has no rewards")
    if not np.all(np.isfinite(record.log_rewards)):
        raise ContractViolation("rewards must be positive")
    if np.any(record.log_pf > 0) or np.any(record.log_pstop > 0):
        raise ContractViolation("log-probabilities must be <= 0")


def _lambda_matrix(n1: int, lam: float) -> np.ndarray:
    d = np.abs(np.subtract.outer(np.arange(n1), np.arange(n1))).astype(float)
    w = np.where(d > 0, np.power(lam, d, where=d > 0, out=np.zeros_like(d)), 0.0)
    return w


def subtb_loss(record: TrajectoryRecord, lam: float = 1.0, log_pf=None, log_pstop=None) -> float:
    """Subtrajectory balance loss of one trajectory (recorded log-probs unless given)."""
    _check_record(record)
    lpf = record.log_pf if log_pf is None else log_pf
    lps = record.log_pstop if log_pstop is None else log_pstop
    v = _balance_residuals(record.log_rewards, lpf, lps)
    if lam == 0:
        return 0.0
    w = np.triu(_lambda_matrix(len(v), lam), 1)
    diff = np.subtract.outer(v, v)
    return float(np.sum(w * diff**2))


def _residual_gradient(v: np.ndarray, lam: float) -> np.ndarray:
    """d loss / d v_m = 2 sum_{j != m} lam^|m-j| (v_m - v_j)."""
    w = _lambda_matrix(len(v), lam)
    return 2.0 * (w.sum(axis=1) * v - w @ v)


def subtb_gradient(record: TrajectoryRecord, policy: PolicyModel, lam: float = 1.0, out=None) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. ``policy.theta`` at the current parameters.

    Rewards are constants; log-probabilities are recomputed from ``theta``.
    """
    _check_record(record)
    g = np.zeros(policy.size) if out is None else out
    states = record.states()
    tables = [policy.log_probs(s) for s in states]
    lpf = np.array([lp[acts.index(record.steps[i])] for i, (acts, lp) in enumerate(tables[:-1])])
    lps = np.array([lp[-1] for _, lp in tables])
    v = _balance_residuals(record.log_rewards, lpf, lps)
    if lam == 0:
        return 0.0, g
    loss = float(np.sum(np.triu(_lambda_matrix(len(v), lam), 1) * np.subtract.outer(v, v) ** 2))
    gv = _residual_gradient(v, lam)
    # v_i depends on -log_pstop[i] and on -log_pf[k] for every k <= i.
    coef_stop = -gv
    coef_step = -np.cumsum(gv[::-1])[::-1][1:]
    for i, (acts, lp) in enumerate(tables):
        e = np.zeros(len(acts))
        e[-1] += coef_stop[i]
        if i < record.n:
            e[acts.index(record.steps[i])] += coef_step[i]
        pi = np.exp(lp)
        policy.scatter(states[i], e - e.sum() * pi, g)
    return loss, g


def batch_subtb(records: Sequence[TrajectoryRecord], policy: PolicyModel, lam: float) -> tuple[float, np.ndarray]:
    """Mean loss and gradient over a batch."""
    g = np.zeros(policy.size)
    total = 0.0
    for r in records:
        loss, _ = subtb_gradient(r, policy, lam, out=g)
        total += loss
    n = max(len(records), 1)
    return total / n, g / n


# --- replay ---------------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity buffer; evicts the lowest priority, samples proportionally with replacement."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ContractViolation("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[TrajectoryRecord] = []
        self.priorities: list[float] = []
        self._log_priorities: list[float] = []

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, record: TrajectoryRecord, priority: Optional[float] = None) -> bool:
        """Insert ``record``; returns False if it was the lowest priority of a full buffer."""
        if record.log_rewards is None and priority is None:
            raise ContractViolation("record has no reward to use as priority")
        logp = float(record.log_rewards[-1]) if priority is None else math.log(priority)
        pri = math.exp(logp) if priority is None else float(priority)
        if not math.isfinite(logp):
            raise ContractViolation("priority must be > 0")
        if len(self.entries) < self.capacity:
            self.entries.append(record)
            self.priorities.append(pri)
            self._log_priorities.append(logp)
            return True
        worst = int(np.argmin(self._log_priorities))
        if logp < self._log_priorities[worst]:
            return False
        self.entries[worst] = record
        self.priorities[worst] = pri
        self._log_priorities[worst] = logp
        return True

    def probabilities(self) -> np.ndarray:
        lp = np.asarray(self._log_priorities)
        return np.exp(_log_softmax(lp))

    def sample(self, batch_size: int, rng) -> list[TrajectoryRecord]:
        if not self.entries:
            raise ContractViolation("cannot sample from an empty replay buffer")
        idx = rng.choice(len(self.entries), size=batch_size, replace=True, p=self.probabilities())
        return [self.entries[i] for i in idx]


def replay_insert(buffer: ReplayBuffer, record: TrajectoryRecord) -> bool:
    return buffer.insert(record)


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng) -> list[TrajectoryRecord]:
    return buffer.sample(batch_size, rng)


# --- optimisation ---------------------------------------------------------------------


class Adam:
    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        params -= (self.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if max_norm and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def _lr_at(base: float, schedule: str, it: int, total: int, floor: float = 0.1) -> float:
    if schedule == "cosine" and total > 1:
        return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * it / (total - 1))))
    return base


@dataclass
class GFNConfig:
    lam: float = 1.0
    learning_rate: float = 1e-2
    batch_size: int = 144
    k: int = 8
    temperature: float = 0.6
    max_grad_norm: float = 1.0
    gamma: float = 0.0
    iterations: int = 100
    buffer_capacity: int = 1000
    max_depth: int = 64
    onpolicy_in_batch: bool = True
    lr_schedule: str = "constant"
    seed: int = 0

    def validate(self, prefix: str = "gfn") -> None:
        if not 0 <= self.lam <= 1:
            raise ValueError(f"{prefix}.lam: value {self.lam!r} out of range")
        for key in ("learning_rate", "batch_size", "k", "temperature", "max_grad_norm", "buffer_capacity", "max_depth"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")
        for key in ("gamma", "iterations"):
            if getattr(self, key) < 0:
                raise ValueError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"{prefix}.lr_schedule: value {self.lr_schedule!r} out of range")


def train_gfn(
    problems: Sequence[Problem],
    policy: PolicyModel,
    reward_fn,
    config: Optional[GFNConfig] = None,
    rng=None,
    callback: Optional[Callable[[dict], None]] = None,
) -> tuple[PolicyModel, list[dict]]:
    """Generate, reward, replay, and take one clipped Adam step per (iteration, question).

    ``reward_fn(problem, steps)`` returns ``(log R(s_0..s_n), step scores)``;
    :class:`PRMReward` wraps a PRM.  The loss batch is the ``k`` fresh
    trajectories plus ``batch_size`` replayed ones (only the replay sample
    when ``onpolicy_in_batch`` is off).
    """
    config = config or GFNConfig()
    config.validate()
    if not problems:
        raise ContractViolation("no problems to train on")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    env = policy.env
    buffer = ReplayBuffer(config.buffer_capacity)
    opt = Adam(policy.size, config.learning_rate)
    metrics: list[dict] = []
    total = config.iterations * len(problems)
    step = 0
    for it in range(config.iterations):
        for problem in problems:
            fresh = [
                sample_trajectory(policy, env, problem, config.temperature, rng, reward_fn, config.max_depth)
                for _ in range(config.k)
            ]
            for r in fresh:
                buffer.insert(r)
            batch = buffer.sample(config.batch_size, rng)
            if config.onpolicy_in_batch:
                batch = fresh + batch
            loss, grad = batch_subtb(batch, policy, config.lam)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite SubTB loss at iteration {it}")
            grad, norm = clip_grad_norm(grad, config.max_grad_norm)
            opt.step(policy.theta, grad, _lr_at(config.learning_rate, config.lr_schedule, step, total))
            step += 1
            row = {
                "iteration": step,
                "subtb_loss": loss,
                "mean_reward": float(np.mean([r.terminal_reward for r in fresh])),
                "proportionality_gap": _gap_or_nan(fresh),
                "buffer_size": len(buffer),
                "grad_norm": norm,
                "capped": sum(r.capped for r in fresh),
            }
            metrics.append(row)
            if callback is not None:
                callback(row)
    return policy, metrics


def _gap_or_nan(records) -> float:
    from .search_eval import proportionality_gap

    try:
        return proportionality_gap(records)
    except ContractViolation:
        return float("nan")


def write_metrics(path, metrics: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# --- exact terminal distribution -----------------------------------------------------


def terminal_distribution(
    policy: PolicyModel, env: Environment, problem: Problem, max_states: Optional[int] = None
) -> dict:
    """Exact probability of stopping at each state, keyed by ``env.terminal_label``.

    Forward dynamic programming over the state DAG in topological order,
    using the untempered policy.
    """
    from graphlib import TopologicalSorter

    max_states = max_states or env.max_states
    s0 = env.initial_state(problem)
    rep = {policy.key(s0): s0}
    children: dict = {}
    stack = [s0]
    while stack:
        s = stack.pop()
        k = policy.key(s)
        if k in children:
            continue
        acts, lp = policy.log_probs(s)
        out = []
        for a, l in zip(acts[:-1], lp[:-1]):
            t = env.step(s, a)
            tk = policy.key(t)
            out.append((tk, l))
            if tk not in rep:
                rep[tk] = t
                if len(rep) > max_states:
                    raise CapacityError(f"more than {max_states} states reachable")
                stack.append(t)
        children[k] = (out, lp[-1])
    order = TopologicalSorter({k: [] for k in children})
    for k, (out, _) in children.items():
        for tk, _ in out:
            order.add(tk, k)
    mass = {policy.key(s0): 1.0}
    dist: dict = {}
    for k in order.static_order():
        m = mass.get(k, 0.0)
        if m == 0.0:
            continue
        out, lstop = children[k]
        label = terminal_label(env, rep[k])
        dist[label] = dist.get(label, 0.0) + m * math.exp(lstop)
        for tk, l in out:
            mass[tk] = mass.get(tk, 0.0) + m * math.exp(l)
    return dist


def terminal_label(env: Environment, state: PartialSolution):
    """FlowGrid terminals are cells; elsewhere the environment's state key."""
    if hasattr(env, "cell"):
        return env.cell(state)
    return env.state_key(state)


def l1_distance(p: dict, q: dict) -> float:
    return float(sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in set(p) | set(q)))


def entropy(p: dict) -> float:
    v = np.array([x for x in p.values() if x > 0])
    return float(-np.sum(v * np.log(v)))


# --- reward-maximisation baseline -----------------------------------------------------


@dataclass
class BaselineConfig:
    learning_rate: float = 1e-2
    batch_size: int = 144
    clip_ratio: float = 0.2
    entropy_coef: float = 0.01
    epochs_per_batch: int = 4
    iterations: int = 100
    temperature: float = 1.0
    max_grad_norm: float = 1.0
    max_depth: int = 64
    seed: int = 0

    def validate(self, prefix: str = "baseline") -> None:
        for key in ("learning_rate", "batch_size", "epochs_per_batch", "temperature", "max_grad_norm", "max_depth"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")
        for key in ("clip_ratio", "entropy_coef", "iterations"):
            if getattr(self, key) < 0:
                raise ValueError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")


def _surrogate_gradient(policy, batch, advantages, old_logp, config) -> tuple[float, float, np.ndarray]:
    """Clipped surrogate plus entropy bonus (to be maximised), averaged over transitions."""
    g = np.zeros(policy.size)
    obj = ent_total = 0.0
    n = 0
    for rec, adv, olds in zip(batch, advantages, old_logp):
        states = rec.states()
        actions = list(rec.steps) + ([] if rec.capped else [SINK])
        for i, (s, a) in enumerate(zip(states, actions)):
            acts, lp = policy.log_probs(s)
            pi = np.exp(lp)
            ai = acts.index(a) if a is not SINK else len(acts) - 1
            ratio = math.exp(lp[ai] - olds[i])
            lo, hi = 1 - config.clip_ratio, 1 + config.clip_ratio
            obj += min(ratio * adv, min(max(ratio, lo), hi) * adv)
            gz = np.zeros(len(acts))
            if not ((adv > 0 and ratio > hi) or (adv < 0 and ratio < lo)):
                gz[ai] += ratio * adv
                gz -= ratio * adv * pi
            h = float(-np.sum(pi * lp))
            ent_total += h
            gz += config.entropy_coef * (-pi * (lp + h))
            policy.scatter(s, gz, g)
            n += 1
    n = max(n, 1)
    return (obj + config.entropy_coef * ent_total) / n, ent_total / n, g / n


def train_baseline_maximizer(
    problems: Sequence[Problem],
    policy: PolicyModel,
    reward_fn,
    config: Optional[BaselineConfig] = None,
    rng=None,
    callback: Optional[Callable[[dict], None]] = None,
) -> tuple[PolicyModel, list[dict]]:
    """Clipped policy-gradient ascent on trajectory return, no critic.

    The advantage of a trajectory is its return (``reward_fn.trajectory_return``)
    minus the batch mean, shared by all of its transitions.
    """
    config = config or BaselineConfig()
    config.validate()
    if not problems:
        raise ContractViolation("no problems to train on")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    env = policy.env
    opt = Adam(policy.size, config.learning_rate)
    metrics = []
    step = 0
    for it in range(config.iterations):
        for problem in problems:
            batch = [
                sample_trajectory(policy, env, problem, config.temperature, rng, reward_fn, config.max_depth)
                for _ in range(config.batch_size)
            ]
            returns = np.array([reward_fn.trajectory_return(r) for r in batch])
            adv = returns - returns.mean()
            old = [np.append(r.log_pf, r.log_pstop[-1]) for r in batch]
            for _ in range(config.epochs_per_batch):
                obj, ent, g = _surrogate_gradient(policy, batch, adv, old, config)
                if not math.isfinite(obj):
                    raise DivergenceError(f"non-finite surrogate at iteration {it}")
                g, norm = clip_grad_norm(g, config.max_grad_norm)
                opt.step(policy.theta, -g)
            step += 1
            row = {
                "iteration": step,
                "objective": obj,
                "mean_return": float(returns.mean()),
                "entropy": ent,
                "grad_norm": norm,
            }
            metrics.append(row)
            if callback is not None:
                callback(row)
    return policy, metrics

"""Domain types shared by every pipeline stage, step parsing and answer checks."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Optional

MAX_STEP_CHARS = 2048

PROVENANCES = ("mcts", "rollout-reuse")

# A leading minus is a sign only when it does not follow an operand.
NUMBER_RE = re.compile(r"(?:(?<![\w.)\]}])-)?\d+(?:\.\d+)?(?:/\d+)?")
_BOXED = "\\boxed{"


class ContractViolation(ValueError):
    """An operation was called outside its documented precondition."""


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    gold_answer: str

    def __post_init__(self):
        if not self.statement.strip():
            raise ContractViolation(f"problem {self.id!r} has an empty statement")

    def to_dict(self) -> dict:
        return {"id": self.id, "statement": self.statement, "gold_answer": self.gold_answer}

    @classmethod
    def from_dict(cls, d: dict) -> "Problem":
        return cls(str(d["id"]), d["statement"], str(d["gold_answer"]))


@dataclass(frozen=True)
class Step:
    text: str
    index: int

    def __post_init__(self):
        if "\n" in self.text or "\r" in self.text:
            raise ContractViolation("step text must be a single line")
        if not self.text.strip():
            raise ContractViolation("step text is blank")
        if self.index < 0:
            raise ContractViolation("step index must be >= 0")


@dataclass(frozen=True)
class PartialSolution:
    """The question plus every step generated so far; one GFlowNet state."""

    problem: Problem
    steps: tuple[Step, ...] = ()

    def __post_init__(self):
        for i, s in enumerate(self.steps):
            if s.index != i:
                raise ContractViolation(f"step indices must be contiguous from 0, got {s.index} at {i}")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(s.text for s in self.steps)

    def text(self) -> str:
        return join_steps(self.steps)

    def extend(self, texts: Iterable[str]) -> "PartialSolution":
        state = self
        for t in texts:
            state = concat_prefix(state, Step(t, len(state.steps)))
        return state


@dataclass(frozen=True)
class Rollout:
    steps: tuple[Step, ...]
    final_answer: Optional[str]
    correct: bool

    def __post_init__(self):
        if self.correct and self.final_answer is None:
            raise ContractViolation("a correct rollout must carry a final answer")

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(s.text for s in self.steps)

    def to_dict(self) -> dict:
        return {"steps": list(self.texts), "final_answer": self.final_answer, "correct": self.correct}

    @classmethod
    def from_dict(cls, d: dict) -> "Rollout":
        steps = tuple(Step(t, i) for i, t in enumerate(d["steps"]))
        return cls(steps, d.get("final_answer"), bool(d["correct"]))


@dataclass(frozen=True)
class LabeledStep:
    problem_id: str
    prefix: str
    step: str
    value: float
    provenance: str
    question: str = ""
    rollouts: tuple[Rollout, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ContractViolation(f"value {self.value} outside [0, 1]")
        if self.provenance not in PROVENANCES:
            raise ContractViolation(f"unknown provenance {self.provenance!r}")

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "question": self.question,
            "prefix": self.prefix,
            "step": self.step,
            "value": self.value,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledStep":
        return cls(
            problem_id=str(d["problem_id"]),
            prefix=d["prefix"],
            step=d["step"],
            value=float(d["value"]),
            provenance=d["provenance"],
            question=d.get("question", ""),
        )


def split_into_steps(solution: str, max_chars: int = MAX_STEP_CHARS) -> list[Step]:
    """Split ``solution`` on line breaks, dropping blank lines.

    Lines longer than ``max_chars`` are truncated.
    """
    lines = [ln.strip() for ln in solution.splitlines()]
    return [Step(ln[:max_chars], i) for i, ln in enumerate(ln for ln in lines if ln)]


def join_steps(steps: Iterable) -> str:
    return "\n".join(s.text if isinstance(s, Step) else s for s in steps)


def _boxed_contents(text: str) -> list[str]:
    out = []
    start = text.find(_BOXED)
    while start != -1:
        i = start + len(_BOXED)
        depth = 1
        j = i
        while j < len(text) and depth:
            if text[j] == "{":
                depth += 1
            elif text[j] == "}":
                depth -= 1
            j += 1
        if depth == 0:
            out.append(text[i : j - 1])
        start = text.find(_BOXED, j)
    return out


def extract_final_answer(solution: str) -> Optional[str]:
    """Last ``\\boxed{...}`` content, else the last number of the last step."""
    boxed = _boxed_contents(solution)
    if boxed:
        return boxed[-1].strip()
    steps = split_into_steps(solution)
    if not steps:
        return None
    nums = NUMBER_RE.findall(steps[-1].text)
    return nums[-1] if nums else None


def parse_number(s: str) -> Optional[Fraction]:
    s = s.strip().strip("$").replace(",", "")
    if not s:
        return None
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def answers_equal(a: str, b: str) -> bool:
    """Exact rational comparison for numbers, case-insensitive text otherwise."""
    if a is None or b is None:
        raise ContractViolation("answers_equal needs two present answers")
    fa, fb = parse_number(a), parse_number(b)
    if fa is not None and fb is not None:
        return fa == fb
    return a.strip().casefold() == b.strip().casefold()


def concat_prefix(prefix: PartialSolution, step: Step) -> PartialSolution:
    if step.index != len(prefix.steps):
        raise ContractViolation(f"step index {step.index} does not follow a prefix of length {len(prefix.steps)}")
    return PartialSolution(prefix.problem, prefix.steps + (step,))


# --- JSONL IO -----------------------------------------------------------------


def write_jsonl(path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_labeled_steps(path, records: Iterable[LabeledStep]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))


def read_labeled_steps(path) -> list[LabeledStep]:
    return [LabeledStep.from_dict(d) for d in read_jsonl(path)]


LABELED_STEP_SCHEMA = {
    "type": "object",
    "required": ["problem_id", "question", "prefix", "step", "value", "provenance"],
    "properties": {
        "problem_id": {"type": "string"},
        "question": {"type": "string"},
        "prefix": {"type": "string"},
        "step": {"type": "string", "minLength": 1},
        "value": {"type": "number", "minimum": 0, "maximum": 1},
        "provenance": {"enum": list(PROVENANCES)},
    },
    "additionalProperties": False,
}

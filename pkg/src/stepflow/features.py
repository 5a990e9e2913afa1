"""Stable feature hashing and text featurization shared by scorers, policies and embedders."""
from __future__ import annotations

import hashlib
import re
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Optional

import numpy as np

from .core import parse_number

_TOKEN_RE = re.compile(r"(?:(?<![\w.)\]}])-)?\d+(?:\.\d+)?(?:/\d+)?|[a-z_]+|[+\-*/×÷^=<>]")
_CALC_RE = re.compile(
    r"((?:(?<![\w.)\]}])-)?\d+(?:\.\d+)?)\s*([+\-*/×÷x])\s*(-?\d+(?:\.\d+)?)\s*=\s*(-?\d+(?:\.\d+)?(?:/\d+)?)"
)
_RESULT_RE = re.compile(r"=\s*\$?\s*(-?\d+(?:\.\d+)?(?:/\d+)?)")


@lru_cache(maxsize=1 << 18)
def stable_hash(token: str, seed: int = 0) -> int:
    """64-bit hash that does not depend on PYTHONHASHSEED."""
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, salt=seed.to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


def canonical_number(s: str) -> Optional[str]:
    f = parse_number(s)
    if f is None:
        return None
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


def tokenize(text: str, mask_numbers: bool = False) -> list[str]:
    """Lowercased word, numeral and operator tokens; other punctuation is dropped.

    Numerals are canonicalized so that ``40`` and ``40.0`` map to one token.
    """
    out = []
    for tok in _TOKEN_RE.findall(text.lower()):
        if tok[0].isdigit() or (tok[0] == "-" and len(tok) > 1):
            c = canonical_number(tok)
            tok = "<num>" if mask_numbers else (c if c is not None else tok)
        out.append(tok)
    return out


def ngrams(tokens: list[str], n: int) -> list[str]:
    grams = list(tokens)
    for size in range(2, n + 1):
        grams.extend(" ".join(tokens[i : i + size]) for i in range(len(tokens) - size + 1))
    return grams


def calculation_results(text: str) -> list[Fraction]:
    """Right-hand values of every ``= value`` occurrence, as exact rationals."""
    out = []
    for m in _RESULT_RE.finditer(text):
        f = parse_number(m.group(1))
        if f is not None:
            out.append(f)
    return out


def _apply(a: Fraction, op: str, b: Fraction) -> Optional[Fraction]:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op in "*×x":
        return a * b
    if op in "/÷":
        return a / b if b != 0 else None
    return None


def calculation_checks(text: str) -> list[bool]:
    """Whether each simple ``a OP b = c`` calculation in ``text`` is arithmetically right."""
    out = []
    for m in _CALC_RE.finditer(text):
        a, op, b, c = m.groups()
        got = _apply(Fraction(a), op, Fraction(b))
        out.append(got is not None and got == Fraction(c))
    return out


class HashedFeatures:
    """Sparse binary features from hashed token n-grams.

    Index ``dim`` and above are left for caller-supplied extra features, so
    a weight vector has length ``dim + n_extra``.
    """

    def __init__(self, dim: int = 1 << 16, n: int = 2, seed: int = 0, mask_numbers: bool = False):
        self.dim = int(dim)
        self.n = n
        self.seed = seed
        self.mask_numbers = mask_numbers

    def indices(self, text: str, namespace: str = "") -> list[int]:
        toks = tokenize(text, self.mask_numbers)
        return [stable_hash(namespace + g, self.seed) % self.dim for g in ngrams(toks, self.n)]

    def lines(self, text: str, namespace: str = "") -> list[int]:
        out = []
        for line in text.splitlines():
            out.extend(self.indices(line, namespace))
        return out


# Fixed extra-feature slots for calculation consistency.
CALC_PRESENT, CALC_OK, CALC_BAD, CALC_NONE = range(4)
N_CALC_FEATURES = 4


def calc_features(text: str) -> list[int]:
    checks = calculation_checks(text)
    if not checks:
        return [CALC_NONE]
    return [CALC_PRESENT, CALC_OK if all(checks) else CALC_BAD]


def to_dense(idx: Iterable[int], dim: int) -> np.ndarray:
    v = np.zeros(dim)
    np.add.at(v, np.fromiter(idx, dtype=np.int64), 1.0)
    return v

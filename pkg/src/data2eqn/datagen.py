"""Synthetic (X, y, f) pretraining corpus.

Each triplet draws a random expression tree and a standard-normal predictor
matrix, evaluates the tree and keeps the pair only if every target is finite
and bounded. Triplet ``i`` owns its own counter-based random stream derived
from ``(seed, i)``, so the corpus is identical whether it is produced by one
worker or many.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Iterator, Optional

import numpy as np

from .expr import (BINARY_OPS, DEFAULT_VOCAB, MAX_LEN, MAX_VARIABLES, UNARY_OPS,
                   Binary, Constant, Expression, LengthOverflowError, Unary,
                   Variable, Vocabulary, evaluate, parse, tokenize, variables)

CORPUS_VERSION = 1
OVERFLOW_CAP = 1e12
POW_EXPONENTS = (-3, -2, -1, 2, 3)


def _uniform_weights() -> dict[str, float]:
    return {op: 1.0 for op in UNARY_OPS + BINARY_OPS}


@dataclass
class GenConfig:
    n_triplets: int = 5000
    dim_range: tuple[int, int] = (1, 3)
    points_per_triplet: int = 200
    max_depth: int = 4
    operator_weights: dict[str, float] = field(default_factory=_uniform_weights)
    constant_prob: float = 0.25
    leaf_prob: float = 0.5
    require_variable: bool = True
    overflow_cap: float = OVERFLOW_CAP
    max_attempts: int = 10_000
    seed: int = 0

    def __post_init__(self):
        self.dim_range = tuple(int(v) for v in self.dim_range)
        lo, hi = self.dim_range
        if not 1 <= lo <= hi <= MAX_VARIABLES:
            raise ValueError(f"dim_range must satisfy 1 <= lo <= hi <= {MAX_VARIABLES}")
        if self.n_triplets < 0:
            raise ValueError("n_triplets must be non-negative")
        if not 1 <= self.points_per_triplet <= MAX_LEN:
            raise ValueError("points_per_triplet must be in [1, 200]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        unknown = set(self.operator_weights) - set(UNARY_OPS + BINARY_OPS)
        if unknown:
            raise ValueError(f"unknown operators in operator_weights: {sorted(unknown)}")
        w = np.array(list(self.operator_weights.values()), dtype=float)
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("operator_weights must be non-negative and not all zero")
        if not 0.0 <= self.constant_prob <= 1.0 or not 0.0 <= self.leaf_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dim_range"] = list(self.dim_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(eq=False)
class Triplet:
    X: np.ndarray
    y: np.ndarray
    f: Expression
    tokens: list[int]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Triplet):
            return NotImplemented
        return (self.tokens == other.tokens and self.f == other.f
                and self.X.shape == other.X.shape
                and self.X.tobytes() == other.X.tobytes()
                and self.y.tobytes() == other.y.tobytes())


def triplet_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one triplet slot."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


# -- sampling -------------------------------------------------------------

def _sample_constant(config: GenConfig, rng: np.random.Generator, vocab: Vocabulary) -> float:
    if rng.random() < 0.5:
        value = float(rng.integers(1, 6))
    else:
        value = float(10.0 ** rng.uniform(-1.0, 1.0))
    if rng.random() < 0.25:
        value = -value
    return vocab.quantize(value)


def sample_expression(config: GenConfig, rng: np.random.Generator,
                      n_variables: Optional[int] = None,
                      vocab: Vocabulary = DEFAULT_VOCAB) -> Expression:
    """Random tree of depth at most ``config.max_depth``.

    The root expands whenever ``max_depth > 1``; deeper nodes become leaves
    with probability ``leaf_prob``. Leaves are constants with probability
    ``constant_prob`` and otherwise a uniformly chosen variable.
    """
    if n_variables is None:
        lo, hi = config.dim_range
        n_variables = int(rng.integers(lo, hi + 1))
    # canonical order, so a config round-tripped through sorted JSON draws the same trees
    ops = [o for o in UNARY_OPS + BINARY_OPS if o in config.operator_weights]
    weights = np.array([config.operator_weights[o] for o in ops], dtype=float)
    weights /= weights.sum()

    def leaf() -> Expression:
        if rng.random() < config.constant_prob:
            return Constant(_sample_constant(config, rng, vocab))
        return Variable(int(rng.integers(n_variables)))

    def grow(level: int) -> Expression:
        if level >= config.max_depth or (level > 1 and rng.random() < config.leaf_prob):
            return leaf()
        op = ops[int(rng.choice(len(ops), p=weights))]
        if op in UNARY_OPS:
            return Unary(op, grow(level + 1))
        if op == "pow":
            exponent = float(POW_EXPONENTS[int(rng.integers(len(POW_EXPONENTS)))])
            return Binary(op, grow(level + 1), Constant(exponent))
        return Binary(op, grow(level + 1), grow(level + 1))

    expr = grow(1)
    if config.require_variable and not variables(expr):
        expr = _replace_first_constant(expr, Variable(int(rng.integers(n_variables))))
    return expr


def _replace_first_constant(expr: Expression, new: Expression) -> Expression:
    done = False

    def walk(node: Expression) -> Expression:
        nonlocal done
        if done:
            return node
        if isinstance(node, Constant):
            done = True
            return new
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.child))
        if isinstance(node, Binary):
            if node.op == "pow":
                return Binary(node.op, walk(node.left), node.right)
            left = walk(node.left)
            return Binary(node.op, left, walk(node.right))
        return node

    out = walk(expr)
    return out if done else expr


def sample_inputs(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1 or not 1 <= d <= MAX_VARIABLES:
        raise ValueError("need n >= 1 and 1 <= d <= 10")
    return rng.standard_normal((n, d))


def build_triplet(f: Expression, X: np.ndarray, vocab: Vocabulary = DEFAULT_VOCAB,
                  overflow_cap: float = OVERFLOW_CAP, max_len: int = MAX_LEN) -> Optional[Triplet]:
    """Evaluate ``f`` on ``X``; return None when the pair must be rejected."""
    X = np.asarray(X, dtype=np.float64)
    if variables(f) and max(variables(f)) >= X.shape[1]:
        raise ValueError("expression uses more variables than X has columns")
    result = evaluate(f, X)
    if not result.valid or np.any(np.abs(result.values) > overflow_cap):
        return None
    try:
        tokens = tokenize(f, vocab, max_len)
    except LengthOverflowError:
        return None
    return Triplet(X, result.values, f, tokens)


def _generate_slot(config: GenConfig, index: int, vocab: Vocabulary) -> tuple[Triplet, int]:
    rng = triplet_rng(config.seed, index)
    lo, hi = config.dim_range
    for attempt in range(config.max_attempts):
        d = int(rng.integers(lo, hi + 1))
        f = sample_expression(config, rng, d, vocab)
        X = sample_inputs(config.points_per_triplet, d, rng)
        t = build_triplet(f, X, vocab, config.overflow_cap)
        if t is not None:
            return t, attempt
    raise RuntimeError(f"triplet {index}: no valid sample in {config.max_attempts} attempts")


def _generate_range(args) -> list[tuple[Triplet, int]]:
    config, start, stop, vocab_cfg = args
    vocab = Vocabulary(**vocab_cfg)
    return [_generate_slot(config, i, vocab) for i in range(start, stop)]


def generate_corpus(config: GenConfig, vocab: Vocabulary = DEFAULT_VOCAB,
                    workers: int = 1) -> tuple[list[Triplet], int]:
    """Generate ``config.n_triplets`` accepted triplets.

    Returns the triplets in slot order and the total number of rejected draws.
    """
    n = config.n_triplets
    if workers <= 1 or n < 2 * workers:
        results = [_generate_slot(config, i, vocab) for i in range(n)]
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        jobs = [(config, int(a), int(b), vocab.config()) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for chunk in pool.map(_generate_range, jobs) for r in chunk]
    triplets = [t for t, _ in results]
    rejected = sum(r for _, r in results)
    return triplets, rejected


def verify_triplet(t: Triplet, vocab: Vocabulary = DEFAULT_VOCAB) -> bool:
    """True when ``f`` reproduces ``y`` bit-exactly and ``tokens`` match."""
    result = evaluate(t.f, t.X)
    return (result.valid and result.values.tobytes() == t.y.tobytes()
            and tokenize(t.f, vocab) == t.tokens)


# -- corpus files ---------------------------------------------------------

class CorpusFormatError(ValueError):
    pass


def write_corpus(triplets: Iterable[Triplet], path, config: Optional[GenConfig] = None,
                 rejected: int = 0, vocab: Vocabulary = DEFAULT_VOCAB) -> None:
    manifest = {"version": CORPUS_VERSION,
                "config": config.to_dict() if config is not None else None,
                "rejected": int(rejected),
                "vocab_hash": vocab.hash}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True) + "\n")
        for t in triplets:
            record = {"tokens": [int(i) for i in t.tokens], "X": t.X.tolist(),
                      "y": t.y.tolist(), "d": int(t.d)}
            fh.write(json.dumps(record) + "\n")
    os.replace(tmp, path)


def _read_manifest(line: str) -> dict:
    try:
        manifest = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"unreadable corpus header: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("version") != CORPUS_VERSION:
        version = manifest.get("version") if isinstance(manifest, dict) else None
        raise CorpusFormatError(f"unsupported corpus format version {version!r}")
    return manifest


def iter_corpus(path, vocab: Vocabulary = DEFAULT_VOCAB) -> Iterator[Triplet]:
    """Stream triplets; the header is validated before the first record."""
    with open(path, "r", encoding="utf-8") as fh:
        _read_manifest(fh.readline())
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                X = np.array(rec["X"], dtype=np.float64).reshape(-1, int(rec["d"]))
                y = np.array(rec["y"], dtype=np.float64)
                tokens = [int(i) for i in rec["tokens"]]
                f = parse(tokens, vocab)
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise CorpusFormatError(f"corrupt record on line {lineno}: {exc}") from None
            yield Triplet(X, y, f, tokens)


def read_corpus(path, vocab: Vocabulary = DEFAULT_VOCAB) -> tuple[dict, list[Triplet]]:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = _read_manifest(fh.readline())
    return manifest, list(iter_corpus(path, vocab))

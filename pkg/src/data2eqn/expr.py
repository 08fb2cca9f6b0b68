"""Equation vocabulary, expression trees, prefix tokenization and evaluation.

Expressions are immutable trees over variables ``x0..x9``, constants and a
fixed operator set. They serialize to prefix-order token sequences wrapped in
``<sos> ... <eos>``; constants take three tokens (sign, mantissa, exponent).

Example
-------
>>> vocab = Vocabulary()
>>> e = Binary("add", Variable(0), Constant(2.0))
>>> [vocab.token(i) for i in tokenize(e, vocab)]
['<sos>', 'add', 'x0', '+', '2000', 'E-3', '<eos>']
>>> parse(tokenize(e, vocab), vocab) == e
True
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

PAD, SOS, EOS = "<pad>", "<sos>", "<eos>"
UNARY_OPS = ("sin", "cos", "exp", "log", "sqrt", "abs", "neg", "inv")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")
MAX_LEN = 200
MAX_VARIABLES = 10


@dataclass(frozen=True)
class Variable:
    index: int


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expression"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"


Expression = Union[Variable, Constant, Unary, Binary]


class ParseError(ValueError):
    """Raised when a token sequence is not a well-formed expression."""

    def __init__(self, position: int, reason: str):
        super().__init__(f"parse error at token {position}: {reason}")
        self.position = position
        self.reason = reason


class LengthOverflowError(ValueError):
    pass


class Vocabulary:
    """Token table: control tokens, operators, variables and constant pieces.

    Ids are assigned in a fixed order starting with ``<pad>=0, <sos>=1,
    <eos>=2``. Constants are encoded as ``sign mantissa exponent`` where the
    mantissa has ``mantissa_digits`` significant digits and the base-10
    exponent lies in ``[-exponent_range, exponent_range]``.
    """

    def __init__(self, mantissa_digits: int = 4, exponent_range: int = 10,
                 n_variables: int = MAX_VARIABLES):
        if not 1 <= n_variables <= MAX_VARIABLES:
            raise ValueError(f"n_variables must be in [1, {MAX_VARIABLES}]")
        if mantissa_digits < 1 or exponent_range < 0:
            raise ValueError("invalid constant encoding parameters")
        self.mantissa_digits = mantissa_digits
        self.exponent_range = exponent_range
        self.n_variables = n_variables

        tokens = [PAD, SOS, EOS]
        tokens += UNARY_OPS
        tokens += BINARY_OPS
        tokens += [f"x{i}" for i in range(n_variables)]
        tokens += ["+", "-"]
        tokens += [str(m) for m in range(10 ** mantissa_digits)]
        tokens += [f"E{e:+d}" for e in range(-exponent_range, exponent_range + 1)]
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

        self.pad_id, self.sos_id, self.eos_id = 0, 1, 2
        self.unary_start = 3
        self.binary_start = self.unary_start + len(UNARY_OPS)
        self.var_start = self.binary_start + len(BINARY_OPS)
        self.sign_start = self.var_start + n_variables
        self.mantissa_start = self.sign_start + 2
        self.exponent_start = self.mantissa_start + 10 ** mantissa_digits
        assert self.exponent_start + 2 * exponent_range + 1 == len(self.tokens)

        # arity per id; -1 marks tokens that never start a subtree
        arity = np.full(len(self.tokens), -1, dtype=np.int64)
        arity[self.unary_start:self.binary_start] = 1
        arity[self.binary_start:self.var_start] = 2
        arity[self.var_start:self.sign_start] = 0
        self.arity = arity

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def __repr__(self) -> str:
        return (f"Vocabulary(mantissa_digits={self.mantissa_digits}, "
                f"exponent_range={self.exponent_range}, n_variables={self.n_variables})")

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def masked_ids(self) -> tuple[int, int]:
        """Tokens the decoder may never emit."""
        return (self.pad_id, self.sos_id)

    def to_json(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=0)

    def config(self) -> dict:
        return {"mantissa_digits": self.mantissa_digits,
                "exponent_range": self.exponent_range,
                "n_variables": self.n_variables}

    # -- constants ---------------------------------------------------------

    def encode_constant(self, value: float) -> tuple[str, int, int]:
        """Quantize ``value`` to ``(sign, mantissa, exponent)``."""
        if not np.isfinite(value):
            raise ValueError(f"constant {value!r} is not finite")
        sign = "-" if np.signbit(value) and value != 0 else "+"
        mag = abs(float(value))
        if mag == 0.0:
            return "+", 0, 0
        k = self.mantissa_digits
        text = f"{mag:.{k - 1}e}"
        digits, exp10 = text.split("e")
        mantissa = int(digits.replace(".", ""))
        exponent = int(exp10) - (k - 1)
        while exponent < -self.exponent_range and mantissa > 0:
            mantissa = (mantissa + 5) // 10
            exponent += 1
        if mantissa == 0:
            return "+", 0, 0
        if exponent > self.exponent_range:
            raise ValueError(f"constant {value!r} exceeds the representable range")
        return sign, mantissa, exponent

    @staticmethod
    def decode_constant(sign: str, mantissa: int, exponent: int) -> float:
        return float(f"{sign}{mantissa}e{exponent}")

    def quantize(self, value: float) -> float:
        return self.decode_constant(*self.encode_constant(value))


DEFAULT_VOCAB = Vocabulary()


# -- tree utilities -------------------------------------------------------

def depth(expr: Expression) -> int:
    if isinstance(expr, (Variable, Constant)):
        return 1
    if isinstance(expr, Unary):
        return 1 + depth(expr.child)
    return 1 + max(depth(expr.left), depth(expr.right))


def size(expr: Expression) -> int:
    if isinstance(expr, (Variable, Constant)):
        return 1
    if isinstance(expr, Unary):
        return 1 + size(expr.child)
    return 1 + size(expr.left) + size(expr.right)


def variables(expr: Expression) -> set[int]:
    if isinstance(expr, Variable):
        return {expr.index}
    if isinstance(expr, Constant):
        return set()
    if isinstance(expr, Unary):
        return variables(expr.child)
    return variables(expr.left) | variables(expr.right)


def validate(expr: Expression, n_variables: int = MAX_VARIABLES,
             max_depth: Optional[int] = None) -> None:
    """Check the structural invariants of ``expr``; raise ValueError if broken."""
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Variable):
            if not 0 <= node.index < n_variables:
                raise ValueError(f"variable x{node.index} outside dimension {n_variables}")
        elif isinstance(node, Constant):
            if not np.isfinite(node.value):
                raise ValueError("non-finite constant")
        elif isinstance(node, Unary):
            if node.op not in UNARY_OPS:
                raise ValueError(f"unknown unary operator {node.op!r}")
            stack.append(node.child)
        elif isinstance(node, Binary):
            if node.op not in BINARY_OPS:
                raise ValueError(f"unknown binary operator {node.op!r}")
            stack.extend((node.right, node.left))
        else:
            raise TypeError(f"not an expression node: {node!r}")
    if max_depth is not None and depth(expr) > max_depth:
        raise ValueError(f"expression depth {depth(expr)} exceeds max_depth {max_depth}")


_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


def to_infix(expr: Expression) -> str:
    """Human-readable, fully parenthesized rendering."""
    if isinstance(expr, Variable):
        return f"x{expr.index}"
    if isinstance(expr, Constant):
        return f"{expr.value:.4g}"
    if isinstance(expr, Unary):
        if expr.op == "neg":
            return f"(-{to_infix(expr.child)})"
        if expr.op == "inv":
            return f"(1/{to_infix(expr.child)})"
        return f"{expr.op}({to_infix(expr.child)})"
    return f"({to_infix(expr.left)} {_INFIX[expr.op]} {to_infix(expr.right)})"


def from_prefix(text: str) -> Expression:
    """Build an expression from space-separated prefix notation.

    >>> to_infix(from_prefix("add x0 mul 2 x1"))
    '(x0 + (2 * x1))'
    """
    words = text.split()
    pos = 0

    def node() -> Expression:
        nonlocal pos
        if pos >= len(words):
            raise ValueError(f"incomplete prefix expression: {text!r}")
        w = words[pos]
        pos += 1
        if w in UNARY_OPS:
            return Unary(w, node())
        if w in BINARY_OPS:
            left = node()
            return Binary(w, left, node())
        if w.startswith("x") and w[1:].isdigit():
            return Variable(int(w[1:]))
        try:
            return Constant(float(w))
        except ValueError:
            raise ValueError(f"unknown symbol {w!r} in {text!r}") from None

    expr = node()
    if pos != len(words):
        raise ValueError(f"trailing symbols in prefix expression: {text!r}")
    return expr


# -- tokenization ---------------------------------------------------------

def tokenize(expr: Expression, vocab: Vocabulary = DEFAULT_VOCAB,
             max_len: int = MAX_LEN) -> list[int]:
    """Prefix serialization of ``expr`` wrapped in ``<sos> ... <eos>``.

    Constants are quantized by the vocabulary's constant encoding. Raises
    LengthOverflowError when the sequence would exceed ``max_len`` tokens.
    """
    out = [vocab.sos_id]
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Variable):
            out.append(vocab.id(f"x{node.index}"))
        elif isinstance(node, Constant):
            sign, mantissa, exponent = vocab.encode_constant(node.value)
            out.append(vocab.sign_start + (sign == "-"))
            out.append(vocab.mantissa_start + mantissa)
            out.append(vocab.exponent_start + exponent + vocab.exponent_range)
        elif isinstance(node, Unary):
            out.append(vocab.id(node.op))
            stack.append(node.child)
        else:
            out.append(vocab.id(node.op))
            stack.append(node.right)
            stack.append(node.left)
        if len(out) + 1 > max_len:
            raise LengthOverflowError(f"serialized expression exceeds {max_len} tokens")
    out.append(vocab.eos_id)
    return out


def parse(tokens: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB,
          n_variables: Optional[int] = None) -> Expression:
    """Inverse of :func:`tokenize`.

    Trailing ``<pad>`` tokens after ``<eos>`` are ignored. Raises ParseError
    naming the first offending position. ``n_variables`` restricts the
    admissible variable indices (defaults to the vocabulary's).
    """
    toks = [int(t) for t in tokens]
    n = len(toks)
    if n == 0:
        raise ParseError(0, "empty sequence")
    if toks[0] != vocab.sos_id:
        raise ParseError(0, "sequence must start with <sos>")
    n_vars = vocab.n_variables if n_variables is None else n_variables
    V = len(vocab)
    pos = 1

    def read() -> int:
        nonlocal pos
        if pos >= n:
            raise ParseError(pos, "sequence ended inside an expression")
        t = toks[pos]
        if not 0 <= t < V:
            raise ParseError(pos, f"token id {t} outside the vocabulary")
        pos += 1
        return t

    def node() -> Expression:
        at = pos
        t = read()
        if vocab.unary_start <= t < vocab.binary_start:
            return Unary(UNARY_OPS[t - vocab.unary_start], node())
        if vocab.binary_start <= t < vocab.var_start:
            left = node()
            return Binary(BINARY_OPS[t - vocab.binary_start], left, node())
        if vocab.var_start <= t < vocab.sign_start:
            index = t - vocab.var_start
            if index >= n_vars:
                raise ParseError(at, f"variable x{index} outside dimension {n_vars}")
            return Variable(index)
        if vocab.sign_start <= t < vocab.mantissa_start:
            sign = "+" if t == vocab.sign_start else "-"
            m_at, m = pos, read()
            if not vocab.mantissa_start <= m < vocab.exponent_start:
                raise ParseError(m_at, "expected a mantissa token")
            e_at, e = pos, read()
            if not vocab.exponent_start <= e < V:
                raise ParseError(e_at, "expected an exponent token")
            return Constant(vocab.decode_constant(
                sign, m - vocab.mantissa_start,
                e - vocab.exponent_start - vocab.exponent_range))
        if t == vocab.eos_id:
            raise ParseError(at, "<eos> before the expression is complete")
        raise ParseError(at, f"unexpected token {vocab.token(t)!r}")

    expr = node()
    if pos >= n:
        raise ParseError(pos, "missing <eos>")
    if toks[pos] != vocab.eos_id:
        raise ParseError(pos, "tokens after a complete expression")
    for i in range(pos + 1, n):
        if toks[i] != vocab.pad_id:
            raise ParseError(i, "tokens after <eos>")
    return expr


# -- evaluation -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EvalResult:
    values: np.ndarray
    valid: bool
    failure_reason: Optional[str] = None  # parse_error | domain_error | non_finite | length_overflow

    @classmethod
    def failure(cls, n: int, reason: str) -> "EvalResult":
        return cls(np.full(n, np.nan), False, reason)


class _EvalFailure(Exception):
    def __init__(self, reason: str):
        self.reason = reason


def _eval(node: Expression, X: np.ndarray) -> np.ndarray:
    if isinstance(node, Variable):
        return X[:, node.index]
    if isinstance(node, Constant):
        return np.full(X.shape[0], node.value)
    if isinstance(node, Unary):
        a = _eval(node.child, X)
        op = node.op
        if op == "sin":
            out = np.sin(a)
        elif op == "cos":
            out = np.cos(a)
        elif op == "exp":
            out = np.exp(a)
        elif op == "log":
            if np.any(a <= 0):
                raise _EvalFailure("domain_error")
            out = np.log(a)
        elif op == "sqrt":
            if np.any(a < 0):
                raise _EvalFailure("domain_error")
            out = np.sqrt(a)
        elif op == "abs":
            out = np.abs(a)
        elif op == "neg":
            out = -a
        elif op == "inv":
            if np.any(a == 0):
                raise _EvalFailure("domain_error")
            out = 1.0 / a
        else:
            raise ValueError(f"unknown unary operator {op!r}")
    else:
        a = _eval(node.left, X)
        b = _eval(node.right, X)
        op = node.op
        if op == "add":
            out = a + b
        elif op == "sub":
            out = a - b
        elif op == "mul":
            out = a * b
        elif op == "div":
            if np.any(b == 0):
                raise _EvalFailure("domain_error")
            out = a / b
        elif op == "pow":
            if np.any((a < 0) & (b != np.round(b))) or np.any((a == 0) & (b < 0)):
                raise _EvalFailure("domain_error")
            out = np.power(a, b)
        else:
            raise ValueError(f"unknown binary operator {op!r}")
    if not np.all(np.isfinite(out)):
        raise _EvalFailure("non_finite")
    return out


def evaluate(expr: Expression, X: np.ndarray) -> EvalResult:
    """Evaluate ``expr`` row-wise on the ``n x d`` matrix ``X`` in float64.

    Never raises for numerical problems: division by zero, log/sqrt outside
    their domain, negative bases with non-integer exponents and overflow all
    come back as ``valid=False``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty 2-d array")
    bad = [i for i in variables(expr) if i >= X.shape[1]]
    if bad:
        raise ValueError(f"expression uses x{max(bad)} but X has {X.shape[1]} columns")
    with np.errstate(all="ignore"):
        try:
            values = _eval(expr, X)
        except _EvalFailure as fail:
            return EvalResult.failure(X.shape[0], fail.reason)
    return EvalResult(np.array(values, dtype=np.float64), True)


def evaluate_tokens(tokens: Sequence[int], X: np.ndarray,
                    vocab: Vocabulary = DEFAULT_VOCAB,
                    max_len: int = MAX_LEN) -> tuple[Optional[Expression], EvalResult]:
    """Parse and evaluate a decoder output; every failure is tagged, never raised."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    toks = list(tokens)
    if len(toks) > max_len or (len(toks) == max_len and toks[-1] != vocab.eos_id):
        return None, EvalResult.failure(n, "length_overflow")
    try:
        expr = parse(toks, vocab, n_variables=min(X.shape[1], vocab.n_variables))
    except ParseError:
        return None, EvalResult.failure(n, "parse_error")
    return expr, evaluate(expr, X)

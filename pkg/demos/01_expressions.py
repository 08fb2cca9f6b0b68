"""Expressions, tokens and the reward.

Run: python3 demos/01_expressions.py
"""
import numpy as np

from data2eqn.expr import DEFAULT_VOCAB, evaluate, evaluate_tokens, from_prefix, parse, to_infix, tokenize
from data2eqn.reel import compute_r2, smooth_reward

# An equation is a tree; the model sees it as a prefix token sequence.
f = from_prefix("add mul 2.5 x0 sin x1")
tokens = tokenize(f)
print(to_infix(f))
print(tokens)
print([DEFAULT_VOCAB.token(t) for t in tokens])

# Constants are three tokens: sign, mantissa, exponent.
assert parse(tokens) == f

X = np.random.default_rng(0).standard_normal((100, 2))
y = evaluate(f, X).values

# Broken sequences do not raise; they come back tagged.
expr, result = evaluate_tokens(tokens[:-3] + [DEFAULT_VOCAB.eos_id], X)
print("truncated:", expr, result.valid, result.failure_reason)
expr, result = evaluate_tokens(tokenize(from_prefix("log sub x0 x0")), X)
print("log(0):", result.valid, result.failure_reason)

# Candidates are scored by R^2, squashed into (-1, 1) for training.
for text in ("add mul 2.5 x0 sin x1", "mul 2.5 x0", "sin x1", "exp x0"):
    r2 = compute_r2(y, evaluate(from_prefix(text), X))
    print(f"{text:<24} R2 {r2:+9.4f}  reward {smooth_reward(r2):+.4f}")

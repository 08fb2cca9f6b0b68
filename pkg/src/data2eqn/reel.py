"""Reinforcement finetuning of a pretrained policy on a single dataset.

The finetuned policy pi_theta starts as a copy of the pretrained snapshot
pi_old, which stays frozen. Each update draws one rollout per trajectory
subset, scores it by the smoothed R^2 of the decoded equation on that
subset, and minimizes the clipped importance-weighted surrogate plus a KL
penalty towards pi_old.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import nn
from .autodiff import Tensor
from .expr import MAX_LEN, MAX_VARIABLES, EvalResult, evaluate_tokens
from .model import AdamW, NonFiniteLossError, Policy, pad_batch, stream

_REWARD_CAP = math.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class FinetuneConfig:
    n_subsets: int = 128
    subset_size: int = 200
    epochs: int = 10
    batch_size: int = 64
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.2
    learning_rate: float = 5e-5
    weight_decay: float = 0.0
    decode_mode: str = "sample"
    temperature: float = 1.0
    beam_size: int = 4
    max_len: int = MAX_LEN
    refresh_old_every: int = 0
    micro_batch_tokens: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.n_subsets < 1 or self.batch_size < 1:
            raise ValueError("n_subsets and batch_size must be positive")
        if not 1 <= self.subset_size <= MAX_LEN:
            raise ValueError(f"subset_size must be in [1, {MAX_LEN}]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be non-negative")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning_rate and temperature must be positive")
        if self.decode_mode not in ("sample", "beam"):
            raise ValueError("decode_mode must be 'sample' or 'beam'")
        if self.refresh_old_every < 0:
            raise ValueError("refresh_old_every must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FinetuneConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown FinetuneConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrajectorySubset:
    X: np.ndarray
    y: np.ndarray
    source_row_indices: np.ndarray


@dataclass
class Rollout:
    tokens: list[int]
    valid: bool
    r2: float
    reward: float
    rho: float = 1.0
    kl: float = 0.0

    def to_dict(self) -> dict:
        return {"tokens": [int(t) for t in self.tokens], "valid": self.valid,
                "r2": self.r2, "reward": self.reward, "rho": self.rho, "kl": self.kl}


@dataclass
class StepDiagnostics:
    loss: float
    mean_reward: float
    mean_r2: float
    mean_rho: float
    kl: float
    valid_rate: float
    rollouts: list[Rollout]

    def record(self) -> dict:
        return {"mean_reward": self.mean_reward, "mean_r2": self.mean_r2,
                "mean_rho": self.mean_rho, "kl": self.kl,
                "valid_rate": self.valid_rate, "loss": self.loss}


# -- scalar kernels -------------------------------------------------------

def sample_subsets(X, y, config: FinetuneConfig,
                   rng: Optional[np.random.Generator] = None) -> list[TrajectorySubset]:
    """Bootstrap ``n_subsets`` row samples of ``subset_size`` rows each."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("expected X of shape (n, d) and y of shape (n,)")
    n, d = X.shape
    if n < 1:
        raise ValueError("cannot sample subsets from an empty dataset")
    if d > MAX_VARIABLES:
        raise ValueError(f"at most {MAX_VARIABLES} variables are supported, got {d}")
    if rng is None:
        rng = stream(config.seed, "subsets")
    idx = rng.integers(0, n, size=(config.n_subsets, config.subset_size))
    return [TrajectorySubset(X[row], y[row], row) for row in idx]


def compute_r2(y, y_pred) -> float:
    """Coefficient of determination; -1 for an invalid prediction.

    ``y_pred`` is an :class:`EvalResult` or an array. A constant target
    scores 1 when matched to within 1e-9 everywhere and -1 otherwise.
    """
    if isinstance(y_pred, EvalResult):
        if not y_pred.valid:
            return -1.0
        y_pred = y_pred.values
    y = np.asarray(y, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y.shape != y_pred.shape:
        raise ValueError("y and y_pred lengths differ")
    if not np.all(np.isfinite(y_pred)):
        return -1.0
    with np.errstate(over="ignore", invalid="ignore"):
        resid = y - y_pred
        # tested exactly: a rounded mean would leave spurious variance
        if np.all(y == y[0]):
            return 1.0 if float(np.max(np.abs(resid))) <= 1e-9 else -1.0
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        ss_res = float(np.sum(resid ** 2))
    return 1.0 - ss_res / ss_tot


def smooth_reward(r2):
    """2 / (1 + exp(-r2)) - 1, which equals tanh(r2 / 2); kept inside (-1, 1)."""
    out = np.clip(np.tanh(np.asarray(r2, dtype=np.float64) / 2.0), -_REWARD_CAP, _REWARD_CAP)
    return float(out) if out.ndim == 0 else out


def importance_ratio(new_logprobs, old_logprobs) -> float:
    """Geometric mean of per-token probability ratios."""
    new = np.asarray(new_logprobs, dtype=np.float64)
    old = np.asarray(old_logprobs, dtype=np.float64)
    if new.shape != old.shape or new.ndim != 1 or new.size == 0:
        raise ValueError("log-probability sequences must be non-empty and of equal length")
    return float(np.exp(np.mean(new - old)))


def clipped_loss(rho, r, epsilon: float):
    """-min(rho * r, clip(rho, 1 - eps, 1 + eps) * r), elementwise."""
    rho = np.asarray(rho, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    out = -np.minimum(rho * r, np.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * r)
    return float(out) if out.ndim == 0 else out


def kl_loss(old_distributions, new_distributions, tol: float = 1e-6) -> float:
    """Mean over steps of KL(old || new) summed over the whole vocabulary.

    Inputs are (T, V) probability arrays whose rows must each sum to one.
    """
    p = np.atleast_2d(np.asarray(old_distributions, dtype=np.float64))
    q = np.atleast_2d(np.asarray(new_distributions, dtype=np.float64))
    if p.shape != q.shape or p.shape[0] == 0:
        raise ValueError("distributions must share a non-empty (T, V) shape")
    for name, a in (("old", p), ("new", q)):
        if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1.0) > tol):
            raise ValueError(f"{name} distributions are not normalized")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(np.mean(terms.sum(axis=-1)))


# -- differentiable pieces ------------------------------------------------

def kl_from_logprobs(old_logp: np.ndarray, new_logp: Tensor) -> Tensor:
    """Per-step KL(old || new) over the last axis, differentiable in ``new_logp``.

    Fused so that only one vocabulary-sized array is kept for backward.
    """
    p_old = np.exp(old_logp)
    value = np.sum(p_old * (old_logp - new_logp.data), axis=-1)

    def backward(g):
        return (-p_old * g[..., None],)

    return ad.custom(value, (new_logp,), backward)


def surrogate(rho: Tensor, reward: np.ndarray, epsilon: float) -> Tensor:
    """Per-sequence clipped loss as a tensor of shape ``rho.shape``."""
    return -ad.minimum(rho * reward, ad.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * reward)


# -- updates --------------------------------------------------------------

def _stack(subsets: Sequence[TrajectorySubset]):
    return np.stack([s.X for s in subsets]), np.stack([s.y for s in subsets])


def old_memory(old: Policy, subsets: Sequence[TrajectorySubset], batch_size: int = 64) -> np.ndarray:
    """Encoder memory of the frozen policy for every subset."""
    out = []
    for i in range(0, len(subsets), batch_size):
        X, y = _stack(subsets[i:i + batch_size])
        out.append(old.encode_batch(X, y))
    return np.concatenate(out)


def _chunks(lengths: Sequence[int], budget: int) -> list[np.ndarray]:
    chunks, cur, width = [], [], 0
    for i, L in enumerate(lengths):
        if cur and (len(cur) + 1) * max(width, L) > budget:
            chunks.append(np.array(cur))
            cur, width = [], 0
        cur.append(i)
        width = max(width, L)
    if cur:
        chunks.append(np.array(cur))
    return chunks


def reel_objective(params: dict[str, Tensor], old_params: dict[str, Tensor], config: nn.ModelConfig,
                   memory: Tensor, old_mem: np.ndarray, sequences: Sequence[Sequence[int]],
                   rewards: np.ndarray, epsilon: float, beta: float, vocab, scale: float = None):
    """Summed clipped loss plus beta-weighted KL for a group of rollouts.

    Returns (loss tensor scaled by ``scale``, per-sequence rho, per-sequence KL).
    ``scale`` defaults to one over the number of sequences.
    """
    tokens, targets, mask = pad_batch(sequences, vocab)
    lengths = mask.sum(axis=1)
    logits, _ = nn.decode(params, config, tokens, memory)
    logp = ad.log_softmax(logits)
    with ad.no_grad():
        old_logits, _ = nn.decode(old_params, config, tokens, Tensor(old_mem))
        old_logp = ad.log_softmax(old_logits).data
    new_tok = ad.gather(logp, targets[..., None], axis=-1)[..., 0]
    old_tok = np.take_along_axis(old_logp, targets[..., None], axis=-1)[..., 0]
    rho = ad.exp(((new_tok - old_tok) * mask).sum(axis=1) * (1.0 / lengths))
    kl = (kl_from_logprobs(old_logp, logp) * mask).sum(axis=1) * (1.0 / lengths)
    per_seq = surrogate(rho, np.asarray(rewards, dtype=np.float64), epsilon)
    if beta:
        per_seq = per_seq + kl * beta
    scale = 1.0 / len(sequences) if scale is None else scale
    return per_seq.sum() * scale, rho.data.copy(), kl.data.copy()


def _evaluate_rollout(tokens, subset: TrajectorySubset, vocab, max_len) -> tuple[bool, float]:
    _, result = evaluate_tokens(tokens, subset.X, vocab, max_len)
    r2 = compute_r2(subset.y, result)
    return bool(result.valid), r2


def finetune_step(policy: Policy, old: Policy, optimizer: AdamW,
                  subsets: Sequence[TrajectorySubset], config: FinetuneConfig,
                  rng: np.random.Generator, old_mem: Optional[np.ndarray] = None) -> StepDiagnostics:
    """One rollout per subset, then one gradient step on ``policy`` only.

    ``old_mem`` optionally supplies pi_old's encoder memory for ``subsets``.
    Raises :class:`NonFiniteLossError` (with the rollouts attached) instead
    of applying a non-finite update.
    """
    if not subsets:
        raise ValueError("empty batch")
    vocab = policy.vocab
    B = len(subsets)
    X, y = _stack(subsets)
    params = policy.tensors(requires_grad=True)
    memory = nn.encode(params, policy.config, nn.featurize(X, y))
    if old_mem is None:
        old_mem = old.encode_batch(X, y)

    if config.decode_mode == "sample":
        gens = policy.generate(memory.data, "sample", rng=rng, temperature=config.temperature,
                               max_len=config.max_len)
    else:
        gens = [beams[0] for beams in policy.generate(memory.data, "beam", beam_size=config.beam_size,
                                                      max_len=config.max_len)]
    rollouts = []
    for g, s in zip(gens, subsets):
        valid, r2 = _evaluate_rollout(g.tokens, s, vocab, config.max_len)
        rollouts.append(Rollout(g.tokens, valid, r2, smooth_reward(r2)))
    rewards = np.array([r.reward for r in rollouts])

    old_params = old.tensors()
    mem_grad = np.zeros_like(memory.data)
    total = 0.0
    rho = np.zeros(B)
    kl = np.zeros(B)
    for idx in _chunks([len(r.tokens) for r in rollouts], config.micro_batch_tokens):
        leaf = Tensor(memory.data[idx], requires_grad=True)
        loss, rho[idx], kl[idx] = reel_objective(
            params, old_params, policy.config, leaf, old_mem[idx],
            [rollouts[i].tokens for i in idx], rewards[idx],
            config.clip_epsilon, config.kl_coefficient, vocab, scale=1.0 / B)
        loss.backward()
        total += loss.item()
        if leaf.grad is not None:
            mem_grad[idx] = leaf.grad
    memory.backward(mem_grad)
    for r, p, k in zip(rollouts, rho, kl):
        r.rho, r.kl = float(p), float(k)

    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        bad = [r.to_dict() for r in rollouts if not (np.isfinite(r.rho) and np.isfinite(r.kl))]
        raise NonFiniteLossError("non-finite finetuning loss",
                                 {"offending": bad, "rollouts": [r.to_dict() for r in rollouts]})
    optimizer.step(grads)
    return StepDiagnostics(
        loss=total, mean_reward=float(rewards.mean()),
        mean_r2=float(np.mean([r.r2 for r in rollouts])), mean_rho=float(rho.mean()),
        kl=float(kl.mean()), valid_rate=float(np.mean([r.valid for r in rollouts])),
        rollouts=rollouts)


@dataclass
class ReelResult:
    policy: Policy
    log: list[dict]


def run_reel(pretrained: Policy, X, y, config: FinetuneConfig = FinetuneConfig(),
             log_path=None, checkpoint_path=None) -> ReelResult:
    """Finetune a copy of ``pretrained`` on one dataset.

    Each epoch walks the ``n_subsets`` bootstrap subsets round-robin in
    batches of ``batch_size``. ``pretrained`` itself is never modified.
    If a step fails, the last good snapshot is written to
    ``checkpoint_path`` (when given) before the error propagates.
    """
    subsets = sample_subsets(X, y, config, stream(config.seed, "subsets"))
    rng = stream(config.seed, "rollouts")
    old = pretrained
    policy = pretrained.copy()
    optimizer = AdamW(policy.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    log: list[dict] = []
    if config.epochs == 0:
        _write_log(log_path, log)
        return ReelResult(policy, log)

    old_mem = old_memory(old, subsets, config.batch_size)
    N, B = config.n_subsets, config.batch_size
    steps_per_epoch = -(-N // B)
    step = 0
    try:
        for epoch in range(config.epochs):
            for _ in range(steps_per_epoch):
                idx = [(step * B + j) % N for j in range(B)]
                diag = finetune_step(policy, old, optimizer, [subsets[i] for i in idx],
                                     config, rng, old_mem[idx])
                step += 1
                log.append({"step": step, "epoch": epoch + 1, **diag.record()})
                if config.refresh_old_every and step % config.refresh_old_every == 0:
                    old = policy.copy()
                    old_mem = old_memory(old, subsets, config.batch_size)
    except NonFiniteLossError as exc:
        if checkpoint_path is not None:
            # the optimizer never applied the failing update
            mdl.save(policy, checkpoint_path, {"aborted_at_step": step + 1, "rollouts": exc.detail})
        _write_log(log_path, log)
        raise
    _write_log(log_path, log)
    return ReelResult(policy, log)


def _write_log(path, log: list[dict]) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def epoch_means(log: Sequence[dict], key: str = "mean_reward") -> dict[int, float]:
    """Average of ``key`` per epoch, keyed by 1-based epoch number."""
    out: dict[int, list[float]] = {}
    for rec in log:
        out.setdefault(rec["epoch"], []).append(rec[key])
    return {e: float(np.mean(v)) for e, v in sorted(out.items())}

"""The equation-generating policy: encoding, decoding, scoring, pretraining
and checkpoints.

A :class:`Policy` is a snapshot of all network parameters together with the
vocabulary and hyperparameters they belong to. Inference methods never
mutate it; training goes through :class:`AdamW`, which updates the parameter
arrays in place.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .expr import DEFAULT_VOCAB, MAX_LEN, MAX_VARIABLES, Vocabulary
from .nn import ACTION_OFFSET, ModelConfig

CHECKPOINT_VERSION = 1
_MAGIC = b"D2EQCKPT"


class CheckpointError(ValueError):
    pass


class VocabularyMismatchError(CheckpointError):
    pass


class NonFiniteLossError(FloatingPointError):
    """A training loss came out NaN or infinite; ``detail`` names the culprit."""

    def __init__(self, message: str, detail=None):
        super().__init__(message)
        self.detail = detail


@dataclass
class Generation:
    tokens: list[int]
    logprobs: np.ndarray  # per emitted token, under the untempered policy

    @property
    def logprob(self) -> float:
        return float(self.logprobs.sum())

    @property
    def mean_logprob(self) -> float:
        return float(self.logprobs.mean()) if len(self.logprobs) else 0.0


def _as_table(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("expected X of shape (n, d) and y of shape (n,)")
    n, d = X.shape
    if n < 1 or n > MAX_LEN:
        raise ValueError(f"tables must have between 1 and {MAX_LEN} rows, got {n}")
    if d < 1 or d > MAX_VARIABLES:
        raise ValueError(f"tables must have between 1 and {MAX_VARIABLES} columns, got {d}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("table contains non-finite values")
    return X, y


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one index per row of ``probs`` (one uniform per row).

    Rows need not be normalized.
    """
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


class Policy:
    """Parameter snapshot plus the inference API of the policy network."""

    def __init__(self, config: ModelConfig = ModelConfig(), vocab: Vocabulary = DEFAULT_VOCAB,
                 params: Optional[dict[str, np.ndarray]] = None, seed: int = 0):
        if vocab.masked_ids != (0, 1):
            raise ValueError("vocabulary must reserve ids 0 and 1 for <pad> and <sos>")
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else nn.init_params(config, vocab, seed)

    # -- bookkeeping ------------------------------------------------------

    def copy(self) -> "Policy":
        return Policy(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    # -- inference --------------------------------------------------------

    def encode(self, X, y) -> np.ndarray:
        """Latent embedding (memory_slots, width) of one (X, y) table."""
        X, y = _as_table(X, y)
        return self.encode_batch(X[None], y[None])[0]

    def encode_batch(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return nn.encode(self.tensors(), self.config, nn.featurize(X, y)).data

    def _logits(self, e: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.size == 0 or prefix[0] != self.vocab.sos_id:
            raise ValueError("decoder prefix must begin with <sos>")
        if prefix.size >= self.config.max_len:
            raise ValueError("prefix already at maximum length")
        with ad.no_grad():
            logits, _ = nn.decode(self.tensors(), self.config, prefix[None],
                                  Tensor(np.asarray(e)[None]))
        return logits.data[0, -1]

    def policy_distribution(self, e: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
        """Next-token probabilities over the full vocabulary (<pad>, <sos> get 0)."""
        logits = self._logits(e, prefix)
        p = np.exp(logits - logits.max())
        probs = np.zeros(len(self.vocab))
        probs[ACTION_OFFSET:] = p / p.sum()
        return probs

    def step_greedy(self, e: np.ndarray, prefix: Sequence[int]) -> int:
        """Most probable next token; ties go to the lowest id."""
        return int(np.argmax(self.policy_distribution(e, prefix)))

    def step_sample(self, e: np.ndarray, prefix: Sequence[int], temperature: float,
                    rng: np.random.Generator) -> int:
        logits = self._logits(e, prefix) / temperature
        p = np.exp(logits - logits.max())
        return int(sample_rows(p, rng)[0]) + ACTION_OFFSET

    def score_sequence(self, e: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
        """Teacher-forced log-probability of every token after <sos>."""
        return self.score_batch(np.asarray(e)[None], [tokens])[0]

    def score_batch(self, memory: np.ndarray, sequences: Sequence[Sequence[int]]) -> list[np.ndarray]:
        V = len(self.vocab)
        for s in sequences:
            if len(s) < 2 or s[0] != self.vocab.sos_id:
                raise ValueError("sequences must begin with <sos> and contain a token")
            if min(s) < 0 or max(s) >= V:
                raise ValueError("token id outside the vocabulary")
            if min(s[1:]) < ACTION_OFFSET:
                raise ValueError("<pad>/<sos> cannot appear after the first position")
        tokens, targets, mask = pad_batch(sequences, self.vocab)
        with ad.no_grad():
            logits, _ = nn.decode(self.tensors(), self.config, tokens, Tensor(memory))
            logp = ad.log_softmax(logits).data
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        return [picked[i, :int(mask[i].sum())].copy() for i in range(len(sequences))]

    def generate(self, memory: np.ndarray, mode: str = "greedy", *,
                 rng: Optional[np.random.Generator] = None, temperature: float = 1.0,
                 beam_size: int = 4, max_len: Optional[int] = None):
        """Decode from a batch of latent embeddings ``memory`` (B, M, D).

        ``greedy`` and ``sample`` return one :class:`Generation` per row;
        ``beam`` returns, per row, the ``beam_size`` best completed
        sequences ranked by mean token log-probability.
        """
        memory = np.asarray(memory, dtype=np.float64)
        if memory.ndim == 2:
            memory = memory[None]
        max_len = min(max_len or self.config.max_len, self.config.max_len)
        if mode == "beam":
            return [self._beam(memory[i:i + 1], beam_size, max_len) for i in range(memory.shape[0])]
        if mode == "sample" and rng is None:
            raise ValueError("sampling requires an rng")
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {mode!r}")
        return self._rollout(memory, mode, rng, temperature, max_len)

    def _rollout(self, memory, mode, rng, temperature, max_len) -> list[Generation]:
        B = memory.shape[0]
        vocab = self.vocab
        seqs = [[vocab.sos_id] for _ in range(B)]
        logps: list[list[float]] = [[] for _ in range(B)]
        active = np.arange(B)
        params = self.tensors()
        cache = None
        mem = Tensor(memory)
        last = np.full((B, 1), vocab.sos_id, dtype=np.int64)
        with ad.no_grad():
            for t in range(max_len - 1):
                logits, cache = nn.decode(params, self.config, last, mem, cache, start=t)
                z = logits.data[:, 0]
                shifted = z - z.max(axis=-1, keepdims=True)
                p = np.exp(shifted)
                log_norm = np.log(p.sum(axis=-1))
                if mode == "greedy":
                    choice = np.argmax(z, axis=-1)
                elif temperature == 1.0:
                    choice = sample_rows(p, rng)
                else:
                    scaled = z / temperature
                    choice = sample_rows(np.exp(scaled - scaled.max(axis=-1, keepdims=True)), rng)
                chosen = shifted[np.arange(len(active)), choice] - log_norm
                keep = []
                for j, row in enumerate(active):
                    tok = int(choice[j]) + ACTION_OFFSET
                    seqs[row].append(tok)
                    logps[row].append(float(chosen[j]))
                    if tok != vocab.eos_id:
                        keep.append(j)
                if not keep:
                    break
                keep = np.asarray(keep)
                if len(keep) < len(active):
                    active = active[keep]
                    cache = nn.select_cache(cache, keep)
                    mem = Tensor(mem.data[keep])
                last = (choice[keep] + ACTION_OFFSET)[:, None]
        return [Generation(seqs[i], np.array(logps[i])) for i in range(B)]

    def _beam(self, memory, k, max_len) -> list[Generation]:
        vocab = self.vocab
        params = self.tensors()
        beams: list[tuple[list[int], list[float]]] = [([vocab.sos_id], [])]
        cum = np.zeros(1)
        finished: list[Generation] = []
        cache = None
        with ad.no_grad():
            for t in range(max_len - 1):
                mem = Tensor(np.repeat(memory, len(beams), axis=0))
                last = np.array([[seq[-1]] for seq, _ in beams], dtype=np.int64)
                logits, cache = nn.decode(params, self.config, last, mem, cache, start=t)
                z = logits.data[:, 0]
                logp = z - z.max(axis=-1, keepdims=True)
                logp -= np.log(np.exp(logp).sum(axis=-1, keepdims=True))
                total = (cum[:, None] + logp).ravel()
                A = logp.shape[1]
                new_beams, new_cum, rows = [], [], []
                for flat in np.argsort(-total, kind="stable")[:2 * k]:
                    b, a = divmod(int(flat), A)
                    tok = a + ACTION_OFFSET
                    seq = beams[b][0] + [tok]
                    lps = beams[b][1] + [float(logp[b, a])]
                    if tok == vocab.eos_id:
                        finished.append(Generation(seq, np.array(lps)))
                    elif len(new_beams) < k:
                        new_beams.append((seq, lps))
                        new_cum.append(total[flat])
                        rows.append(b)
                if len(finished) >= k or not new_beams:
                    break
                if t == max_len - 2:
                    # length cap reached: unfinished beams count as complete
                    finished.extend(Generation(s, np.array(l)) for s, l in new_beams)
                    break
                beams, cum = new_beams, np.array(new_cum)
                cache = nn.select_cache(cache, np.array(rows))
        ranked = sorted(finished, key=lambda g: -g.mean_logprob)
        return ranked[:k]


def pad_batch(sequences: Sequence[Sequence[int]], vocab: Vocabulary):
    """Teacher-forcing arrays: decoder inputs, targets (action ids) and mask."""
    L = max(len(s) for s in sequences)
    B = len(sequences)
    tokens = np.full((B, L - 1), vocab.pad_id, dtype=np.int64)
    targets = np.zeros((B, L - 1), dtype=np.int64)
    mask = np.zeros((B, L - 1))
    for i, s in enumerate(sequences):
        s = np.asarray(s, dtype=np.int64)
        T = len(s) - 1
        tokens[i, :T] = s[:-1]
        targets[i, :T] = s[1:] - ACTION_OFFSET
        mask[i, :T] = 1.0
    return tokens, targets, mask


def forward_logprobs(params: dict[str, Tensor], config: ModelConfig, X: np.ndarray,
                     y: np.ndarray, sequences: Sequence[Sequence[int]], vocab: Vocabulary):
    """Full next-token log-distributions for a batch of same-shaped tables.

    Returns ``(logp, targets, mask)`` where ``logp`` is a (B, T, V - 2)
    tensor carrying the graph back to ``params``.
    """
    memory = nn.encode(params, config, nn.featurize(X, y))
    tokens, targets, mask = pad_batch(sequences, vocab)
    logits, _ = nn.decode(params, config, tokens, memory)
    return ad.log_softmax(logits), targets, mask


# -- optimization ---------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay, updating a parameter dict in place.

    Parameters are rounded to float32-representable values after each step
    so that checkpoints (stored as float32) reload bit-exactly.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + lr * self.weight_decay * p
            p -= update
            p[...] = p.astype(np.float32)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def accumulate_gradients(policy: Policy, chunks: Sequence, loss_fn: Callable) -> tuple[float, dict]:
    """Sum ``loss_fn(params, chunk)`` over chunks, returning (loss, grads).

    Each chunk builds a fresh graph, so peak memory is that of one chunk.
    """
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in policy.params.items()}
    for chunk in chunks:
        params = policy.tensors(requires_grad=True)
        loss = loss_fn(params, chunk)
        loss.backward()
        total += loss.item()
        for k, t in params.items():
            if t.grad is not None:
                grads[k] += t.grad
    return total, grads


def cross_entropy_loss(params, config, vocab, triplets) -> Tensor:
    """Mean over all gold tokens of -log pi(token | state); triplets share n."""
    if len({t.X.shape for t in triplets}) != 1:
        raise ValueError("triplets in one chunk must share the table shape")
    X = np.stack([t.X for t in triplets])
    y = np.stack([t.y for t in triplets])
    logp, targets, mask = forward_logprobs(params, config, X, y, [t.tokens for t in triplets], vocab)
    picked = ad.gather(logp, targets[..., None], axis=-1)[..., 0]
    return -(picked * mask).sum() * (1.0 / mask.sum())


def group_by_shape(triplets: Sequence) -> list[list]:
    """Split a batch into chunks whose tables share (n, d)."""
    groups: dict[tuple, list] = {}
    for t in triplets:
        groups.setdefault(t.X.shape, []).append(t)
    return [groups[k] for k in sorted(groups)]


def pretrain_step(policy: Policy, optimizer: AdamW, batch: Sequence, lr: Optional[float] = None) -> float:
    """One cross-entropy update on a batch of triplets; returns the mean loss."""
    if not batch:
        raise ValueError("empty batch")
    chunks = group_by_shape(batch)
    n_tokens = sum(len(t.tokens) - 1 for t in batch)

    def loss_fn(params, chunk):
        weight = sum(len(t.tokens) - 1 for t in chunk) / n_tokens
        return cross_entropy_loss(params, policy.config, policy.vocab, chunk) * weight

    loss, grads = accumulate_gradients(policy, chunks, loss_fn)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        bad = None
        for i, t in enumerate(batch):
            with ad.no_grad():
                li = cross_entropy_loss(policy.tensors(), policy.config, policy.vocab, [t]).item()
            if not np.isfinite(li):
                bad = {"index": i, "tokens": t.tokens}
                break
        raise NonFiniteLossError("non-finite pretraining loss", bad)
    optimizer.step(grads, lr)
    return loss


# -- checkpoints ----------------------------------------------------------

def save(policy: Policy, path, meta: Optional[dict] = None) -> None:
    """Write header JSON followed by little-endian float32 parameter blocks."""
    names = sorted(policy.params)
    blocks = []
    for name in names:
        arr = policy.params[name]
        f32 = arr.astype("<f4")
        if not np.array_equal(f32.astype(np.float64), arr):
            raise ValueError(f"parameter {name} is not exactly representable in float32")
        blocks.append(f32.tobytes())
    header = {
        "format": "data2eqn-policy",
        "version": CHECKPOINT_VERSION,
        "model": policy.config.to_dict(),
        "vocab": policy.vocab.config(),
        "vocab_hash": policy.vocab.hash,
        "params": [[n, list(policy.params[n].shape)] for n in names],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blocks:
            fh.write(b)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(len(_MAGIC)) != _MAGIC:
        raise CheckpointError("not a policy checkpoint")
    size = fh.read(4)
    if len(size) != 4:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<I", size)
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw)
    except json.JSONDecodeError:
        raise CheckpointError("corrupt checkpoint header") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    return header


def load(path, vocab: Optional[Vocabulary] = None) -> Policy:
    """Read a checkpoint; ``vocab`` (if given) must match the stored hash."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        stored = Vocabulary(**header["vocab"])
        if stored.hash != header["vocab_hash"]:
            raise VocabularyMismatchError("checkpoint vocabulary hash is inconsistent")
        if vocab is not None and vocab.hash != header["vocab_hash"]:
            raise VocabularyMismatchError("checkpoint was saved against a different vocabulary")
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"truncated checkpoint: parameter {name} incomplete")
            params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last parameter block")
    return Policy(ModelConfig.from_dict(header["model"]), vocab or stored, params)


# -- pretraining loop -----------------------------------------------------

def stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent random stream derived from a global seed."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.05
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and a positive learning rate")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "PretrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown PretrainConfig keys: {sorted(unknown)}")
        return cls(**data)


def holdout_split(triplets: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """(train, held-out) lists; the same seed always holds out the same triplets."""
    n = len(triplets)
    k = int(round(fraction * n))
    perm = stream(seed, "holdout").permutation(n)
    held = set(perm[:k].tolist())
    return ([t for i, t in enumerate(triplets) if i not in held],
            [t for i, t in enumerate(triplets) if i in held])


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = stream(seed, f"pretrain/epoch{epoch}").permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain(policy: Policy, triplets: Sequence, config: PretrainConfig,
             optimizer: Optional[AdamW] = None, start_step: int = 0,
             on_step: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Cross-entropy training over ``config.epochs`` passes of ``triplets``.

    Steps are numbered globally from 1, so a run restarted with
    ``start_step`` (and the saved optimizer) continues exactly where it
    stopped. ``on_step`` receives each log record as it is produced.
    """
    optimizer = optimizer or AdamW(policy.params, lr=config.learning_rate)
    steps_per_epoch = -(-len(triplets) // config.batch_size)
    log = []
    step = 0
    for epoch in range(config.epochs):
        for batch in epoch_batches(len(triplets), config.batch_size, config.seed, epoch):
            step += 1
            if step <= start_step:
                continue
            loss = pretrain_step(policy, optimizer, [triplets[i] for i in batch])
            rec = {"step": step, "epoch": epoch + 1, "loss": loss}
            log.append(rec)
            if on_step is not None:
                on_step(rec)
    assert step == steps_per_epoch * config.epochs
    return log


def token_accuracy(policy: Policy, triplets: Sequence, batch_size: int = 64) -> float:
    """Fraction of gold tokens that are the teacher-forced argmax."""
    hits = total = 0
    for i in range(0, len(triplets), batch_size):
        for chunk in group_by_shape(triplets[i:i + batch_size]):
            X = np.stack([t.X for t in chunk])
            y = np.stack([t.y for t in chunk])
            with ad.no_grad():
                logp, targets, mask = forward_logprobs(policy.tensors(), policy.config, X, y,
                                                       [t.tokens for t in chunk], policy.vocab)
            hits += float(((logp.data.argmax(axis=-1) == targets) * mask).sum())
            total += float(mask.sum())
    return hits / total if total else float("nan")


def save_optimizer(optimizer: AdamW, path) -> None:
    state = optimizer.state_dict()
    arrays = {f"m/{k}": v for k, v in state["m"].items()}
    arrays.update({f"v/{k}": v for k, v in state["v"].items()})
    with open(path, "wb") as fh:
        np.savez(fh, t=np.array(state["t"]), **arrays)


def load_optimizer(optimizer: AdamW, path) -> None:
    with np.load(path) as data:
        optimizer.load_state_dict({"t": int(data["t"]),
                                   "m": {k: data[f"m/{k}"] for k in optimizer.params},
                                   "v": {k: data[f"v/{k}"] for k in optimizer.params}})

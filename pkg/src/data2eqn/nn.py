"""Encoder-decoder network: parameters, featurization and forward passes.

Everything here is written against :mod:`data2eqn.autodiff` tensors so that
the same forward code serves gradient-recording training passes and cached
incremental decoding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .expr import MAX_LEN, MAX_VARIABLES, Vocabulary

N_CELL_FEATURES = 4
N_FEATURES = (MAX_VARIABLES + 1) * N_CELL_FEATURES
ACTION_OFFSET = 2  # action index a <-> token id a + 2; ids 0, 1 are never emitted


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ff_mult: int = 2
    memory_slots: int = 4
    inducing_points: int = 16
    max_len: int = MAX_LEN

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if not 2 <= self.max_len <= MAX_LEN:
            raise ValueError(f"max_len must be in [2, {MAX_LEN}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**data)


def _f32(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, stored as float64."""
    return a.astype(np.float32).astype(np.float64)


def init_params(config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameters; every value is exactly representable in float32."""
    rng = np.random.default_rng(seed)
    D, F = config.width, config.width * config.ff_mult
    params: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out, scale=1.0):
        params[f"{name}.W"] = rng.normal(0.0, scale / np.sqrt(fan_in), (fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)

    def norm(name):
        params[f"{name}.g"] = np.ones(D)
        params[f"{name}.b"] = np.zeros(D)

    def attention(name):
        for p in ("q", "k", "v", "o"):
            dense(f"{name}.{p}", D, D)

    def block(name, cross: bool):
        norm(f"{name}.ln1")
        attention(f"{name}.self")
        if cross:
            norm(f"{name}.ln2")
            attention(f"{name}.cross")
        norm(f"{name}.ln3")
        dense(f"{name}.ff1", D, F)
        dense(f"{name}.ff2", F, D)

    dense("enc.in", N_FEATURES, D)
    for i in range(config.enc_layers):
        name = f"enc.{i}"
        params[f"{name}.inducing"] = rng.normal(0.0, 1.0, (config.inducing_points, D))
        norm(f"{name}.ln1")
        attention(f"{name}.pool")
        norm(f"{name}.ln2")
        attention(f"{name}.read")
        norm(f"{name}.ln3")
        dense(f"{name}.ff1", D, F)
        dense(f"{name}.ff2", F, D)
    norm("enc.ln")
    dense("enc.mem", D, config.memory_slots * D)
    norm("enc.mem_ln")

    params["dec.tok"] = rng.normal(0.0, 1.0, (len(vocab), D))
    params["dec.pos"] = rng.normal(0.0, 0.1, (config.max_len, D))
    for i in range(config.dec_layers):
        block(f"dec.{i}", cross=True)
    norm("dec.ln")
    dense("out", D, len(vocab) - ACTION_OFFSET, scale=0.1)  # near-uniform start
    return {k: _f32(v) for k, v in params.items()}


# -- featurization --------------------------------------------------------

def featurize(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-point features: (sign, mantissa, exponent, present) for every cell.

    Columns x0..x9 come first (zero-filled and marked absent beyond ``d``),
    then y. Leading dimensions of ``X``/``y`` are treated as batch axes.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = X.shape[-1]
    if d > MAX_VARIABLES:
        raise ValueError(f"at most {MAX_VARIABLES} variables are supported, got {d}")
    cells = np.zeros(X.shape[:-1] + (MAX_VARIABLES + 1,))
    cells[..., :d] = X
    cells[..., MAX_VARIABLES] = y
    present = np.zeros(MAX_VARIABLES + 1)
    present[:d] = 1.0
    present[MAX_VARIABLES] = 1.0

    mag = np.abs(cells)
    nonzero = mag > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        expo = np.where(nonzero, np.floor(np.log10(np.where(nonzero, mag, 1.0))), 0.0)
        mant = np.where(nonzero, mag / 10.0 ** expo, 0.0)
    mant = np.clip(mant, 0.0, 9.999999) / 10.0
    out = np.stack([np.sign(cells), mant, expo / 10.0,
                    np.broadcast_to(present, cells.shape)], axis=-1)
    return out.reshape(cells.shape[:-1] + (N_FEATURES,))


# -- layers ---------------------------------------------------------------

def _dense(p, name, x):
    return x @ p[f"{name}.W"] + p[f"{name}.b"]


def _norm(p, name, x):
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _heads(x: Tensor, H: int) -> Tensor:
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _attention(p, name, xq, xkv, H, mask=None, past=None, kv=None):
    """Multi-head attention. Returns (output, (k, v)) with k, v in head layout."""
    q = _heads(_dense(p, f"{name}.q", xq), H)
    if kv is None:
        k = _heads(_dense(p, f"{name}.k", xkv), H)
        v = _heads(_dense(p, f"{name}.v", xkv), H)
        if past is not None:
            k = ad.concat([past[0], k], axis=2)
            v = ad.concat([past[1], v], axis=2)
    else:
        k, v = kv
    dk = q.shape[-1]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
    att = ad.softmax(scores, axis=-1, mask=mask)
    out = (att @ v).transpose(0, 2, 1, 3)
    B, T = out.shape[0], out.shape[1]
    out = out.reshape(B, T, H * dk)
    return _dense(p, f"{name}.o", out), (k, v)


def _ff(p, name, x):
    return _dense(p, f"{name}.ff2", ad.gelu(_dense(p, f"{name}.ff1", x)))


def encode(p, config: ModelConfig, feats: np.ndarray) -> Tensor:
    """(B, n, N_FEATURES) point features -> (B, memory_slots, width) memory.

    Each block lets a small set of learned inducing vectors attend over the
    points and the points attend back to that summary, which costs O(n)
    rather than O(n^2). No positional information enters and the final
    representation is a mean over points, so the output does not depend on
    the order of the rows.
    """
    H, D, M = config.heads, config.width, config.memory_slots
    h = _dense(p, "enc.in", Tensor(feats))
    B = h.shape[0]
    zeros = np.zeros((B, config.inducing_points, D))
    for i in range(config.enc_layers):
        name = f"enc.{i}"
        x = _norm(p, f"{name}.ln1", h)
        ind = p[f"{name}.inducing"] + zeros
        summary = ind + _attention(p, f"{name}.pool", ind, x, H)[0]
        h = h + _attention(p, f"{name}.read", x, _norm(p, f"{name}.ln2", summary), H)[0]
        h = h + _ff(p, name, _norm(p, f"{name}.ln3", h))
    pooled = _norm(p, "enc.ln", h).mean(axis=1)
    mem = _dense(p, "enc.mem", pooled).reshape(B, M, D)
    return _norm(p, "enc.mem_ln", mem)


def _causal_mask(T: int) -> np.ndarray:
    mask = np.zeros((T, T))
    mask[np.triu_indices(T, k=1)] = -np.inf
    return mask


def decode(p, config: ModelConfig, tokens: np.ndarray, memory: Tensor,
           cache=None, start: int = 0):
    """Decoder pass over ``tokens`` (B, T) given encoder memory.

    With ``cache`` (from a previous call) the tokens continue an existing
    prefix starting at position ``start``. Returns the action logits
    (B, T, V - 2) and the updated cache.
    """
    H = config.heads
    B, T = tokens.shape
    if start + T > config.max_len:
        raise ValueError("decoder input longer than max_len")
    h = ad.embedding(p["dec.tok"], tokens) + p["dec.pos"][start:start + T]
    mask = _causal_mask(T) if T > 1 else None
    new_cache = []
    for i in range(config.dec_layers):
        layer = cache[i] if cache is not None else None
        x = _norm(p, f"dec.{i}.ln1", h)
        out, self_kv = _attention(p, f"dec.{i}.self", x, x, H, mask=mask,
                                  past=layer["self"] if layer else None)
        h = h + out
        x = _norm(p, f"dec.{i}.ln2", h)
        out, cross_kv = _attention(p, f"dec.{i}.cross", x, memory, H,
                                   kv=layer["cross"] if layer else None)
        h = h + out
        h = h + _ff(p, f"dec.{i}", _norm(p, f"dec.{i}.ln3", h))
        new_cache.append({"self": self_kv, "cross": cross_kv})
    logits = _dense(p, "out", _norm(p, "dec.ln", h))
    return logits, new_cache


def select_cache(cache, rows: np.ndarray):
    """Keep only the batch rows ``rows`` of a decoder cache."""
    return [{key: tuple(Tensor(t.data[rows]) for t in layer[key]) for key in layer}
            for layer in cache]

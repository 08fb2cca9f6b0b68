"""Benchmark harness: CSV datasets, 75/25 splits, best-of-k evaluation,
Gaussian target noise and report files.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .expr import MAX_LEN, MAX_VARIABLES, evaluate_tokens, to_infix
from .model import Policy
from .reel import compute_r2, stream

REPORT_VERSION = 1
SUMMARY_FIELDS = ("name", "mean_r2", "proportion_gt_099", "fit_time", "predict_time")
NOISE_LEVELS = (0.0, 0.001, 0.01, 0.1)


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    expression: Optional[str] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise DatasetError("expected X of shape (n, d) and y of shape (n,)")
        if self.X.shape[0] < 1:
            raise DatasetError("dataset has no rows")
        if self.d > MAX_VARIABLES:
            raise DatasetError(f"{self.name}: {self.d} predictors exceed the limit of {MAX_VARIABLES}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def rows(self, index) -> "Dataset":
        return Dataset(self.name, self.X[index], self.y[index], self.expression)


def load_csv(path, name: Optional[str] = None, expression: Optional[str] = None) -> Dataset:
    """Read a table with header ``x0,...,x{d-1},y``."""
    name = name or os.path.splitext(os.path.basename(str(path)))[0]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DatasetError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        d = len(header) - 1
        expected = [f"x{i}" for i in range(d)] + ["y"]
        if d < 1 or header != expected:
            raise DatasetError(f"{path}: header must be x0,...,x{{d-1}},y; got {','.join(header)}")
        if d > MAX_VARIABLES:
            raise DatasetError(f"{path}: {d} predictors exceed the limit of {MAX_VARIABLES}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 1:
                raise DatasetError(f"{path}: row {lineno} has {len(row)} cells, expected {d + 1}")
            values = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise DatasetError(f"{path}: row {lineno}, column {col}: "
                                       f"{cell.strip()!r} is not a finite number")
                values.append(v)
            rows.append(values)
    if len(rows) < 4:
        raise DatasetError(f"{path}: need at least 4 rows, found {len(rows)}")
    table = np.array(rows)
    return Dataset(name, table[:, :d], table[:, d], expression)


def split(dataset: Dataset, train_fraction: float = 0.75, seed: int = 0):
    """Random disjoint train/test partition with round-half-up train size."""
    n = dataset.n
    if n < 4:
        raise DatasetError(f"{dataset.name}: need at least 4 rows to split, found {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = min(max(int(math.floor(train_fraction * n + 0.5)), 1), n - 1)
    perm = stream(seed, f"split/{dataset.name}").permutation(n)
    return dataset.rows(np.sort(perm[:n_train])), dataset.rows(np.sort(perm[n_train:]))


def inject_noise(y, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """y + sigma * std(y) * standard normal noise; identity when the scale is 0."""
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    scale = sigma * float(np.std(y))
    if scale == 0.0:
        return y.copy()
    return y + scale * rng.standard_normal(y.shape)


# -- evaluation -----------------------------------------------------------

@dataclass
class EquationRecord:
    name: str
    test_r2: float
    train_r2: float
    tokens: list[int]
    equation: Optional[str]
    n_valid: int
    n_candidates: int
    fit_time: float = 0.0
    predict_time: float = 0.0


@dataclass
class Metrics:
    records: list[EquationRecord] = field(default_factory=list)

    @property
    def mean_r2(self) -> float:
        return float(np.mean([r.test_r2 for r in self.records]))

    @property
    def proportion_gt_099(self) -> float:
        return sum(r.test_r2 > 0.99 for r in self.records) / len(self.records)

    @property
    def fit_time(self) -> float:
        return float(sum(r.fit_time for r in self.records))

    @property
    def predict_time(self) -> float:
        return float(sum(r.predict_time for r in self.records))


def encoder_rows(train: Dataset, seed: int) -> Dataset:
    """At most 200 rows of the training split for conditioning the encoder."""
    if train.n <= MAX_LEN:
        return train
    idx = np.sort(stream(seed, f"encoder/{train.name}").choice(train.n, MAX_LEN, replace=False))
    return train.rows(idx)


def candidates(policy: Policy, data: Dataset, decode_mode: str, k: int,
               rng: np.random.Generator) -> list[list[int]]:
    memory = policy.encode(data.X, data.y)
    if decode_mode == "greedy":
        return [policy.generate(memory, "greedy")[0].tokens]
    if decode_mode == "sample":
        return [g.tokens for g in policy.generate(np.repeat(memory[None], k, axis=0), "sample", rng=rng)]
    if decode_mode == "beam":
        return [g.tokens for g in policy.generate(memory, "beam", beam_size=k)[0]]
    raise ValueError(f"unknown decode mode {decode_mode!r}")


def select_candidate(policy: Policy, cands: Sequence[Sequence[int]], train: Dataset):
    """Index and training R^2 of the best candidate, or (None, -1) if all fail.

    Only training rows are consulted; ties keep the earliest candidate.
    """
    best, best_r2, n_valid = None, -math.inf, 0
    for i, tokens in enumerate(cands):
        _, result = evaluate_tokens(tokens, train.X, policy.vocab, policy.config.max_len)
        if not result.valid:
            continue
        n_valid += 1
        r2 = compute_r2(train.y, result)
        if best is None or r2 > best_r2:
            best, best_r2 = i, r2
    return best, (best_r2 if best is not None else -1.0), n_valid


def evaluate_dataset(policy: Policy, dataset: Dataset, decode_mode: str = "sample",
                     samples_per_eq: int = 16, seed: int = 0, noise_train: float = 0.0,
                     noise_test: float = 0.0, adapt: Optional[Callable] = None,
                     timing: bool = False) -> EquationRecord:
    """Split, optionally adapt on the training rows, generate, select, score."""
    train, test = split(dataset, seed=seed)
    if noise_train:
        train = Dataset(train.name, train.X,
                        inject_noise(train.y, noise_train, stream(seed, f"noise-train/{dataset.name}")))
    if noise_test:
        test = Dataset(test.name, test.X,
                       inject_noise(test.y, noise_test, stream(seed, f"noise-test/{dataset.name}")))
    clock = time.perf_counter if timing else (lambda: 0.0)
    t0 = clock()
    if adapt is not None:
        policy = adapt(policy, train)
    t1 = clock()
    rng = stream(seed, f"candidates/{dataset.name}")
    cands = candidates(policy, encoder_rows(train, seed), decode_mode, samples_per_eq, rng)
    best, train_r2, n_valid = select_candidate(policy, cands, train)
    if best is None:
        test_r2, tokens, equation = -1.0, [], None
    else:
        tokens = list(cands[best])
        expr, result = evaluate_tokens(tokens, test.X, policy.vocab, policy.config.max_len)
        test_r2 = compute_r2(test.y, result)
        equation = to_infix(expr) if expr is not None else None
    t2 = clock()
    return EquationRecord(dataset.name, float(test_r2), float(train_r2), tokens, equation,
                          n_valid, len(cands), t1 - t0, t2 - t1)


def evaluate_model(policy: Policy, datasets: Iterable[Dataset], decode_mode: str = "sample",
                   samples_per_eq: int = 16, seed: int = 0, **kwargs) -> Metrics:
    """Evaluate every dataset (sorted by name) and aggregate the records.

    Extra keyword arguments go to :func:`evaluate_dataset`.
    """
    datasets = sorted(datasets, key=lambda ds: ds.name)
    if not datasets:
        raise ValueError("no datasets to evaluate")
    return Metrics([evaluate_dataset(policy, ds, decode_mode, samples_per_eq, seed, **kwargs)
                    for ds in datasets])


def noise_sweep(policy: Policy, datasets: Sequence[Dataset], levels: Sequence[float] = NOISE_LEVELS,
                prefix: str = "noise", **kwargs) -> list[tuple[str, Metrics]]:
    """One evaluation per noise level, applied to the training targets."""
    return [(f"{prefix}={level:g}", evaluate_model(policy, datasets, noise_train=level, **kwargs))
            for level in levels]


# -- reports --------------------------------------------------------------

def _json_float(x: float):
    return x if math.isfinite(x) else ("-inf" if x < 0 else "inf" if x > 0 else "nan")


def _run_record(name: str, metrics: Metrics) -> dict:
    return {
        "name": name,
        "mean_r2": _json_float(metrics.mean_r2),
        "proportion_gt_099": metrics.proportion_gt_099,
        "fit_time": metrics.fit_time,
        "predict_time": metrics.predict_time,
        "equations": [{**asdict(r), "test_r2": _json_float(r.test_r2),
                       "train_r2": _json_float(r.train_r2)} for r in metrics.records],
    }


def emit_report(runs: Sequence[tuple[str, Metrics]], directory, merge: bool = True) -> tuple[str, str]:
    """Write ``report.json`` and ``summary.csv`` into ``directory``.

    With ``merge``, runs already present in an existing report are kept and
    runs of the same name are replaced. Returns the two file paths.
    """
    runs = list(runs)
    if not runs or any(not m.records for _, m in runs):
        raise ValueError("refusing to write a report without evaluated equations")
    os.makedirs(directory, exist_ok=True)
    report_path = os.path.join(directory, "report.json")
    summary_path = os.path.join(directory, "summary.csv")
    records = []
    if merge and os.path.exists(report_path):
        with open(report_path, encoding="utf-8") as fh:
            records = json.load(fh).get("runs", [])
    new = [_run_record(name, m) for name, m in runs]
    names = {r["name"] for r in new}
    records = [r for r in records if r["name"] not in names] + new

    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump({"version": REPORT_VERSION, "runs": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_FIELDS)
        for r in records:
            writer.writerow([r["name"]] + [_fmt(r[k]) for k in SUMMARY_FIELDS[1:]])
    return report_path, summary_path


def _fmt(x) -> str:
    return x if isinstance(x, str) else f"{x:.6f}"


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

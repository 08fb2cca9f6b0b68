"""Twenty small held-out equations (d <= 3) for end-to-end finetuning checks."""

from __future__ import annotations

import json
import os
from typing import Optional, Sequence

from . import model as mdl
from .bench import Dataset, emit_report, evaluate_model
from .datagen import GenConfig, generate_corpus, write_corpus
from .expr import evaluate, from_prefix, variables
from .model import stream
from .nn import ModelConfig
from .reel import FinetuneConfig, epoch_means, run_reel

TOY_EQUATIONS = (
    "add x0 x1",
    "mul x0 x1",
    "sub x0 x1",
    "pow x0 2",
    "sin x0",
    "cos x0",
    "exp x0",
    "add x0 1",
    "mul 2 x0",
    "add mul x0 x0 x1",
    "add sin x0 x1",
    "mul x0 cos x1",
    "abs x0",
    "sub x1 x0",
    "add x0 add x1 x2",
    "mul x0 add x1 x2",
    "sub exp x0 x1",
    "add pow x0 2 pow x1 2",
    "sin mul x0 x1",
    "add mul 3 x0 x2",
)


def toy_dataset(text: str, index: int, n: int = 400, seed: int = 0) -> Dataset:
    """Standard-normal inputs (d = highest variable used + 1) and exact targets."""
    f = from_prefix(text)
    d = max(variables(f)) + 1
    X = stream(seed, f"toy/{index}").standard_normal((n, d))
    result = evaluate(f, X)
    if not result.valid:
        raise ValueError(f"toy equation {text!r} is invalid on its inputs")
    return Dataset(f"toy{index:02d}", X, result.values, text)


def toy_datasets(n: int = 400, seed: int = 0) -> list[Dataset]:
    return [toy_dataset(t, i, n, seed) for i, t in enumerate(TOY_EQUATIONS)]


def trend_experiment(workdir, seed: int = 0, n_triplets: int = 5000, pretrain_epochs: Optional[int] = None,
                     finetune: Optional[FinetuneConfig] = None, samples_per_eq: int = 16,
                     equations: Optional[Sequence[int]] = None, verbose: bool = False) -> dict:
    """Corpus -> pretraining -> per-equation finetuning on the toy set.

    Every artifact (corpus, checkpoints, logs, report) is written under
    ``workdir``. Returns per-equation first/last epoch mean rewards and
    test R^2 before and after finetuning.
    """
    os.makedirs(os.path.join(workdir, "reel"), exist_ok=True)
    gen = GenConfig(n_triplets=n_triplets, dim_range=(1, 3), max_depth=4, seed=seed)
    triplets, rejected = generate_corpus(gen)
    write_corpus(triplets, os.path.join(workdir, "corpus.jsonl"), gen, rejected)

    pre_cfg = mdl.PretrainConfig(seed=seed) if pretrain_epochs is None else \
        mdl.PretrainConfig(epochs=pretrain_epochs, seed=seed)
    policy = mdl.Policy(ModelConfig(), seed=seed)
    train, _ = mdl.holdout_split(triplets, pre_cfg.holdout_fraction, seed)
    with open(os.path.join(workdir, "pretrain.log.jsonl"), "w", encoding="utf-8") as fh:
        mdl.pretrain(policy, train, pre_cfg,
                     on_step=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"))
    mdl.save(policy, os.path.join(workdir, "pretrained.ckpt"), {"pretrain": pre_cfg.to_dict()})

    ft = finetune or FinetuneConfig(seed=seed)
    datasets = toy_datasets(seed=seed)
    if equations is not None:
        datasets = [datasets[i] for i in equations]
    logs: dict[str, list[dict]] = {}

    def adapt(pol, train_split):
        base = os.path.join(workdir, "reel", train_split.name)
        result = run_reel(pol, train_split.X, train_split.y, ft, log_path=base + ".log.jsonl")
        mdl.save(result.policy, base + ".ckpt", {"finetune": ft.to_dict(), "dataset": train_split.name})
        logs[train_split.name] = result.log
        if verbose:
            means = epoch_means(result.log)
            print(f"{train_split.name}: reward {means[min(means)]:.4f} -> {means[max(means)]:.4f}",
                  flush=True)
        return result.policy

    before = evaluate_model(policy, datasets, "sample", samples_per_eq, seed)
    after = evaluate_model(policy, datasets, "sample", samples_per_eq, seed, adapt=adapt)
    emit_report([("pretrained", before), ("finetuned", after)], os.path.join(workdir, "report"),
                merge=False)

    rows = {}
    for b, a in zip(before.records, after.records):
        means = epoch_means(logs[b.name])
        rows[b.name] = {"equation": next(ds.expression for ds in datasets if ds.name == b.name),
                        "first_epoch_reward": means[min(means)],
                        "last_epoch_reward": means[max(means)],
                        "test_r2_before": b.test_r2, "test_r2_after": a.test_r2}
    return {"equations": rows, "mean_test_r2_before": before.mean_r2,
            "mean_test_r2_after": after.mean_r2, "corpus_rejected": rejected}

"""Command-line pipeline: gen-data, pretrain, finetune, eval.

Every subcommand takes an optional JSON ``--config`` whose sections mirror
the module configuration types; explicit flags win over the file. The fully
resolved configuration is written next to the outputs as
``resolved_config.json`` and can be fed back through ``--config``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Optional

from . import bench, datagen, reel
from . import model as mdl
from .expr import DEFAULT_VOCAB
from .nn import ModelConfig

SECTIONS = {"gen": datagen.GenConfig, "model": ModelConfig, "pretrain": mdl.PretrainConfig,
            "finetune": reel.FinetuneConfig}
TOP_LEVEL = {"command", "seed", "paths", "eval", *SECTIONS}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class EvalConfig:
    decode: str = "sample"
    k: int = 16
    name: Optional[str] = None
    noise_train: tuple = (0.0,)
    noise_test: float = 0.0
    finetune: bool = False
    timing: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.decode not in ("greedy", "sample", "beam"):
            raise ValueError("decode must be greedy, sample or beam")
        if self.k < 1:
            raise ValueError("k must be positive")
        levels = self.noise_train
        object.__setattr__(self, "noise_train",
                           tuple(float(v) for v in (levels if isinstance(levels, (list, tuple)) else [levels])))
        if any(v < 0 for v in self.noise_train) or self.noise_test < 0:
            raise ValueError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_train"] = list(self.noise_train)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown EvalConfig keys: {sorted(unknown)}")
        return cls(**data)


SECTIONS_ALL = {**SECTIONS, "eval": EvalConfig}


# -- configuration --------------------------------------------------------

def read_config(path: Optional[str], command: str) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(data) - TOP_LEVEL
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if data.get("command", command) != command:
        raise UsageError(f"config was resolved for '{data['command']}', not '{command}'")
    return data


def resolve(section: str, file_cfg: dict, overrides: dict, seed: Optional[int]):
    """defaults < config file section < top-level seed < flags."""
    cls = SECTIONS_ALL[section]
    values = dict(file_cfg.get(section, {}))
    if not isinstance(values, dict):
        raise UsageError(f"config section '{section}' must be an object")
    names = {f.name for f in fields(cls)}
    if "seed" in names and seed is not None:
        values["seed"] = seed
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid '{section}' configuration: {exc}") from None


def global_seed(args, file_cfg: dict) -> Optional[int]:
    return args.seed if args.seed is not None else file_cfg.get("seed")


def path_arg(args, file_cfg: dict, name: str, required: bool = True):
    value = getattr(args, name, None)
    if value is None:
        value = file_cfg.get("paths", {}).get(name)
    if value is None and required:
        raise UsageError(f"missing required path --{name}")
    return value


def write_resolved(directory: str, command: str, seed, sections: dict, paths: dict) -> None:
    out = {"command": command, "seed": seed, "paths": paths}
    out.update({name: cfg.to_dict() for name, cfg in sections.items()})
    os.makedirs(directory or ".", exist_ok=True)
    with open(os.path.join(directory or ".", "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


def thread_cap(requested: Optional[int] = None) -> int:
    """Worker count, capped by the REEL_THREADS environment variable."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("REEL_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"REEL_THREADS must be an integer, got {cap!r}") from None
    return n


def load_policy(path: str) -> mdl.Policy:
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return mdl.load(path, DEFAULT_VOCAB)
    except mdl.CheckpointError as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def load_dataset(path: str) -> bench.Dataset:
    try:
        return bench.load_csv(path)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc.strerror}") from None
    except bench.DatasetError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands ----------------------------------------------------------

def cmd_gen_data(args) -> int:
    file_cfg = read_config(args.config, "gen-data")
    seed = global_seed(args, file_cfg)
    dims = None
    if args.min_dim is not None or args.max_dim is not None:
        base = file_cfg.get("gen", {}).get("dim_range", datagen.GenConfig().dim_range)
        dims = [args.min_dim if args.min_dim is not None else base[0],
                args.max_dim if args.max_dim is not None else base[1]]
    gen = resolve("gen", file_cfg, {"n_triplets": args.n, "dim_range": dims,
                                    "max_depth": args.max_depth,
                                    "points_per_triplet": args.points}, seed)
    out = path_arg(args, file_cfg, "out")
    triplets, rejected = datagen.generate_corpus(gen, DEFAULT_VOCAB, thread_cap(args.workers))
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    datagen.write_corpus(triplets, out, gen, rejected, DEFAULT_VOCAB)
    write_resolved(os.path.dirname(out), "gen-data", gen.seed, {"gen": gen}, {"out": out})
    print(f"wrote {len(triplets)} triplets to {out} ({rejected} rejected draws)")
    return 0


def cmd_pretrain(args) -> int:
    file_cfg = read_config(args.config, "pretrain")
    seed = global_seed(args, file_cfg)
    model_cfg = resolve("model", file_cfg, {"width": args.width, "enc_layers": args.enc_layers,
                                            "dec_layers": args.dec_layers, "heads": args.heads}, None)
    cfg = resolve("pretrain", file_cfg, {"epochs": args.epochs, "batch_size": args.batch_size,
                                         "learning_rate": args.lr, "holdout_fraction": args.holdout,
                                         "checkpoint_every": args.checkpoint_every}, seed)
    data = path_arg(args, file_cfg, "data")
    out = path_arg(args, file_cfg, "out")
    resume = path_arg(args, file_cfg, "resume", required=False)
    try:
        manifest, triplets = datagen.read_corpus(data, DEFAULT_VOCAB)
    except OSError as exc:
        raise UsageError(f"cannot read corpus {data}: {exc.strerror}") from None
    except datagen.CorpusFormatError as exc:
        raise UsageError(f"bad corpus {data}: {exc}") from None
    if manifest.get("vocab_hash") != DEFAULT_VOCAB.hash:
        raise UsageError("corpus was written with a different vocabulary")
    train, held = mdl.holdout_split(triplets, cfg.holdout_fraction, cfg.seed)
    if not train:
        raise UsageError("corpus has no training triplets")

    log_path = out + ".log.jsonl"
    start = 0
    if resume:
        policy = load_policy(resume)
        if policy.config != model_cfg:
            raise UsageError("resumed checkpoint has a different model configuration")
        start = int(mdl.read_header(resume)["meta"].get("step", 0))
        optimizer = mdl.AdamW(policy.params, lr=cfg.learning_rate)
        opt_path = resume + ".opt.npz"
        if start:
            if not os.path.exists(opt_path):
                raise UsageError(f"optimizer state {opt_path} missing; cannot resume")
            mdl.load_optimizer(optimizer, opt_path)
        _truncate_log(log_path, start, source=resume + ".log.jsonl")
    else:
        policy = mdl.Policy(model_cfg, DEFAULT_VOCAB, seed=cfg.seed)
        optimizer = mdl.AdamW(policy.params, lr=cfg.learning_rate)
        _truncate_log(log_path, 0)
    write_resolved(os.path.dirname(out), "pretrain", cfg.seed, {"model": model_cfg, "pretrain": cfg},
                   {"data": data, "out": out, "resume": resume})

    def checkpoint(step: int) -> None:
        mdl.save(policy, out, {"step": step, "pretrain": cfg.to_dict()})
        mdl.save_optimizer(optimizer, out + ".opt.npz")

    class Stop(Exception):
        pass

    with open(log_path, "a", encoding="utf-8") as log:
        def on_step(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            if cfg.checkpoint_every and rec["step"] % cfg.checkpoint_every == 0:
                checkpoint(rec["step"])
            if args.max_steps is not None and rec["step"] >= args.max_steps:
                raise Stop(rec["step"])

        try:
            mdl.pretrain(policy, train, cfg, optimizer, start, on_step)
            step = -(-len(train) // cfg.batch_size) * cfg.epochs
        except Stop as stop:
            step = stop.args[0]
    checkpoint(max(step, start))
    if held:
        print(f"held-out token accuracy: {mdl.token_accuracy(policy, held):.6f}")
    print(f"saved {out} at step {max(step, start)}")
    return 0


def _truncate_log(path: str, step: int, source: Optional[str] = None) -> None:
    """Keep only records up to ``step`` so resumed numbering continues cleanly."""
    lines = []
    src = source if source and os.path.exists(source) else path
    if step and os.path.exists(src):
        with open(src, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip() and json.loads(ln)["step"] <= step]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def _finetune_overrides(args) -> dict:
    return {"epochs": args.epochs, "n_subsets": args.subsets, "subset_size": args.subset_size,
            "batch_size": args.batch_size, "learning_rate": args.lr,
            "kl_coefficient": args.beta, "clip_epsilon": args.epsilon,
            "decode_mode": args.rollout_decode, "temperature": args.temperature,
            "refresh_old_every": args.refresh_old_every}


def cmd_finetune(args) -> int:
    file_cfg = read_config(args.config, "finetune")
    seed = global_seed(args, file_cfg)
    cfg = resolve("finetune", file_cfg, _finetune_overrides(args), seed)
    model_path = path_arg(args, file_cfg, "model")
    data = path_arg(args, file_cfg, "data")
    out = path_arg(args, file_cfg, "out")
    noise = args.noise_train if args.noise_train is not None else \
        file_cfg.get("paths", {}).get("noise_train", 0.0)
    policy = load_policy(model_path)
    dataset = load_dataset(data)
    y = dataset.y
    if noise:
        y = bench.inject_noise(y, noise, mdl.stream(cfg.seed, f"noise-train/{dataset.name}"))
    log_path = args.log or out + ".log.jsonl"
    write_resolved(os.path.dirname(out), "finetune", cfg.seed, {"finetune": cfg},
                   {"model": model_path, "data": data, "out": out, "noise_train": noise})
    result = reel.run_reel(policy, dataset.X, y, cfg, log_path=log_path, checkpoint_path=out)
    mdl.save(result.policy, out, {"finetune": cfg.to_dict(), "dataset": dataset.name})
    means = reel.epoch_means(result.log)
    if means:
        first, last = means[min(means)], means[max(means)]
        print(f"mean reward: first epoch {first:.6f}, last epoch {last:.6f}")
    print(f"saved {out}")
    return 0


def _gather_csvs(paths) -> list[str]:
    files = []
    for p in paths:
        if os.path.isdir(p):
            files.extend(sorted(glob.glob(os.path.join(p, "*.csv"))))
        else:
            files.append(p)
    return files


def cmd_eval(args) -> int:
    file_cfg = read_config(args.config, "eval")
    seed = global_seed(args, file_cfg)
    cfg = resolve("eval", file_cfg, {"decode": args.decode, "k": args.k, "name": args.name,
                                     "noise_train": args.noise_train, "noise_test": args.noise_test,
                                     "finetune": args.finetune or None,
                                     "timing": args.timing or None}, seed)
    ft = resolve("finetune", file_cfg, _finetune_overrides(args), cfg.seed) if cfg.finetune else None
    model_path = path_arg(args, file_cfg, "model")
    out = path_arg(args, file_cfg, "out")
    data = args.data or file_cfg.get("paths", {}).get("data")
    if not data:
        raise UsageError("missing required path --data")
    data = [data] if isinstance(data, str) else list(data)
    policy = load_policy(model_path)

    datasets, failed = [], []
    for path in _gather_csvs(data):
        try:
            datasets.append(load_dataset(path))
        except UsageError as exc:
            failed.append(path)
            print(f"error: {exc}", file=sys.stderr)
    if not datasets:
        raise UsageError("no dataset could be loaded")

    adapt = None
    if ft is not None:
        def adapt(pol, train):
            return reel.run_reel(pol, train.X, train.y, ft).policy
    base = cfg.name or (cfg.decode if cfg.decode == "greedy" else f"{cfg.decode}-k{cfg.k}")
    runs = []
    for level in cfg.noise_train:
        name = base if len(cfg.noise_train) == 1 and level == 0 else f"{base}/noise={level:g}"
        metrics = bench.evaluate_model(policy, datasets, cfg.decode, cfg.k, cfg.seed,
                                       noise_train=level, noise_test=cfg.noise_test,
                                       adapt=adapt, timing=cfg.timing)
        runs.append((name, metrics))
        print(f"{name}: mean R2 {metrics.mean_r2:.6f}, R2>0.99 {metrics.proportion_gt_099:.6f}")
    sections = {"eval": cfg} if ft is None else {"eval": cfg, "finetune": ft}
    write_resolved(out, "eval", cfg.seed, sections, {"model": model_path, "data": data, "out": out})
    bench.emit_report(runs, out)
    return 1 if failed else 0


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="data2eqn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="global seed")

    p = sub.add_parser("gen-data", help="generate a synthetic pretraining corpus")
    common(p)
    p.add_argument("--out", help="corpus file to write")
    p.add_argument("--n", type=int, help="number of triplets")
    p.add_argument("--min-dim", type=int)
    p.add_argument("--max-dim", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--points", type=int, help="rows per triplet")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="cross-entropy pretraining on a corpus")
    common(p)
    p.add_argument("--data", help="corpus file")
    p.add_argument("--out", help="checkpoint to write")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--holdout", type=float, help="held-out fraction for token accuracy")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--max-steps", type=int, help="stop after this global step")
    p.add_argument("--width", type=int)
    p.add_argument("--enc-layers", type=int)
    p.add_argument("--dec-layers", type=int)
    p.add_argument("--heads", type=int)
    p.set_defaults(func=cmd_pretrain)

    def finetune_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--subsets", type=int, help="number of bootstrap subsets N")
        p.add_argument("--subset-size", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--beta", type=float, help="KL coefficient")
        p.add_argument("--epsilon", type=float, help="clip range")
        p.add_argument("--rollout-decode", choices=("sample", "beam"))
        p.add_argument("--temperature", type=float)
        p.add_argument("--refresh-old-every", type=int)

    p = sub.add_parser("finetune", help="reinforcement finetuning on one dataset")
    common(p)
    p.add_argument("--model", help="pretrained checkpoint")
    p.add_argument("--data", help="CSV dataset")
    p.add_argument("--out", help="checkpoint to write")
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    p.add_argument("--noise-train", type=float, help="noise level applied to y")
    finetune_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on CSV datasets")
    common(p)
    p.add_argument("--model", help="checkpoint")
    p.add_argument("--data", nargs="+", help="CSV files or directories")
    p.add_argument("--out", help="report directory")
    p.add_argument("--decode", choices=("greedy", "sample", "beam"))
    p.add_argument("--k", type=int, help="candidates per equation")
    p.add_argument("--name", help="run name in the summary")
    p.add_argument("--noise-train", type=float, nargs="+", help="one or more noise levels")
    p.add_argument("--noise-test", type=float)
    p.add_argument("--finetune", action="store_true", help="finetune on each training split first")
    p.add_argument("--timing", action="store_true", help="record wall-clock times")
    finetune_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

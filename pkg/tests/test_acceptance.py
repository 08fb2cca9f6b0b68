"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with its runtime.
Criteria 7 and 9 pretrain the default model and finetune it on 20 toy
equations twice; together they take the better part of an hour on one core.
"""

import filecmp
import math
import os
import time

import numpy as np
import pytest

from data2eqn import autodiff as ad
from data2eqn import cli, datagen, nn, reel
from data2eqn import model as mdl
from data2eqn.autodiff import Tensor
from data2eqn.expr import DEFAULT_VOCAB, LengthOverflowError, ParseError, parse, tokenize
from data2eqn.nn import ModelConfig
from data2eqn.reel import FinetuneConfig, clipped_loss, compute_r2, importance_ratio, kl_loss, smooth_reward
from data2eqn.toys import toy_dataset, trend_experiment

from _helpers import gradient_check
from conftest import TINY_CONFIG, TINY_VOCAB
from test_cli import SMALL_MODEL, write_dataset
from test_reel import brute_r2


def test_criterion_1_reward_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(1, 40))
        y = rng.standard_normal(n) * 10 ** rng.uniform(-4, 4)
        kind = i % 6
        if kind == 0:
            yp = y.copy()
        elif kind == 1:
            yp = np.full(n, np.mean(y))
        elif kind == 2:
            y = np.full(n, y[0])
            yp = y + rng.choice([0.0, 1e-12, 1.0], size=n)
        elif kind == 3:
            yp = -y
        else:
            yp = y + rng.standard_normal(n) * 10 ** rng.uniform(-4, 2)
        ref = brute_r2(y.tolist(), yp.tolist())
        worst = max(worst, abs(compute_r2(y, yp) - ref) / max(1.0, abs(ref)))
    xs = np.concatenate([np.linspace(-1e6, 1e6, 20001), np.logspace(-8, 6, 2000)])
    odd = float(np.max(np.abs(smooth_reward(xs) + smooth_reward(-xs))))
    both = smooth_reward(np.concatenate([xs, -xs]))
    bounded = bool(np.all((both > -1) & (both < 1)))
    ok = (worst <= 1e-10 and smooth_reward(0.0) == 0.0 and abs(smooth_reward(1.0) - 0.462117) <= 1e-6
          and odd < 1e-12 and bounded and time.perf_counter() - t0 < 1.0)
    criterion(1, ok, f"max R2 deviation {worst:.1e}, oddness {odd:.1e}")


def test_criterion_2_loss_kernels(criterion):
    t0 = time.perf_counter()
    # exact closed forms at 1e-9; the six-decimal display values at their own rounding
    rho = importance_ratio([0.2, 0.4], [0.0, 0.0])
    kl = kl_loss([[0.75, 0.25]], [[0.5, 0.5]])
    errs = [abs(rho - math.exp(0.3)),
            abs(clipped_loss(rho, 0.5, 0.2) + 0.6),
            abs(clipped_loss(0.5, -0.4, 0.2) - 0.32),
            abs(kl - (0.75 * math.log(1.5) + 0.25 * math.log(0.5)))]
    displayed = abs(rho - 1.349859) <= 5e-7 and abs(kl - 0.130812) <= 5e-7
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.full(6, 0.3), size=10_000)
    q = rng.dirichlet(np.full(6, 0.3), size=10_000)
    kls = [kl_loss(p[i:i + 1], q[i:i + 1]) for i in range(10_000)]
    ok = max(errs) <= 1e-9 and displayed and min(kls) >= 0.0 and time.perf_counter() - t0 < 1.0
    criterion(2, ok, f"max example error {max(errs):.1e}, min KL {min(kls):.1e}")


def test_criterion_3_gradients(criterion):
    policy = mdl.Policy(TINY_CONFIG, TINY_VOCAB, seed=7)
    assert policy.config.width == 8 and policy.config.enc_layers == policy.config.dec_layers == 2
    rng = np.random.default_rng(3)
    X = rng.standard_normal((3, 6, 3))
    y = X[..., 0] * X[..., 1] - X[..., 2]
    seqs = [[1, 11, 16, 17, 2], [1, 13, 16, 19, 23, 2], [1, 3, 18, 2]]
    assert max(len(s) for s in seqs) <= 6

    def ce(p):
        logp, targets, mask = mdl.forward_logprobs(p, policy.config, X, y, seqs, TINY_VOCAB)
        picked = ad.gather(logp, targets[..., None], axis=-1)[..., 0]
        return -(picked * mask).sum() * (1.0 / mask.sum())

    old = policy.copy()
    for v in old.params.values():
        v += 0.02 * rng.standard_normal(v.shape)
    feats, old_mem = nn.featurize(X, y), old.encode_batch(X, y)
    rewards = np.array([0.3, -0.5, 0.1])

    def total(p):
        mem = nn.encode(p, policy.config, feats)
        return reel.reel_objective(p, old.tensors(), policy.config, mem, old_mem, seqs, rewards,
                                   0.2, 0.2, TINY_VOCAB)[0]

    err_ce = gradient_check(policy.params, ce)
    err_reel = gradient_check(policy.params, total)
    criterion(3, err_ce < 1e-4 and err_reel < 1e-4,
              f"max rel error: cross-entropy {err_ce:.1e}, objective {err_reel:.1e}")


def test_criterion_4_identity_start(criterion):
    policy = mdl.Policy(ModelConfig(width=32, heads=4), DEFAULT_VOCAB, seed=2)
    rng = np.random.default_rng(4)
    X = rng.standard_normal((300, 2))
    y = X[:, 0] + X[:, 1]
    cfg = FinetuneConfig(max_len=24)
    subsets = reel.sample_subsets(X, y, cfg)[:cfg.batch_size]
    new = policy.copy()
    diag = reel.finetune_step(new, policy, mdl.AdamW(new.params, lr=cfg.learning_rate), subsets,
                              cfg, np.random.default_rng(0))
    rho_dev = max(abs(r.rho - 1.0) for r in diag.rollouts)
    kl = max(r.kl for r in diag.rollouts)
    gap = abs(diag.loss + diag.mean_reward)
    criterion(4, rho_dev <= 1e-6 and kl <= 1e-6 and gap <= 1e-6 and len(diag.rollouts) == 64,
              f"max |rho-1| {rho_dev:.1e}, max KL {kl:.1e}, |loss + mean reward| {gap:.1e}")


def test_criterion_5_clip_dead_zone(criterion):
    policy = mdl.Policy(TINY_CONFIG, TINY_VOCAB, seed=5)
    rng = np.random.default_rng(5)
    X = rng.standard_normal((3, 5, 3))
    y = X[..., 0] - X[..., 2]
    seqs = [[1, 11, 16, 17, 2], [1, 13, 16, 2], [1, 3, 18, 2]]
    leaks, rhos = [], []
    for shift, reward in ((3.0, 0.5), (-3.0, -0.5)):
        new = policy.copy()
        new.params["out.b"][[t - 2 for s in seqs for t in s[1:]]] += shift
        params = new.tensors(requires_grad=True)
        mem = nn.encode(params, new.config, nn.featurize(X, y))
        loss, rho, _ = reel.reel_objective(params, policy.tensors(), new.config, mem,
                                           policy.encode_batch(X, y), seqs, np.full(3, reward),
                                           0.2, 0.0, TINY_VOCAB)
        loss.backward()
        rhos.append(rho)
        leaks.append(max(float(np.abs(t.grad).max()) if t.grad is not None else 0.0
                         for t in params.values()))
    ok = np.all(rhos[0] > 1.2) and np.all(rhos[1] < 0.8) and max(leaks) == 0.0
    criterion(5, ok, f"max |grad| in dead zone {max(leaks):.1e}")


def test_criterion_6_roundtrip_and_totality(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    gen = datagen.GenConfig(max_depth=6, dim_range=(1, 10))
    mismatches = 0
    for _ in range(10_000):
        e = datagen.sample_expression(gen, rng)
        mismatches += parse(tokenize(e)) != e
    V = len(DEFAULT_VOCAB)
    structural = np.arange(DEFAULT_VOCAB.mantissa_start)  # control, operator and variable ids
    crashes = parsed = tagged = 0
    for i in range(100_000):
        n = int(rng.integers(1, 201))
        kind = i % 3
        if kind == 0:
            seq = rng.integers(0, V, n)
        elif kind == 1:
            seq = rng.choice(structural, n)
            seq[0] = DEFAULT_VOCAB.sos_id
        else:  # a well-formed sequence with a few random edits, so deep parses get exercised
            seq = np.array(tokenize(datagen.sample_expression(gen, rng))[:200])
            k = int(rng.integers(0, 3))
            seq[rng.integers(0, len(seq), k)] = rng.integers(0, V, k)
        try:
            parse(seq.tolist())
            parsed += 1
        except (ParseError, LengthOverflowError) as exc:
            tagged += bool(str(exc))
        except Exception:  # noqa: BLE001 - anything else is a crash
            crashes += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and crashes == 0 and parsed + tagged == 100_000 and elapsed < 60
    criterion(6, ok, f"{mismatches} roundtrip mismatches, {crashes} crashes, {parsed} parsed")


def test_criterion_8_noise_protocol(criterion, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    y = rng.standard_normal(10_000) * 2.5 + 4.0
    ratios = []
    for sigma in (0.001, 0.01, 0.1):
        noisy = reel_inject(y, sigma, np.random.default_rng(int(sigma * 1e4)))
        ratios.append(np.std(noisy - y) / (sigma * np.std(y)))
    identity = reel_inject(y, 0.0, rng).tobytes() == y.tobytes()

    ckpt = tmp_path / "m.ckpt"
    mdl.save(mdl.Policy(ModelConfig(**SMALL_MODEL), DEFAULT_VOCAB, seed=0), ckpt)
    data = tmp_path / "data"
    data.mkdir()
    for i, text in enumerate(["add x0 x1", "mul x0 x1", "sin x0"]):
        write_dataset(data / f"toy{i:02d}.csv", toy_dataset(text, i, n=60))
    code = cli.main(["eval", "--model", str(ckpt), "--data", str(data), "--out", str(tmp_path / "r"),
                     "--decode", "sample", "--k", "4", "--noise-train", "0", "0.001", "0.01", "0.1"])
    rows = (tmp_path / "r" / "summary.csv").read_text().splitlines()[1:] if code == 0 else []
    ok = (all(abs(r - 1) <= 0.05 for r in ratios) and identity and len(rows) == 4
          and time.perf_counter() - t0 < 300)
    criterion(8, ok, "noise std ratios " + ", ".join(f"{r:.4f}" for r in ratios)
              + f"; {len(rows)} summary rows")


def reel_inject(y, sigma, rng):
    from data2eqn.bench import inject_noise
    return inject_noise(y, sigma, rng)


# -- end-to-end trend and determinism ----------------------------------------

@pytest.fixture(scope="module")
def trend_run(tmp_path_factory):
    workdir = str(tmp_path_factory.mktemp("trend_a"))
    t0 = time.perf_counter()
    result = trend_experiment(workdir, seed=0)
    return workdir, result, time.perf_counter() - t0


def test_criterion_7_end_to_end_trend(criterion, trend_run):
    _, result, elapsed = trend_run
    rows = result["equations"].values()
    improved = sum(r["last_epoch_reward"] > r["first_epoch_reward"] for r in rows)
    before, after = result["mean_test_r2_before"], result["mean_test_r2_after"]
    for name, r in result["equations"].items():
        print(f"{name} {r['equation']:<22} reward {r['first_epoch_reward']:+.4f} -> "
              f"{r['last_epoch_reward']:+.4f}  test R2 {r['test_r2_before']:+.4f} -> "
              f"{r['test_r2_after']:+.4f}")
    ok = len(rows) == 20 and improved >= 16 and after >= before and elapsed < 1800
    criterion(7, ok, f"reward rose on {improved}/20, mean test R2 {before:.4f} -> {after:.4f}, "
                     f"{elapsed / 60:.1f} min")


def test_criterion_9_determinism(criterion, trend_run, tmp_path):
    first, _, _ = trend_run
    second = str(tmp_path / "trend_b")
    trend_experiment(second, seed=0)
    files = sorted(os.path.relpath(os.path.join(d, f), first)
                   for d, _, fs in os.walk(first) for f in fs)
    differ = [f for f in files if not filecmp.cmp(os.path.join(first, f), os.path.join(second, f),
                                                  shallow=False)]
    kinds = {os.path.splitext(f)[1] for f in files}
    ok = not differ and {".ckpt", ".jsonl", ".json", ".csv"} <= kinds
    criterion(9, ok, f"{len(files)} files compared, {len(differ)} differ" +
              (f": {differ[:3]}" if differ else ""))

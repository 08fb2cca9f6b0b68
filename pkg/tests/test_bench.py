import csv
import json

import numpy as np
import pytest

from data2eqn import bench
from data2eqn.bench import Dataset, DatasetError, Metrics, emit_report, evaluate_model, inject_noise, load_csv, split
from data2eqn.expr import from_prefix, tokenize
from data2eqn.model import Generation, Policy


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def make(name="eq", n=100, d=2, text="add x0 x1", seed=0):
    X = np.random.default_rng(seed).standard_normal((n, d))
    from data2eqn.expr import evaluate
    return Dataset(name, X, evaluate(from_prefix(text), X).values, text)


# -- loading and splitting -------------------------------------------------

def test_load_csv(tmp_path):
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((100, 3)).tolist()
    ds = load_csv(write_csv(tmp_path / "feyn.csv", ["x0", "x1", "y"], rows))
    assert (ds.n, ds.d, ds.name) == (100, 2, "feyn")
    assert np.array_equal(ds.X, np.array(rows)[:, :2]) and np.array_equal(ds.y, np.array(rows)[:, 2])


def test_load_csv_dimension_limit(tmp_path):
    header = [f"x{i}" for i in range(11)] + ["y"]
    with pytest.raises(DatasetError, match="limit of 10"):
        load_csv(write_csv(tmp_path / "wide.csv", header, [[0.0] * 12] * 5))


@pytest.mark.parametrize("cell, where", [("nan", "row 3, column x1"), ("abc", "row 3, column x1"),
                                         ("inf", "row 3, column x1")])
def test_load_csv_bad_cell(tmp_path, cell, where):
    rows = [["1", "2", "3"], ["1", cell, "3"], ["1", "2", "3"], ["4", "5", "6"]]
    with pytest.raises(DatasetError, match=where):
        load_csv(write_csv(tmp_path / "bad.csv", ["x0", "x1", "y"], rows))


def test_load_csv_header_problems(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(DatasetError, match="header"):
        load_csv(tmp_path / "empty.csv")
    with pytest.raises(DatasetError, match="header"):
        load_csv(write_csv(tmp_path / "h.csv", ["a", "b", "y"], [[1, 2, 3]] * 4))
    with pytest.raises(DatasetError, match="at least 4"):
        load_csv(write_csv(tmp_path / "s.csv", ["x0", "y"], [[1, 2]] * 3))


@pytest.mark.parametrize("n, n_train", [(100, 75), (4, 3), (10, 8), (6, 5), (7, 5)])
def test_split_sizes(n, n_train):
    train, test = split(make(n=n), seed=1)
    assert (train.n, test.n) == (n_train, n - n_train)


def test_split_disjoint_and_deterministic():
    ds = make(n=57)
    ds = Dataset(ds.name, np.arange(57.0)[:, None], ds.y)
    train, test = split(ds, seed=3)
    a, b = set(train.X[:, 0]), set(test.X[:, 0])
    assert not a & b and a | b == set(range(57))
    again = split(ds, seed=3)
    assert np.array_equal(again[0].X, train.X)
    assert not np.array_equal(split(ds, seed=4)[0].X, train.X)
    with pytest.raises(DatasetError):
        split(make(n=3))


# -- noise ----------------------------------------------------------------

def test_noise_zero_is_identity():
    y = np.random.default_rng(0).standard_normal(50)
    assert inject_noise(y, 0.0, np.random.default_rng(1)).tobytes() == y.tobytes()
    c = np.full(20, 3.0)
    assert np.array_equal(inject_noise(c, 0.5, np.random.default_rng(1)), c)
    with pytest.raises(ValueError):
        inject_noise(y, -0.1, np.random.default_rng(1))


@pytest.mark.parametrize("sigma", [0.001, 0.01, 0.1])
def test_noise_scale(sigma):
    y = np.random.default_rng(0).standard_normal(10_000) * 3 + 1
    noisy = inject_noise(y, sigma, np.random.default_rng(2))
    assert abs(np.std(noisy - y) / (sigma * np.std(y)) - 1) <= 0.05


# -- evaluation -----------------------------------------------------------

class ScriptedPolicy(Policy):
    """Emits fixed token sequences regardless of the input."""

    def __init__(self, sequences):
        from data2eqn.nn import ModelConfig
        super().__init__(ModelConfig(width=8, heads=2, enc_layers=1, dec_layers=1, memory_slots=1,
                                     inducing_points=1), seed=0)
        self.sequences = sequences
        self.seen_targets = []

    def encode(self, X, y):
        self.seen_targets.append(np.array(y))
        return super().encode(X, y)

    def generate(self, memory, mode="greedy", **kw):
        gens = [Generation(list(s), np.zeros(len(s) - 1)) for s in self.sequences]
        if mode == "beam":
            return [gens]
        rows = np.asarray(memory).shape[0] if np.asarray(memory).ndim == 3 else 1
        return (gens * rows)[:max(rows, 1)] if mode == "sample" else gens[:1]


def test_oracle_generator_scores_one():
    pol = ScriptedPolicy([tokenize(from_prefix("add x0 x1"))])
    m = evaluate_model(pol, [make()], "greedy", 1)
    assert m.records[0].test_r2 == 1.0 and m.proportion_gt_099 == 1.0 and m.mean_r2 == 1.0


def test_invalid_generator_scores_minus_one():
    pol = ScriptedPolicy([[1, 3, 2]])  # sin with no operand
    m = evaluate_model(pol, [make("a"), make("b", seed=1)], "sample", 4)
    assert m.mean_r2 == -1.0 and m.proportion_gt_099 == 0.0
    assert all(r.tokens == [] and r.n_valid == 0 for r in m.records)


def test_best_of_k_uses_training_r2():
    good = tokenize(from_prefix("add x0 x1"))
    meh = tokenize(from_prefix("x0"))
    pol = ScriptedPolicy([meh, [1, 3, 2], good, meh])
    rec = evaluate_model(pol, [make()], "sample", 4).records[0]
    assert rec.tokens == good and rec.n_valid == 3 and rec.n_candidates == 4


def test_selection_blind_to_test_rows():
    seqs = [tokenize(from_prefix(t)) for t in ("x0", "add x0 x1", "mul x0 x1", "x1")]
    ds = make(n=80, text="add x0 mul 0.3 x1")
    train, test = split(ds, seed=0)
    picks = []
    for perm_seed in range(3):
        perm = np.random.default_rng(perm_seed).permutation(test.n)
        best, r2, _ = bench.select_candidate(ScriptedPolicy(seqs), seqs, train)
        picks.append(best)
        # the selection routine only ever receives training rows
        assert train.n == 60 and test.rows(perm).n == 20
    assert len(set(picks)) == 1


def test_encoder_sees_at_most_200_training_rows():
    pol = ScriptedPolicy([tokenize(from_prefix("add x0 x1"))])
    evaluate_model(pol, [make(n=400)], "greedy", 1)
    assert len(pol.seen_targets[0]) == 200
    train, _ = split(make(n=400))
    assert set(pol.seen_targets[0]) <= set(train.y)


def test_train_noise_only_touches_training_targets():
    pol = ScriptedPolicy([tokenize(from_prefix("add x0 x1"))])
    clean = evaluate_model(pol, [make()], "greedy", 1).records[0]
    noisy = evaluate_model(pol, [make()], "greedy", 1, noise_train=0.1).records[0]
    assert clean.test_r2 == noisy.test_r2 == 1.0 and noisy.train_r2 < 1.0
    both = evaluate_model(pol, [make()], "greedy", 1, noise_test=0.1).records[0]
    assert both.test_r2 < 1.0


def test_adapt_hook_receives_training_split():
    seen = []
    pol = ScriptedPolicy([tokenize(from_prefix("x0"))])

    def adapt(p, train):
        seen.append(train.n)
        return p

    evaluate_model(pol, [make(n=40)], "greedy", 1, adapt=adapt)
    assert seen == [30]


# -- reports --------------------------------------------------------------

def _metrics(values):
    return Metrics([bench.EquationRecord(f"e{i}", v, v, [], None, 1, 1) for i, v in enumerate(values)])


def test_report_formatting_and_brute_force(tmp_path):
    m = _metrics([1.0, 0.995, 0.999, 0.5, 0.9999, 1.0, 0.992])
    assert abs(m.proportion_gt_099 - 6 / 7) < 1e-15
    emit_report([("run", m)], tmp_path)
    rows = bench.read_summary(tmp_path / "summary.csv")
    assert rows[0]["proportion_gt_099"] == "0.857143"
    report = json.loads((tmp_path / "report.json").read_text())
    eqs = report["runs"][0]["equations"]
    assert report["runs"][0]["mean_r2"] == sum(e["test_r2"] for e in eqs) / len(eqs)
    assert report["runs"][0]["proportion_gt_099"] == sum(e["test_r2"] > 0.99 for e in eqs) / len(eqs)


def test_six_decimal_contract(tmp_path):
    m = _metrics([1.0] * 857 + [0.0] * 143)
    emit_report([("p", m)], tmp_path)
    text = (tmp_path / "summary.csv").read_text().splitlines()
    assert text[0] == "name,mean_r2,proportion_gt_099,fit_time,predict_time"
    assert text[1] == "p,0.857000,0.857000,0.000000,0.000000"


def test_reports_are_byte_identical_and_merge(tmp_path):
    pol = ScriptedPolicy([tokenize(from_prefix("x0"))])
    for d in ("a", "b"):
        emit_report([("greedy", evaluate_model(pol, [make()], "greedy", 1))], tmp_path / d)
    for f in ("report.json", "summary.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    emit_report([("sample-k4", evaluate_model(pol, [make()], "sample", 4))], tmp_path / "a")
    names = [r["name"] for r in bench.read_summary(tmp_path / "a" / "summary.csv")]
    assert names == ["greedy", "sample-k4"]


def test_empty_report_refused(tmp_path):
    with pytest.raises(ValueError):
        emit_report([("x", Metrics([]))], tmp_path)
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    assert not (tmp_path / "report.json").exists()


def test_noise_sweep_rows(tmp_path):
    pol = ScriptedPolicy([tokenize(from_prefix("add x0 x1"))])
    runs = bench.noise_sweep(pol, [make()], decode_mode="greedy", samples_per_eq=1)
    emit_report(runs, tmp_path)
    assert [r["name"] for r in bench.read_summary(tmp_path / "summary.csv")] == \
        ["noise=0", "noise=0.001", "noise=0.01", "noise=0.1"]

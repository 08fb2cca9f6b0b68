"""The full desk-scale experiment: corpus, pretraining, per-equation finetuning.

Run: python3 demos/05_trend.py [workdir]

Takes roughly 18 minutes on one core. Everything it writes lands in
workdir, including a report with "pretrained" and "finetuned" rows.
"""
import sys

from data2eqn.toys import trend_experiment

workdir = sys.argv[1] if len(sys.argv) > 1 else "trend_run"
result = trend_experiment(workdir, seed=0, verbose=True)

up = 0
for name, r in result["equations"].items():
    up += r["last_epoch_reward"] > r["first_epoch_reward"]
    print(f"{name} {r['equation']:<24} reward {r['first_epoch_reward']:+.3f} -> {r['last_epoch_reward']:+.3f}"
          f"   test R2 {r['test_r2_before']:+.3f} -> {r['test_r2_after']:+.3f}")
print(f"reward rose on {up}/{len(result['equations'])} equations")
print(f"mean test R2 {result['mean_test_r2_before']:.4f} -> {result['mean_test_r2_after']:.4f}")

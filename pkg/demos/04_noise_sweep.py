"""Evaluate a checkpoint on the toy equations at increasing target noise.

Run: python3 demos/04_noise_sweep.py model.ckpt [report_dir]

Noise is added to the training targets only, scaled by their standard
deviation; test targets stay clean. Each level becomes one summary row.
"""
import sys

from data2eqn import bench
from data2eqn import model as mdl
from data2eqn.toys import toy_datasets

policy = mdl.load(sys.argv[1])
out = sys.argv[2] if len(sys.argv) > 2 else "demo_report"
datasets = toy_datasets()[:8]

runs = bench.noise_sweep(policy, datasets, decode_mode="sample", samples_per_eq=8)
for name, metrics in runs:
    print(f"{name:<12} mean test R2 {metrics.mean_r2:+.4f}   R2 > 0.99: {metrics.proportion_gt_099:.3f}")
bench.emit_report(runs, out)
print(open(f"{out}/summary.csv").read())

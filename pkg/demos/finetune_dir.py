"""Finetune one checkpoint per CSV in a directory, one equation at a time.

Run: python3 demos/finetune_dir.py model.ckpt data_dir out_dir [extra finetune flags...]

Each equation gets its own run of the finetune subcommand, so every output
checkpoint has a matching log and resolved_config.json next to it.
"""
import glob
import os
import sys

from data2eqn.cli import main

model, data_dir, out_dir, extra = sys.argv[1], sys.argv[2], sys.argv[3], sys.argv[4:]
failed = 0
for path in sorted(glob.glob(os.path.join(data_dir, "*.csv"))):
    name = os.path.splitext(os.path.basename(path))[0]
    run_dir = os.path.join(out_dir, name)
    code = main(["finetune", "--model", model, "--data", path,
                 "--out", os.path.join(run_dir, "model.ckpt")] + extra)
    print(f"{name}: exit {code}")
    failed += code != 0
sys.exit(1 if failed else 0)

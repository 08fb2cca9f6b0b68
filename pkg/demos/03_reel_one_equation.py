"""Finetune a pretrained model on a single equation with clipped policy updates.

Run: python3 demos/03_reel_one_equation.py model.ckpt ["add x0 x1"]

Use a reasonably pretrained checkpoint, such as trend_run/pretrained.ckpt
from 05_trend.py. The two-epoch model from 02_pretrain.py rarely emits a
valid equation, so every reward sits at the invalid floor and nothing moves.

The frozen pretrained copy anchors the update through the KL term, and the
reward comes from how well each sampled equation fits bootstrap subsets of
the data. Nothing about the equation's form is given to the model.
"""
import sys

from data2eqn import bench, reel
from data2eqn import model as mdl
from data2eqn.toys import toy_dataset

policy = mdl.load(sys.argv[1])
text = sys.argv[2] if len(sys.argv) > 2 else "add x0 x1"
dataset = toy_dataset(text, 0)
train, test = bench.split(dataset)

before = bench.evaluate_dataset(policy, dataset)
print(f"before: {before.equation}  test R2 {before.test_r2:.4f}")

cfg = reel.FinetuneConfig(epochs=5)
result = reel.run_reel(policy, train.X, train.y, cfg)
for rec in result.log:
    print(f"step {rec['step']:2d}  reward {rec['mean_reward']:+.4f}  valid {rec['valid_rate']:.2f}  "
          f"rho {rec['mean_rho']:.4f}  kl {rec['kl']:.5f}")
means = reel.epoch_means(result.log)
print("mean reward per epoch:", {e: round(v, 4) for e, v in means.items()})

after = bench.evaluate_dataset(result.policy, dataset)
print(f"after:  {after.equation}  test R2 {after.test_r2:.4f}")

"""Generate a synthetic corpus and pretrain a small encoder-decoder on it.

Run: python3 demos/02_pretrain.py [out.ckpt] [epochs]

The defaults finish in a couple of minutes on one core. The model is far
too small and too briefly trained to be useful; the point is to watch the
loss fall from its uniform starting value.
"""
import math
import sys

from data2eqn import datagen
from data2eqn import model as mdl
from data2eqn.expr import DEFAULT_VOCAB, to_infix
from data2eqn.nn import ModelConfig

out = sys.argv[1] if len(sys.argv) > 1 else "demo_pretrained.ckpt"
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 2

gen = datagen.GenConfig(n_triplets=800, dim_range=(1, 2), max_depth=3, points_per_triplet=100, seed=1)
triplets, rejected = datagen.generate_corpus(gen)
print(f"{len(triplets)} triplets, {rejected} draws rejected (non-finite or out of range)")
t = triplets[0]
print("first triplet:", to_infix(t.f), t.X.shape)

config = ModelConfig(width=32, heads=4)
policy = mdl.Policy(config, DEFAULT_VOCAB, seed=1)
print(f"{policy.n_params:,} parameters; uniform loss would be {math.log(len(DEFAULT_VOCAB) - 2):.3f}")

train, held = mdl.holdout_split(triplets, 0.05, seed=1)
cfg = mdl.PretrainConfig(epochs=epochs, batch_size=32, learning_rate=2e-3, seed=1)


def show(rec):
    if rec["step"] == 1 or rec["step"] % 10 == 0:
        print(f"step {rec['step']:4d}  epoch {rec['epoch']}  loss {rec['loss']:.3f}")


mdl.pretrain(policy, train, cfg, on_step=show)
print(f"held-out token accuracy {mdl.token_accuracy(policy, held):.3f}")
mdl.save(policy, out, {"pretrain": cfg.to_dict()})
print("saved", out)

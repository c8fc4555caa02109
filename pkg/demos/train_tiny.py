"""
Training a small model
======================

Generate synthetic data, fit the tiny network to 16 models, and compare
the scores on the training models with the scores on held-out models.
Takes a minute or two on one core.
Run with ``python3 demos/train_tiny.py``.
"""

import numpy as np

from p2cad import network as nw
from p2cad import trainer as tr

train = tr.generate_dataset(tr.DatasetSpec(count=16, seed=0, n_points=256))
held = tr.generate_dataset(tr.DatasetSpec(count=16, seed=1, n_points=256))
print(len(train), "training samples, token tensor", train.tokens.shape)

# most rows are EOS padding, so even a constant guess scores ~0.8 on acc_cmd
print("EOS share of rows", round(float((train.tokens[..., 0] == 5).mean()), 3))

cfg = nw.tiny_config(n_seq=60)
params = nw.NetworkParams.init(cfg, seed=0)
print(params.n_weights(), "weights")

res = tr.train(params, train, epochs=300, lr=2e-3, batch=8, seed=0, log_every=0, beta2=0.9)
curve = np.array(res.curve)
print("loss", curve[:5, 1].mean().round(1), "->", curve[-5:, 1].mean().round(1),
      "after", res.steps, "steps")

for name, ds in (("train", train), ("held-out", held)):
    m = tr.evaluate(params, ds)
    print(f"{name:9s} acc_cmd {m.acc_cmd:.3f} acc_param {m.acc_param:.3f} "
          f"invalid {m.invalid_ratio:.2f} median CD {m.cd_median}")

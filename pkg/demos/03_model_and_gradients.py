#!/usr/bin/env python3
"""The network under a microscope: forward contract and exact gradients.

Shows the padding invariance of the last-valid-timestep readout, the
softmax head's probabilistic output, inverted dropout's expectation
property, and a finite-difference audit of the analytic backward pass.
"""

import numpy as np

from moskit import (
    ModelConfig,
    backward,
    forward,
    init_params,
    loss_regression,
)
from moskit.model import inverted_dropout

rng = np.random.default_rng(0)

cfg = ModelConfig(input_dim=8, projection_dim=8, lstm_hidden=12, lstm_layers=2,
                  dense_hidden=12, head="regression")
params = init_params(cfg, seed=1)

print("== padding invariance ==")
seq = rng.normal(size=(1, 9, 8))
pred, _ = forward(params, seq, np.array([9]), mode="eval")
padded = np.concatenate([seq, np.zeros((1, 6, 8))], axis=1)
pred_padded, _ = forward(params, padded, np.array([9]), mode="eval")
print(f"  prediction {pred[0]:+.6f} with 0 pad frames")
print(f"  prediction {pred_padded[0]:+.6f} with 6 pad frames -> identical: "
      f"{np.array_equal(pred, pred_padded)}\n")

print("== classification head emits a distribution ==")
cls = init_params(ModelConfig(input_dim=8, lstm_hidden=12, lstm_layers=2,
                              dense_hidden=12, head="classification"), seed=2)
probs, _ = forward(cls, seq, np.array([9]), mode="eval")
print(f"  33 probabilities, sum = {probs.sum():.12f}, max at class "
      f"{int(np.argmax(probs)) + 1}\n")

print("== inverted dropout keeps the expectation ==")
activations = rng.normal(size=64) + 2.0
draws = np.stack([inverted_dropout(activations, 0.75, rng)[0] for _ in range(20_000)])
rel = np.linalg.norm(draws.mean(axis=0) - activations) / np.linalg.norm(activations)
print(f"  mean of 20k masked/rescaled draws vs the clean activations: "
      f"{rel:.2%} relative error\n")

print("== gradient audit vs central finite differences ==")
x = rng.normal(size=(3, 7, 8))
valid = np.array([7, 4, 6])
target = rng.uniform(1, 5, size=3)
preds, trace = forward(params, x, valid, mode="eval")
_, lgrad = loss_regression(preds, target)
grads = backward(trace, lgrad)

eps = 1e-5
worst = 0.0
for name in ("proj_W", "lstm0_Wh", "lstm1_Wx", "dense_W", "out_W"):
    tensor = params.tensors[name]
    flat = np.argsort(-np.abs(grads[name]), axis=None)[:20]  # audit the largest
    for k in flat:
        ix = np.unravel_index(k, tensor.shape)
        orig = tensor[ix]
        tensor[ix] = orig + eps
        hi, _ = loss_regression(forward(params, x, valid, mode="eval")[0], target)
        tensor[ix] = orig - eps
        lo, _ = loss_regression(forward(params, x, valid, mode="eval")[0], target)
        tensor[ix] = orig
        fd = (hi - lo) / (2 * eps)
        a = grads[name][ix]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    print(f"  {name:9s} audited 20 largest entries")
print(f"  worst relative error: {worst:.2e} (full audit lives in the test suite)")

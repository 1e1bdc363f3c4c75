#!/usr/bin/env python3
"""The full regression recipe on a synthetic task it can nail.

Sorted batches, gradient accumulation (micro 8 x 10 = effective 80),
triangular cyclical learning rate, early stopping, and the range-coverage
restart rule, all driven through the real training entry point. The
synthetic targets are an affine function of each utterance's mean-pooled
features, so the model can overfit them sharply; watch the loss fall.
"""

import numpy as np

from moskit import ModelConfig, TrainRunConfig, train_regression
from moskit.model import predict_sequences

rng = np.random.default_rng(5)

# 48 utterances, 12-dim features, frames hover around a per-utterance base
dim, n = 12, 48
w = rng.normal(size=dim)
w *= 1.2 / np.linalg.norm(w)
ids, features, targets = [], {}, {}
for k in range(n):
    uid = f"u{k:03d}"
    t = int(rng.integers(15, 40))
    base = rng.normal(size=dim)
    frames = base + 0.3 * rng.normal(size=(t, dim))
    ids.append(uid)
    features[uid] = frames
    targets[uid] = float(np.clip(3.0 + frames.mean(axis=0) @ w, 1.0, 5.0))

from moskit import SequenceData

data = SequenceData(ids=ids, features=features, targets=targets)
print(f"targets span [{min(targets.values()):.2f}, {max(targets.values()):.2f}]")

model_cfg = ModelConfig(input_dim=dim, projection_dim=dim, lstm_hidden=16,
                        lstm_layers=2, dense_hidden=16, dropout_enabled=False)
run_cfg = TrainRunConfig(micro_batch=8, accumulation_steps=10, seed=0,
                         max_epochs=1200, patience=10**6, max_restarts=0,
                         target_train_loss=0.08)

result = train_regression(data, data, model_cfg, run_cfg)

print("\nepoch-sampled history (iteration = optimizer updates):")
step = max(1, len(result.history) // 12)
for row in result.history[::step] + result.history[-1:]:
    print(f"  update {row.iteration:4d}  lr {row.lr:.5f}  train L1 {row.train_loss:.4f}")

preds = predict_sequences(result.params, [features[i] for i in ids])
truth = np.array([targets[i] for i in ids])
print(f"\nfinal train L1: {result.history[-1].train_loss:.4f}")
print(f"prediction range [{preds.min():.2f}, {preds.max():.2f}] vs "
      f"target range [{truth.min():.2f}, {truth.max():.2f}]")
print(f"restarts used: {result.restarts} (coverage rule: resume while the "
      f"model misses the <1.5 or >4.5 regions)")

#!/usr/bin/env python3
"""Ratings in, labels out: aggregation and listening-test statistics.

Builds a synthetic pool of vote sets, aggregates them with the population
convention, and reproduces the kinds of dataset views used before
modeling: the grid histogram, the mean/std consensus scatter, range
masses, and inverse-frequency class weights.
"""

import numpy as np

from moskit import (
    Dataset,
    Utterance,
    aggregate_ratings,
    class_weights,
    mass_in_range,
    mean_std_scatter,
    mos_histogram,
    mos_to_class,
)

rng = np.random.default_rng(0)

print("== vote aggregation ==")
for votes in ([3, 3, 3, 3, 4, 4, 4, 4], [1, 1, 2, 3, 3, 4, 5, 5],
              [3, 3, 3, 3, 3, 3, 3, 3], [1, 1, 1, 3, 4, 5, 5, 5]):
    label = aggregate_ratings(votes)
    print(f"  votes {votes} -> mean {label.mean:.3f}, std {label.std:.4f}")
print("  same mean, very different consensus: a round average can hide")
print("  either perfect agreement (std 0) or a split jury (std ~1.76).\n")

# synthesize a skewed dataset: middling quality is far more common
utterances = []
for k in range(400):
    center = rng.normal(3.1, 0.7)
    votes = np.clip(np.round(rng.normal(center, 0.8, size=8)), 1, 5).astype(int)
    utterances.append(Utterance(
        id=f"u{k:03d}", system_id=f"sys{k % 25:02d}", feature_path="unused.mosf",
        ratings=votes.tolist(), label=aggregate_ratings(votes.tolist()), num_frames=1,
    ))
ds = Dataset(utterances)

print("== grid histogram (bins of 0.125) ==")
hist = mos_histogram(ds, 0.125)
peak = max(n for _, n in hist)
for center, count in hist:
    if count:
        bar = "#" * max(1, int(40 * count / peak))
        print(f"  {center:5.3f} {count:4d} {bar}")

print("\n== range masses ==")
print(f"  [2, 4.125]: {mass_in_range(ds, 2.0, 4.125):5.1%}")
print(f"  [1, 2):     {mass_in_range(ds, 1.0, np.nextafter(2.0, 1.0)):5.1%}")
print(f"  (4.125, 5]: {mass_in_range(ds, np.nextafter(4.125, 5.0), 5.0):5.1%}")
print("  the tails are underrepresented, which is exactly why class")
print("  weighting and the extreme-region corrections exist.\n")

print("== consensus scatter (top multiplicities) ==")
points = sorted(mean_std_scatter(ds), key=lambda p: -p[2])[:8]
for mean, std, count in points:
    print(f"  mean {mean:5.3f}  std {std:5.3f}  x{count}")

print("\n== inverse-frequency class weights ==")
weights = class_weights(ds)
observed = [(k + 1, w) for k, w in enumerate(weights) if w > 0]
lightest = min(observed, key=lambda kw: kw[1])
heaviest = max(observed, key=lambda kw: kw[1])
print(f"  observed classes: {len(observed)}/33, mean weight over observed = "
      f"{np.mean([w for _, w in observed]):.3f}")
print(f"  most common class {lightest[0]} gets weight {lightest[1]:.3f}; "
      f"rarest observed class {heaviest[0]} gets {heaviest[1]:.3f}")
print(f"  (class of MOS 3.0 is {mos_to_class(3.0)}; unobserved classes get 0)")

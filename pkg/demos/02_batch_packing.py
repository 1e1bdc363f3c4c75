#!/usr/bin/env python3
"""Why length-sorted batch compilation: padding waste, quantified.

Compares the padding cost of random batch composition against sorted
compilation across batch sizes, on length distributions like real speech
datasets (a long right tail).
"""

import numpy as np

from moskit import pad_and_mask, padding_cost, plan_random, plan_sorted

rng = np.random.default_rng(1)
lengths = {f"u{i:04d}": int(x) for i, x in
           enumerate(np.clip(rng.lognormal(5.0, 0.5, size=1000), 50, 2000))}
total_frames = sum(lengths.values())
print(f"1000 utterances, {total_frames} real frames, lengths "
      f"{min(lengths.values())}..{max(lengths.values())}\n")

print(f"{'batch':>5} {'random pad':>12} {'sorted pad':>12} {'ratio':>7}")
for batch_size in (4, 8, 16, 32):
    random_cost = np.mean([padding_cost(plan_random(lengths, batch_size, s))
                           for s in range(10)])
    sorted_cost = padding_cost(plan_sorted(lengths, batch_size, epoch_seed=0))
    print(f"{batch_size:>5} {random_cost:>12.0f} {sorted_cost:>12} "
          f"{sorted_cost / random_cost:>6.1%}")

print("\nsorted compilation pays a fraction of the padding, and the saving")
print("grows with batch size; batch ORDER is still shuffled per epoch:")
for seed in (0, 1):
    plan = plan_sorted(dict(list(lengths.items())[:12]), 4, epoch_seed=seed)
    print(f"  epoch seed {seed}: first batch {plan.batches[0]}")

print("\npadding itself is mechanical: zero-fill to the batch max,")
print("remember the valid lengths.")
seqs = [np.ones((t, 3)) for t in (3, 5, 4)]
padded, valid = pad_and_mask(seqs)
print(f"  padded tensor {padded.shape}, valid lengths {valid.tolist()}")

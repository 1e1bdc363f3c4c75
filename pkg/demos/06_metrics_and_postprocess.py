#!/usr/bin/env python3
"""From raw model outputs to challenge-style scores.

Walks a batch of fake predictions through the post-processing chain
(decode, ensemble, correct, quantize) and evaluates the result with the
four criteria at utterance and system level, including the tie-aware rank
correlations.
"""

import numpy as np

from moskit import (
    Dataset,
    MosLabel,
    PostConfig,
    Utterance,
    correct,
    decode_classification,
    ensemble,
    evaluate,
    ktau,
    lcc,
    pipeline,
    quantize,
    srcc,
)

rng = np.random.default_rng(3)

print("== the chain, step by step ==")
reg_pred = 4.41
cls_probs = np.zeros(33)
cls_probs[30] = 0.7  # MOS 4.75
cls_probs[28] = 0.3
decoded = decode_classification(cls_probs)
combined = ensemble(reg_pred, decoded)
corrected = correct(combined)
final = quantize(corrected)
print(f"  regression {reg_pred} | classification decodes to {decoded}")
print(f"  ensemble {combined:.3f} -> correct {corrected:.3f} -> quantize {final}")
print(f"  one call: pipeline(...) = {pipeline(reg_pred, cls_probs)}\n")

print("== corrections only touch the extremes ==")
for x in (1.2, 2.8, 4.5):
    print(f"  correct({x}) = {correct(x)}")
print()

# fake a 60-utterance, 12-system evaluation where predictions compress extremes
utterances, predictions = [], {}
for k in range(60):
    mos = float(np.clip(rng.normal(3.0, 1.0), 1.0, 5.0))
    mos = 1.0 + round((mos - 1.0) * 8) / 8
    uid = f"u{k:02d}"
    utterances.append(Utterance(id=uid, system_id=f"sys{k % 12:02d}",
                                feature_path="unused", label=MosLabel(mos, 0.0),
                                num_frames=1))
    compressed = 3.0 + 0.7 * (mos - 3.0) + rng.normal(0, 0.15)  # timid model
    predictions[uid] = pipeline(compressed, None, PostConfig())
ds = Dataset(utterances)

report = evaluate(predictions, ds)
print("== challenge-style report ==")
print(report.to_text())

print("\n== rank correlations care about ties ==")
a = [1.0, 2.0, 2.0, 3.0]
b = [1.0, 2.0, 3.0, 4.0]
print(f"  srcc({a}, {b}) = {srcc(a, b):.4f}  (mean ranks for the tie)")
print(f"  ktau({a}, {b}) = {ktau(a, b):.4f}  (tau-b, tie-corrected)")
print(f"  lcc              = {lcc(a, b):.4f}")

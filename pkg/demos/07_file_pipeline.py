#!/usr/bin/env python3
"""The whole thing through the command line, files in, files out.

Materializes a synthetic dataset as manifest CSVs plus binary feature
files, then drives stats -> plan-batches -> train -> predict -> evaluate
via the CLI entry point, exactly as a shell user would.
"""

import csv
import tempfile
from pathlib import Path

import numpy as np

from moskit import Dataset, MosLabel, Utterance, write_features, write_manifest
from moskit.cli import main

rng = np.random.default_rng(11)
root = Path(tempfile.mkdtemp(prefix="moskit_demo_"))
print(f"working under {root}\n")

dim = 6
w = rng.normal(size=dim)
w *= 1.2 / np.linalg.norm(w)


def materialize(name, count, seed):
    local = np.random.default_rng(seed)
    folder = root / name
    folder.mkdir()
    utterances = []
    for k in range(count):
        uid = f"{name}{k:03d}"
        frames = local.normal(size=dim) + 0.3 * local.normal(size=(int(local.integers(6, 14)), dim))
        mos = float(np.clip(3.0 + frames.mean(axis=0) @ w, 1.0, 5.0))
        mos = 1.0 + round((mos - 1.0) * 8) / 8
        write_features(folder / f"{uid}.mosf", frames.astype(np.float32))
        utterances.append(Utterance(id=uid, system_id=f"sys{k % 5}",
                                    feature_path=f"{uid}.mosf",
                                    label=MosLabel(mos, 0.0),
                                    num_frames=frames.shape[0]))
    manifest = folder / "manifest.csv"
    write_manifest(manifest, Dataset(utterances))
    return manifest


train_m = materialize("train", 16, 101)
val_m = materialize("val", 8, 102)

steps = [
    ["stats", "--manifest", str(train_m), "--out", str(root / "stats")],
    ["plan-batches", "--manifest", str(train_m), "--batch_size", "4",
     "--out", str(root / "plan")],
    ["train", "--train-manifest", str(train_m), "--val-manifest", str(val_m),
     "--out", str(root / "run"), "--seed", "7",
     "--lstm_hidden", "8", "--dense_hidden", "8",
     "--micro_batch", "4", "--accumulation_steps", "2",
     "--max_epochs", "4", "--patience", "1", "--max_restarts", "0"],
    ["predict", "--manifest", str(val_m),
     "--reg-checkpoint", str(root / "run/checkpoint.mosm"),
     "--out", str(root / "pred")],
    ["evaluate", "--manifest", str(val_m),
     "--predictions", str(root / "pred/predictions.csv"),
     "--out", str(root / "eval")],
]
for argv in steps:
    print(f"$ moskit {' '.join(argv)}")
    code = main(argv)
    assert code == 0, f"exit {code}"
    print()

print("predictions head:")
with open(root / "pred/predictions.csv") as f:
    for row in list(csv.reader(f))[:4]:
        print("  " + ",".join(row))

print("\nartifacts written:")
for path in sorted(root.rglob("*")):
    if path.is_file() and path.suffix in (".csv", ".mosm", ".ndjson", ".cfg"):
        print(f"  {path.relative_to(root)}")

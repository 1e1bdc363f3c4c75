import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moskit import Dataset, MosLabel, SequenceData, Utterance, write_features, write_manifest


def make_utterance(uid, system="sysA", votes=None, mean=None, frames=10):
    label = None
    if votes is not None:
        from moskit import aggregate_ratings

        label = aggregate_ratings(votes)
    elif mean is not None:
        label = MosLabel(mean=mean, std=0.0)
    return Utterance(id=uid, system_id=system, feature_path=f"{uid}.mosf",
                     ratings=votes, label=label, num_frames=frames)


def synthetic_sequences(n, dim, t_lo, t_hi, seed, noise=0.3):
    """Sequences whose frames hover around a per-utterance base vector.

    Targets are an affine function of the exact mean-pooled features,
    clamped to [1, 5]; returns (SequenceData, weight vector, bias).
    """
    rng = np.random.default_rng(seed)
    w = rng.normal(size=dim)
    w *= 1.2 / np.linalg.norm(w)
    bias = 3.0
    ids, features, targets = [], {}, {}
    for k in range(n):
        uid = f"u{k:03d}"
        t = int(rng.integers(t_lo, t_hi + 1))
        base = rng.normal(size=dim)
        frames = base + noise * rng.normal(size=(t, dim))
        pooled = frames.mean(axis=0)
        target = float(np.clip(bias + pooled @ w, 1.0, 5.0))
        ids.append(uid)
        features[uid] = frames
        targets[uid] = target
    return SequenceData(ids=ids, features=features, targets=targets), w, bias


def grid_targets(data: SequenceData) -> SequenceData:
    """Snap a SequenceData's targets to the 0.125 grid (classification)."""
    snapped = {i: 1.0 + round((t - 1.0) * 8.0) / 8.0 for i, t in data.targets.items()}
    return SequenceData(ids=data.ids, features=data.features, targets=snapped)


def write_fixture_dataset(root: Path, data: SequenceData, systems=None, votes=None,
                          split="train") -> Path:
    """Materialize a SequenceData as manifest + MOSF files, return manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    utterances = []
    for idx, uid in enumerate(data.ids):
        path = root / f"{uid}.mosf"
        write_features(path, data.features[uid].astype(np.float32))
        label = None
        row_votes = None
        if votes and uid in votes:
            from moskit import aggregate_ratings

            row_votes = votes[uid]
            label = aggregate_ratings(row_votes)
        elif uid in data.targets:
            label = MosLabel(mean=data.targets[uid], std=0.0)
        utterances.append(Utterance(
            id=uid,
            system_id=(systems or {}).get(uid, f"sys{idx % 4}"),
            feature_path=f"{uid}.mosf",
            ratings=row_votes,
            label=label,
            num_frames=data.features[uid].shape[0],
        ))
    manifest = root / "manifest.csv"
    write_manifest(manifest, Dataset(utterances=utterances, split=split))
    return manifest


@pytest.fixture
def tiny_data():
    data, _, _ = synthetic_sequences(12, 6, 4, 9, seed=7)
    return data

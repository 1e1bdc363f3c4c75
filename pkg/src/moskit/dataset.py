"""Rating manifests, feature files, and listening-test statistics.

A dataset is a CSV manifest of utterances (each pointing at a binary feature
file) plus per-utterance opinion scores, either as raw 1..5 votes or as a
precomputed mean. Aggregation uses the population standard deviation: a
vote multiset like ``3,3,3,3,4,4,4,4`` averages to 3.5 with std 0.5.

Manifest schema (UTF-8 CSV with header)::

    utterance_id,system_id,ratings,mean_mos,feature_path

``ratings`` is a semicolon-separated list of integers and may be empty;
``mean_mos`` may be empty. Raw votes take precedence over ``mean_mos``
when both are present.

Feature file schema (little-endian binary)::

    magic b"MOSF" | version 0x01 | u32 T | u32 D | T*D float32, row-major
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

MOSF_MAGIC = b"MOSF"
MOSF_VERSION = 1

#: Number of MOS categories on the 0.125 grid between 1.0 and 5.0.
NUM_CLASSES = 33

#: Grid step implied by 8 raters per utterance.
DEFAULT_RESOLUTION = 0.125


@dataclass(frozen=True)
class MosLabel:
    """Aggregated opinion score: mean in [1, 5] and population std."""

    mean: float
    std: float

    def __post_init__(self):
        if not (1.0 <= self.mean <= 5.0):
            raise InvalidInputError(f"MOS mean {self.mean} outside [1, 5]")
        if not (0.0 <= self.std <= 2.0):
            raise InvalidInputError(f"MOS std {self.std} outside [0, 2]")


@dataclass
class Utterance:
    """One audio sample: identity, votes or label, and its feature file."""

    id: str
    system_id: str
    feature_path: str
    ratings: list[int] | None = None
    label: MosLabel | None = None
    num_frames: int = 0


@dataclass
class Dataset:
    """A split of utterances with a common MOS grid resolution."""

    utterances: list[Utterance]
    split: str = "train"
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate utterance ids in dataset")

    def __len__(self) -> int:
        return len(self.utterances)

    def labeled(self) -> bool:
        return all(u.label is not None for u in self.utterances)

    def targets(self) -> dict[str, float]:
        """Map id -> mean MOS; requires a fully labeled split."""
        if not self.labeled():
            raise InvalidInputError(f"split '{self.split}' is not fully labeled")
        return {u.id: u.label.mean for u in self.utterances}

    def systems(self) -> dict[str, str]:
        return {u.id: u.system_id for u in self.utterances}

    def lengths(self) -> dict[str, int]:
        return {u.id: u.num_frames for u in self.utterances}


def aggregate_ratings(ratings) -> MosLabel:
    """Aggregate raw votes into (mean, population std).

    Uses exact integer sums, so the result is bit-identical under any
    permutation of the votes. The population convention (divide by n) is
    what reproduces the worked vote sets above.
    """
    votes = list(ratings)
    if not votes:
        raise InvalidInputError("empty rating set")
    for v in votes:
        if v not in (1, 2, 3, 4, 5):
            raise InvalidInputError(f"rating {v!r} not in {{1..5}}")
    n = len(votes)
    s1 = sum(votes)
    s2 = sum(v * v for v in votes)
    mean = s1 / n
    var = s2 / n - mean * mean
    std = float(np.sqrt(max(var, 0.0)))
    return MosLabel(mean=mean, std=std)


def resolution_for(n_ratings: int) -> float:
    """Grid step of averaged MOS values for ``n_ratings`` votes: 1/n."""
    if n_ratings < 1:
        raise InvalidInputError("rating count must be >= 1")
    return 1.0 / n_ratings


def mos_to_class(mos: float) -> int:
    """Map a MOS value on the 0.125 grid to its category in 1..33.

    Round-to-nearest absorbs float noise on grid values.
    """
    if not np.isfinite(mos) or not (1.0 <= mos <= 5.0):
        raise InvalidInputError(f"MOS {mos} outside [1, 5]")
    return int(round((mos - 1.0) * 8.0)) + 1


def class_to_mos(k: int) -> float:
    """Inverse of :func:`mos_to_class`: category k -> 1 + (k-1)/8."""
    if not (1 <= k <= NUM_CLASSES):
        raise InvalidInputError(f"class {k} outside [1, {NUM_CLASSES}]")
    return 1.0 + (k - 1) / 8.0


def mos_histogram(dataset: Dataset, bin_width: float = DEFAULT_RESOLUTION):
    """Histogram of mean MOS values over grid-aligned bins.

    Returns a list of ``(bin_center, count)`` covering the whole [1, 5]
    range, empty bins included; counts sum to ``len(dataset)``.
    """
    if bin_width <= 0:
        raise InvalidInputError("bin width must be positive")
    if not dataset.labeled():
        raise InvalidInputError(f"split '{dataset.split}' has unlabeled utterances")
    n_bins = int(round(4.0 / bin_width)) + 1
    counts = [0] * n_bins
    for u in dataset.utterances:
        # midpoints round up, same policy as postprocess.quantize
        k = int(np.floor((u.label.mean - 1.0) / bin_width + 0.5))
        counts[min(max(k, 0), n_bins - 1)] += 1
    return [(1.0 + k * bin_width, counts[k]) for k in range(n_bins)]


def mass_in_range(dataset: Dataset, lo: float, hi: float) -> float:
    """Fraction of mean MOS values inside the closed interval [lo, hi]."""
    if not dataset.labeled():
        raise InvalidInputError(f"split '{dataset.split}' has unlabeled utterances")
    if not dataset.utterances:
        return 0.0
    hits = sum(1 for u in dataset.utterances if lo <= u.label.mean <= hi)
    return hits / len(dataset.utterances)


def mean_std_scatter(dataset: Dataset):
    """Distinct (mean, std) pairs with multiplicities, from raw votes.

    Returns ``(mean, std, count)`` tuples sorted by (mean, std); counts sum
    to the number of utterances.
    """
    points: dict[tuple[float, float], int] = {}
    for u in dataset.utterances:
        if u.ratings is None:
            raise InvalidInputError(f"utterance '{u.id}' has no raw ratings")
        label = aggregate_ratings(u.ratings)
        key = (label.mean, label.std)
        points[key] = points.get(key, 0) + 1
    return [(m, s, c) for (m, s), c in sorted(points.items())]


def class_weights(dataset: Dataset) -> np.ndarray:
    """Inverse-frequency weights for the 33 MOS categories.

    Observed classes get 1/count, rescaled so their mean weight is 1;
    unobserved classes get exactly 0 (they cannot appear in the loss).
    """
    counts = np.zeros(NUM_CLASSES)
    for u in dataset.utterances:
        if u.label is None:
            raise InvalidInputError(f"utterance '{u.id}' is unlabeled")
        counts[mos_to_class(u.label.mean) - 1] += 1
    weights = np.zeros(NUM_CLASSES)
    observed = counts > 0
    if observed.any():
        weights[observed] = 1.0 / counts[observed]
        weights[observed] /= weights[observed].mean()
    return weights


# ---------------------------------------------------------------------------
# On-disk formats


def write_features(path, frames: np.ndarray) -> None:
    """Write a T x D float matrix as a MOSF feature file."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise InvalidInputError(f"feature matrix must be 2-D and nonempty, got {frames.shape}")
    if not np.isfinite(frames).all():
        raise InvalidInputError("feature matrix contains non-finite values")
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(MOSF_MAGIC)
        f.write(struct.pack("<B", MOSF_VERSION))
        f.write(struct.pack("<II", t, d))
        f.write(frames.astype("<f4", copy=False).tobytes())


def read_feature_header(path) -> tuple[int, int]:
    """Read (T, D) from a MOSF file without loading the payload."""
    with open(path, "rb") as f:
        head = f.read(13)
    if len(head) < 13 or head[:4] != MOSF_MAGIC:
        raise FormatError("bad magic, not a MOSF feature file", str(path))
    if head[4] != MOSF_VERSION:
        raise FormatError(f"unsupported MOSF version {head[4]}", str(path))
    t, d = struct.unpack("<II", head[5:13])
    if t < 1 or d < 1:
        raise FormatError(f"invalid shape ({t}, {d}) in header", str(path))
    return t, d


def read_features(path) -> np.ndarray:
    """Load a MOSF file into a float64 T x D matrix, validating the schema."""
    t, d = read_feature_header(path)
    with open(path, "rb") as f:
        f.seek(13)
        payload = f.read()
    expected = 4 * t * d
    if len(payload) != expected:
        raise FormatError(
            f"payload is {len(payload)} bytes, header promises {expected}", str(path)
        )
    frames = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, d)
    if not np.isfinite(frames).all():
        raise FormatError("payload contains non-finite values", str(path))
    return frames


def load_features(utterance: Utterance) -> np.ndarray:
    """Load the feature matrix of one utterance, checking the header shape."""
    frames = read_features(utterance.feature_path)
    if utterance.num_frames and frames.shape[0] != utterance.num_frames:
        raise FormatError(
            f"frame count {frames.shape[0]} does not match manifest ({utterance.num_frames})",
            utterance.feature_path,
        )
    return frames


MANIFEST_FIELDS = ["utterance_id", "system_id", "ratings", "mean_mos", "feature_path"]


def load_manifest(path, split: str = "train", resolution: float | None = None) -> Dataset:
    """Parse a manifest CSV into a Dataset.

    Feature paths are resolved relative to the manifest's directory; each
    referenced file must exist, and its header supplies ``num_frames``.
    Rows with raw votes are aggregated; rows with only ``mean_mos`` get a
    label with std 0 (unknown spread); rows with neither stay unlabeled.
    """
    path = Path(path)
    base = path.parent
    utterances = []
    rating_counts = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise FormatError(
                f"manifest header {reader.fieldnames} != {MANIFEST_FIELDS}", str(path)
            )
        for row_no, row in enumerate(reader, start=2):
            uid = (row["utterance_id"] or "").strip()
            if not uid:
                raise FormatError(f"row {row_no}: empty utterance_id", str(path))
            ratings = None
            label = None
            raw = (row["ratings"] or "").strip()
            if raw:
                try:
                    ratings = [int(x) for x in raw.split(";") if x.strip()]
                except ValueError:
                    raise FormatError(f"row {row_no}: bad ratings field {raw!r}", str(path))
                label = aggregate_ratings(ratings)
                rating_counts.add(len(ratings))
            elif (row["mean_mos"] or "").strip():
                try:
                    label = MosLabel(mean=float(row["mean_mos"]), std=0.0)
                except ValueError:
                    raise FormatError(
                        f"row {row_no}: bad mean_mos {row['mean_mos']!r}", str(path)
                    )
            feat = base / row["feature_path"]
            if not feat.exists():
                raise FormatError(
                    f"row {row_no} ('{uid}'): feature file not found: {row['feature_path']}",
                    str(path),
                )
            t, _ = read_feature_header(feat)
            utterances.append(
                Utterance(
                    id=uid,
                    system_id=(row["system_id"] or "").strip(),
                    feature_path=str(feat),
                    ratings=ratings,
                    label=label,
                    num_frames=t,
                )
            )
    if resolution is None:
        if len(rating_counts) == 1:
            resolution = resolution_for(rating_counts.pop())
        else:
            resolution = DEFAULT_RESOLUTION
    return Dataset(utterances=utterances, split=split, resolution=resolution)


def write_manifest(path, dataset: Dataset) -> None:
    """Write a Dataset back out in the manifest CSV schema."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_FIELDS)
        for u in dataset.utterances:
            ratings = ";".join(str(v) for v in u.ratings) if u.ratings else ""
            mean = "" if u.label is None else repr(u.label.mean)
            writer.writerow([u.id, u.system_id, ratings, mean, u.feature_path])

"""Length-sorted mini-batch compilation and padding bookkeeping.

Randomly composed mini-batches mix short and long sequences, so the short
ones are padded up to the batch maximum and the padded frames are wasted
work. Sorting the training set by length and slicing consecutive runs keeps
lengths within a batch nearly equal; only batch ORDER is reshuffled each
epoch, so no curriculum over lengths is imposed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass
class BatchPlan:
    """An ordered partition of utterance ids into mini-batches.

    Every id appears in exactly one batch; at most one batch (the
    remainder) is smaller than the configured size.
    """

    batches: list[list[str]]
    lengths: dict[str, int]

    def __post_init__(self):
        seen = [i for b in self.batches for i in b]
        if len(set(seen)) != len(seen) or set(seen) != set(self.lengths):
            raise InvalidInputError("batches must partition the id set exactly")
        sizes = sorted(len(b) for b in self.batches)
        if len(sizes) > 1 and sizes[1:] != [sizes[-1]] * (len(sizes) - 1):
            raise InvalidInputError("only one batch may be smaller than the rest")


def plan_sorted(lengths: dict[str, int], batch_size: int, epoch_seed: int = 0) -> BatchPlan:
    """Compile batches from consecutive runs of the length-sorted id list.

    Ids are sorted ascending by length (ties broken by id), sliced into
    runs of ``batch_size`` (remainder kept), and the batch order is then
    shuffled by ``epoch_seed``. Membership is a pure function of the
    (id, length) set; only the order varies with the seed.
    """
    if batch_size < 1:
        raise InvalidInputError("batch size must be >= 1")
    if not lengths:
        raise InvalidInputError("empty length map")
    order = sorted(lengths, key=lambda i: (lengths[i], i))
    batches = [order[k : k + batch_size] for k in range(0, len(order), batch_size)]
    rng = np.random.default_rng(epoch_seed)
    batches = [batches[j] for j in rng.permutation(len(batches))]
    return BatchPlan(batches=batches, lengths=dict(lengths))


def plan_random(lengths: dict[str, int], batch_size: int, seed: int = 0) -> BatchPlan:
    """Chunk a uniform random permutation of the ids into batches."""
    if batch_size < 1:
        raise InvalidInputError("batch size must be >= 1")
    if not lengths:
        raise InvalidInputError("empty length map")
    ids = sorted(lengths)
    rng = np.random.default_rng(seed)
    order = [ids[j] for j in rng.permutation(len(ids))]
    batches = [order[k : k + batch_size] for k in range(0, len(order), batch_size)]
    return BatchPlan(batches=batches, lengths=dict(lengths))


def padding_cost(plan: BatchPlan) -> int:
    """Total padded frames: sum over batches of (batch max - each length)."""
    cost = 0
    for batch in plan.batches:
        longest = max(plan.lengths[i] for i in batch)
        cost += sum(longest - plan.lengths[i] for i in batch)
    return cost


def pad_and_mask(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences with zeros to the batch maximum length.

    Returns a B x Tmax x D tensor and the vector of valid lengths. All
    sequences must share the feature dimension D.
    """
    seqs = [np.asarray(s) for s in sequences]
    if not seqs:
        raise InvalidInputError("empty batch")
    dims = {s.shape[1] for s in seqs}
    if any(s.ndim != 2 for s in seqs) or len(dims) != 1:
        raise InvalidInputError(f"sequences must be 2-D with one common D, got dims {dims}")
    d = dims.pop()
    valid = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    t_max = int(valid.max())
    out = np.zeros((len(seqs), t_max, d), dtype=np.result_type(*seqs))
    for b, s in enumerate(seqs):
        out[b, : s.shape[0]] = s
    return out, valid


def unpad(padded: np.ndarray, valid: np.ndarray) -> list[np.ndarray]:
    """Invert :func:`pad_and_mask` using the valid-length vector."""
    return [padded[b, : int(n)].copy() for b, n in enumerate(valid)]

"""Synthetic sequence-classification tasks.

Desk-scale stand-ins for real corpora.  The interesting one is ``order-pair``:
the label depends on whether marker token A occurs before marker token B, so
any encoder without a notion of direction (symmetric attention, bag of
embeddings) is stuck at chance while a direction-aware encoder can solve it.

``copy-class`` (which marker is present) and ``parity`` (odd or even count of
the marker) are order-free controls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import substream

TASK_KINDS = ("order-pair", "copy-class", "parity")

# marker token ids shared by all tasks; fillers are drawn from the rest of
# the vocabulary (id 0 doubles as batch padding, which validity flags hide)
TOKEN_A = 1
TOKEN_B = 2


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "order-pair"
    vocab: int = 16
    mu: float = 24.0
    sigma: float = 6.0
    train_size: int = 8000
    val_size: int = 1000
    classes: int = 2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}, "
                             f"expected one of {TASK_KINDS}")
        if self.vocab < 4:
            raise ValueError("vocab must be at least 4")
        if self.mu < 2:
            raise ValueError("mean length must be at least 2")
        if self.sigma < 0:
            raise ValueError("length spread must be non-negative")
        if self.train_size < 1 or self.val_size < 1:
            raise ValueError("split sizes must be positive")
        if self.kind == "copy-class":
            if not 2 <= self.classes <= self.vocab - 1:
                raise ValueError("copy-class needs 2 <= classes <= vocab-1")
        elif self.classes != 2:
            raise ValueError(f"{self.kind} is binary; classes must be 2")


@dataclass
class Dataset:
    sequences: list[np.ndarray] = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.sequences)

    def class_balance(self, classes: int) -> np.ndarray:
        """Fraction of examples per class."""
        return np.bincount(self.labels, minlength=classes) / max(len(self), 1)


def _draw_length(spec: TaskSpec, rng: np.random.Generator) -> int:
    return max(2, int(round(rng.normal(spec.mu, spec.sigma))))


def _fillers(spec: TaskSpec, rng: np.random.Generator, count: int,
             forbid: tuple[int, ...]) -> np.ndarray:
    pool = np.array([t for t in range(spec.vocab) if t not in forbid])
    return pool[rng.integers(0, len(pool), size=count)]


def _make_order_pair(spec, rng):
    length = _draw_length(spec, rng)
    seq = _fillers(spec, rng, length, forbid=(TOKEN_A, TOKEN_B))
    i, j = rng.choice(length, size=2, replace=False)
    a_first = bool(rng.integers(0, 2))
    lo, hi = (i, j) if i < j else (j, i)
    seq[lo], seq[hi] = (TOKEN_A, TOKEN_B) if a_first else (TOKEN_B, TOKEN_A)
    return seq, int(a_first)


def _make_copy_class(spec, rng):
    length = _draw_length(spec, rng)
    label = int(rng.integers(0, spec.classes))
    markers = tuple(range(1, spec.classes + 1))
    seq = _fillers(spec, rng, length, forbid=markers)
    seq[rng.integers(0, length)] = markers[label]
    return seq, label


def _make_parity(spec, rng):
    length = _draw_length(spec, rng)
    label = int(rng.integers(0, 2))
    count = min(label if label else 2, length)  # 2 marks for even, 1 for odd
    seq = _fillers(spec, rng, length, forbid=(TOKEN_A,))
    seq[rng.choice(length, size=count, replace=False)] = TOKEN_A
    return seq, count % 2


_MAKERS = {
    "order-pair": _make_order_pair,
    "copy-class": _make_copy_class,
    "parity": _make_parity,
}


def generate_task(spec: TaskSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Build (train, val) splits for ``spec``, fully determined by the seed.

    The two splits come from one stream with exact-duplicate rejection, so
    they are disjoint as sets of sequences.
    """
    rng = substream(seed, "data")
    make = _MAKERS[spec.kind]
    seen: set[bytes] = set()
    splits = []
    for size in (spec.train_size, spec.val_size):
        sequences, labels = [], []
        misses = 0
        while len(sequences) < size:
            seq, label = make(spec, rng)
            seq = seq.astype(np.int64)
            key = seq.tobytes()
            if key in seen:
                misses += 1
                if misses > 1000:
                    raise ValueError("sequence space too small for disjoint "
                                     "splits; widen the length distribution")
                continue
            misses = 0
            seen.add(key)
            sequences.append(seq)
            labels.append(label)
        splits.append(Dataset(sequences, np.array(labels, dtype=np.int64)))
    return splits[0], splits[1]


def pad_batch(sequences: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle: (ids, validity flags), pad id 0."""
    if not sequences:
        raise ValueError("empty batch")
    widest = max(len(s) for s in sequences)
    ids = np.zeros((len(sequences), widest), dtype=np.int64)
    valid = np.zeros((len(sequences), widest), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = seq
        valid[row, :len(seq)] = True
    return ids, valid

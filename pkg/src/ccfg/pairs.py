"""Per-epoch positive/negative pair plans for the second training stage.

Every unordered intra-class pair of the training split is used each epoch;
negatives are redrawn per epoch: for each anchor image, ``p_n`` distinct other
classes and one uniformly random image from each.
"""
from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations
import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairRecord:
    left: int
    right: int
    flag: int


@dataclass(frozen=True)
class EpochPairPlan:
    pairs: tuple
    epoch: int
    seed: int
    batch_size: int

    def __len__(self):
        return len(self.pairs)

    @property
    def positives(self):
        return [p for p in self.pairs if p.flag == 1]

    @property
    def negatives(self):
        return [p for p in self.pairs if p.flag == 0]

    def batches(self):
        """Consecutive chunks of ``batch_size`` pairs; the last one may be short."""
        return [self.pairs[i:i + self.batch_size] for i in range(0, len(self.pairs), self.batch_size)]


def _members(labels):
    members = defaultdict(list)
    for i, y in enumerate(labels):
        members[int(y)].append(i)
    return members


def enumerate_positive_pairs(labels):
    """All unordered same-class pairs of sample positions, class by class."""
    labels = list(labels)
    if not labels:
        raise ValueError("empty split")
    pairs = []
    for cls, idx in sorted(_members(labels).items()):
        if len(idx) < 2:
            log.warning("class %d has a single training sample and yields no positive pairs", cls)
        pairs.extend(PairRecord(i, j, 1) for i, j in combinations(idx, 2))
    return pairs


def sample_negative_pairs(labels, p_n, rng):
    """``len(labels) * p_n`` negative pairs; ``rng`` is a seed or numpy Generator."""
    labels = list(labels)
    if p_n < 0:
        raise ValueError(f"p_n must be nonnegative, got {p_n}")
    if p_n == 0:
        return []
    members = _members(labels)
    classes = np.array(sorted(members))
    if p_n >= len(classes):
        raise ValueError(f"p_n={p_n} needs at least {p_n + 1} classes, split has {len(classes)}")
    rng = np.random.default_rng(rng)
    pairs = []
    for anchor, y in enumerate(labels):
        others = classes[classes != int(y)]
        for cls in rng.choice(others, size=p_n, replace=False):
            pool = members[int(cls)]
            pairs.append(PairRecord(anchor, pool[rng.integers(len(pool))], 0))
    return pairs


def p_n_for_ratio(labels, ratio):
    """Smallest-error integer p_n giving the requested negative/positive ratio."""
    n_pos = len(enumerate_positive_pairs(labels))
    return max(0, int(round(ratio * n_pos / len(labels))))


def build_epoch_plan(labels, p_n, epoch, seed, batch_size):
    """Positives plus fresh negatives, shuffled with (seed, epoch)-derived randomness."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    neg_rng, shuffle_rng = (np.random.default_rng(s)
                            for s in np.random.SeedSequence([seed, epoch]).spawn(2))
    positives = enumerate_positive_pairs(labels)
    negatives = sample_negative_pairs(labels, p_n, neg_rng)
    flips = shuffle_rng.random(len(positives)) < 0.5
    positives = [PairRecord(p.right, p.left, 1) if f else p for p, f in zip(positives, flips)]
    pairs = positives + negatives
    order = shuffle_rng.permutation(len(pairs))
    return EpochPairPlan(tuple(pairs[i] for i in order), epoch, seed, batch_size)


def dump_plan(plan, path, ids=None):
    """Write ``left_id<TAB>right_id<TAB>flag`` lines; ids default to positions."""
    name = (lambda i: ids[i]) if ids is not None else str
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in plan.pairs:
            fh.write(f"{name(p.left)}\t{name(p.right)}\t{p.flag}\n")


def load_plan_dump(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            left, right, flag = line.rstrip("\n").split("\t")
            rows.append((left, right, int(flag)))
    return rows

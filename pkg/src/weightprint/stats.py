"""Per-kind weight statistics and the standard-deviation fingerprint."""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .checkpoint import TensorMatrix
from .errors import DegenerateError, PreconditionError
from .taxonomy import KINDS, ProjectionKind


class StdNormalization(enum.Enum):
    MaxOne = "MaxOne"
    MinMax = "MinMax"
    UnitL2 = "UnitL2"


@dataclass(frozen=True)
class Moments:
    """Mergeable partial statistics (count, mean, sum of squared deviations, range).

    Partials combine with the pairwise update of Chan, Golub and LeVeque, so a
    group can be reduced per matrix on separate workers and merged afterwards.
    """

    count: int
    mean: float
    m2: float
    min: float
    max: float

    @classmethod
    def of(cls, values) -> "Moments":
        a = np.asarray(values, dtype=np.float64).ravel()
        if a.size == 0:
            raise PreconditionError("cannot take moments of an empty array")
        mean = float(a.mean())
        dev = a - mean
        # second pass corrects the mean's rounding error
        corr = float(dev.sum())
        m2 = float(np.dot(dev, dev)) - corr * corr / a.size
        mean += corr / a.size
        return cls(int(a.size), mean, max(m2, 0.0), float(a.min()), float(a.max()))

    def merge(self, other: "Moments") -> "Moments":
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return Moments(n, mean, m2, min(self.min, other.min), max(self.max, other.max))

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.count)


def merge_all(parts: Iterable[Moments]) -> Moments:
    parts = list(parts)
    if not parts:
        raise PreconditionError("no partial statistics to merge")
    # Tree reduction keeps error growth logarithmic in the number of parts.
    while len(parts) > 1:
        parts = [parts[i].merge(parts[i + 1]) if i + 1 < len(parts) else parts[i] for i in range(0, len(parts), 2)]
    return parts[0]


@dataclass(frozen=True)
class GroupStats:
    kind: ProjectionKind
    count: int
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def from_moments(cls, kind: ProjectionKind, m: Moments) -> "GroupStats":
        # clamp: rounding can put the mean a hair outside [min, max] for constant data
        mean = min(max(m.mean, m.min), m.max)
        return cls(kind, m.count, mean, m.std, m.min, m.max)

    @property
    def mean_over_std(self) -> float | None:
        """|mean| / std, informational (expected to be tiny for trained weights)."""
        return abs(self.mean) / self.std if self.std > 0 else None


def accumulate_stats(group: Iterable[TensorMatrix | np.ndarray], kind: ProjectionKind = ProjectionKind.Q) -> GroupStats:
    parts = [Moments.of(m.values if isinstance(m, TensorMatrix) else m) for m in group]
    if not parts:
        raise PreconditionError(f"empty {kind.value} group")
    return GroupStats.from_moments(kind, merge_all(parts))


@dataclass(frozen=True)
class StdVector:
    """Raw and normalized per-kind stds in canonical order; ``None`` marks an absent kind."""

    raw: tuple[float | None, ...]
    normalized: tuple[float | None, ...]
    normalization: StdNormalization


def normalize_values(values: Sequence[float], scheme: StdNormalization, labels: Sequence[str] | None = None) -> list[float]:
    v = np.asarray(values, dtype=np.float64)
    labels = labels or [str(i) for i in range(len(v))]
    if scheme is StdNormalization.MinMax:
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            raise DegenerateError("all standard deviations are equal; min-max range is zero")
        return [(x - lo) / (hi - lo) for x in v.tolist()]
    zero = [lab for lab, x in zip(labels, v.tolist()) if x == 0.0]
    if zero:
        raise DegenerateError(f"standard deviation is zero for {', '.join(zero)}")
    if scheme is StdNormalization.MaxOne:
        top = float(v.max())
        return [x / top for x in v.tolist()]
    norm = math.sqrt(math.fsum(x * x for x in v.tolist()))
    return [x / norm for x in v.tolist()]


def std_vector(
    stats: Mapping[ProjectionKind, GroupStats] | Sequence[GroupStats],
    normalization: StdNormalization = StdNormalization.MaxOne,
    allow_partial: bool = False,
) -> StdVector:
    if not isinstance(stats, Mapping):
        by_kind: dict[ProjectionKind, GroupStats] = {}
        for s in stats:
            if s.kind in by_kind:
                raise PreconditionError(f"kind {s.kind.value} given twice")
            by_kind[s.kind] = s
        stats = by_kind
    present = [k for k in KINDS if stats.get(k) is not None]
    if not allow_partial and len(present) != len(KINDS):
        missing = [k.value for k in KINDS if k not in present]
        raise PreconditionError(f"std vector needs all seven kinds; missing {', '.join(missing)}")
    if not present:
        raise PreconditionError("std vector needs at least one kind")
    raw_present = [stats[k].std for k in present]
    normed = normalize_values(raw_present, normalization, [k.value for k in present])
    by = dict(zip(present, zip(raw_present, normed)))
    raw = tuple(by[k][0] if k in by else None for k in KINDS)
    norm = tuple(by[k][1] if k in by else None for k in KINDS)
    return StdVector(raw, norm, normalization)


def sample_for_plot(group: Sequence[TensorMatrix | np.ndarray], n: int, seed: int) -> np.ndarray:
    """Uniform sample without replacement over the concatenated group values."""
    arrays = [np.asarray(m.values if isinstance(m, TensorMatrix) else m).ravel() for m in group]
    sizes = np.array([a.size for a in arrays], dtype=np.int64)
    total = int(sizes.sum())
    if n < 0 or n > total:
        raise PreconditionError(f"cannot sample {n} values from a group of {total}")
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=n, replace=False)
    bounds = np.cumsum(sizes)
    which = np.searchsorted(bounds, flat_idx, side="right")
    starts = bounds - sizes
    out = np.empty(n, dtype=np.float64)
    for i in np.unique(which):
        sel = which == i
        out[sel] = arrays[i][flat_idx[sel] - starts[i]]
    return out

"""Domain types, dataset validation, partitioning and the ranking-policy base."""
from __future__ import annotations

import math
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

TARGETS = ("bbowac", "bin_or_bid", "purchase")
MAX_CATALOG = 62


def mask_from_ids(ids: Sequence[int]) -> int:
    """Pack signal ids into an integer qualification bitmask."""
    mask = 0
    for i in ids:
        mask |= 1 << int(i)
    return mask


def ids_from_mask(mask: int, catalog_size: int) -> List[int]:
    return [k for k in range(catalog_size) if (int(mask) >> k) & 1]


def qual_matrix(qual: np.ndarray, catalog_size: int) -> np.ndarray:
    """Expand bitmasks of shape (n,) into a boolean indicator matrix (n, K)."""
    qual = np.asarray(qual, dtype=np.int64)
    return ((qual[:, None] >> np.arange(catalog_size, dtype=np.int64)) & 1).astype(bool)


@dataclass(frozen=True)
class ConversionLabels:
    bbowac: bool
    bin_or_bid: bool
    purchase: bool

    def is_monotone(self) -> bool:
        return (not self.purchase or self.bin_or_bid) and (not self.bin_or_bid or self.bbowac)


@dataclass(frozen=True)
class Impression:
    impression_id: int
    features: Tuple[float, ...]
    qual: int
    shown: int
    conversion: ConversionLabels


class Violation(NamedTuple):
    impression_id: Optional[int]
    rule: str


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of impressions for one placement.

    ``qual`` holds integer bitmasks (bit k set when signal k qualified),
    ``shown`` the dense id of the displayed signal. The active outcome is
    selected by ``target``.
    """

    ids: np.ndarray
    features: np.ndarray
    qual: np.ndarray
    shown: np.ndarray
    bbowac: np.ndarray
    bin_or_bid: np.ndarray
    purchase: np.ndarray
    catalog: Tuple[str, ...]
    feature_dim: int
    target: str = "bbowac"

    def __post_init__(self):
        n = len(self.ids)
        catalog = tuple(str(c) for c in self.catalog)
        if not 1 <= len(catalog) <= MAX_CATALOG:
            raise ValueError(f"catalog size must be in [1, {MAX_CATALOG}], got {len(catalog)}")
        if len(set(catalog)) != len(catalog):
            raise ValueError("catalog names must be unique")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1 and n == 0:
            features = features.reshape(0, int(self.feature_dim))
        if features.ndim != 2 or features.shape[0] != n:
            raise ValueError(f"features must have shape (n, d) with n={n}")
        object.__setattr__(self, "catalog", catalog)
        object.__setattr__(self, "feature_dim", int(self.feature_dim))
        object.__setattr__(self, "ids", _frozen(np.asarray(self.ids, dtype=np.uint64)))
        object.__setattr__(self, "features", _frozen(features))
        for name, dtype in (("qual", np.int64), ("shown", np.int64)):
            arr = np.asarray(getattr(self, name), dtype=dtype)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
            object.__setattr__(self, name, _frozen(arr))
        for name in TARGETS:
            arr = np.asarray(getattr(self, name), dtype=bool)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
            object.__setattr__(self, name, _frozen(arr))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_signals(self) -> int:
        return len(self.catalog)

    @property
    def y(self) -> np.ndarray:
        """Active outcome as a boolean array."""
        return getattr(self, self.target)

    @property
    def qual_indicators(self) -> np.ndarray:
        return qual_matrix(self.qual, self.n_signals)

    def with_target(self, target: str) -> "Dataset":
        return self._replace(target=target)

    def _replace(self, **changes) -> "Dataset":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return Dataset(**fields)

    def take(self, indices) -> "Dataset":
        """Sub-dataset of the given rows, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return self._replace(
            ids=self.ids[idx],
            features=self.features[idx],
            qual=self.qual[idx],
            shown=self.shown[idx],
            bbowac=self.bbowac[idx],
            bin_or_bid=self.bin_or_bid[idx],
            purchase=self.purchase[idx],
        )

    def impression(self, i: int) -> Impression:
        return Impression(
            impression_id=int(self.ids[i]),
            features=tuple(float(v) for v in self.features[i]),
            qual=int(self.qual[i]),
            shown=int(self.shown[i]),
            conversion=ConversionLabels(
                bool(self.bbowac[i]), bool(self.bin_or_bid[i]), bool(self.purchase[i])
            ),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.impression(i)

    @classmethod
    def from_impressions(
        cls,
        impressions: Sequence[Impression],
        catalog: Sequence[str],
        feature_dim: int,
        target: str = "bbowac",
    ) -> "Dataset":
        imps = list(impressions)
        if imps:
            features = np.array([imp.features for imp in imps], dtype=np.float64)
        else:
            features = np.zeros((0, feature_dim))
        return cls(
            ids=[imp.impression_id for imp in imps],
            features=features,
            qual=[imp.qual for imp in imps],
            shown=[imp.shown for imp in imps],
            bbowac=[imp.conversion.bbowac for imp in imps],
            bin_or_bid=[imp.conversion.bin_or_bid for imp in imps],
            purchase=[imp.conversion.purchase for imp in imps],
            catalog=catalog,
            feature_dim=feature_dim,
            target=target,
        )

    def equals(self, other: "Dataset") -> bool:
        """Field-for-field equality (features compared bitwise)."""
        if not isinstance(other, Dataset):
            return False
        if (self.catalog, self.feature_dim, self.target) != (
            other.catalog,
            other.feature_dim,
            other.target,
        ):
            return False
        arrays = ("ids", "qual", "shown", "bbowac", "bin_or_bid", "purchase")
        if not all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        return self.features.shape == other.features.shape and bool(
            np.all(self.features.view(np.uint64) == other.features.view(np.uint64))
        )


def validate_dataset(d: Dataset) -> List[Violation]:
    """Check every impression invariant; return violations instead of raising."""
    violations: List[Violation] = []
    n = len(d)
    if n == 0:
        return violations
    K = d.n_signals
    ids = d.ids
    if d.features.shape[1] != d.feature_dim:
        violations.extend(Violation(int(i), "feature-dim") for i in ids)
    bad_finite = ~np.isfinite(d.features).all(axis=1)
    violations.extend(Violation(int(i), "non-finite-feature") for i in ids[bad_finite])

    qual = d.qual
    violations.extend(Violation(int(i), "empty-qualification") for i in ids[qual <= 0])
    width_ok = (qual >> K) == 0
    violations.extend(Violation(int(i), "mask-width") for i in ids[(qual > 0) & ~width_ok])

    shown = d.shown
    in_range = (shown >= 0) & (shown < K)
    violations.extend(Violation(int(i), "shown-out-of-range") for i in ids[~in_range])
    shown_bit = (qual >> np.where(in_range, shown, 0)) & 1
    not_qualified = in_range & (shown_bit == 0)
    violations.extend(Violation(int(i), "shown-not-qualified") for i in ids[not_qualified])

    monotone = (~d.purchase | d.bin_or_bid) & (~d.bin_or_bid | d.bbowac)
    violations.extend(Violation(int(i), "label-monotonicity") for i in ids[~monotone])

    uniq, counts = np.unique(ids, return_counts=True)
    violations.extend(Violation(int(i), "duplicate-id") for i in uniq[counts > 1])
    return violations


def partition_by_qualification(d: Dataset) -> Dict[int, np.ndarray]:
    """Group impression indices by exact qualification mask.

    Buckets are keyed by mask in ascending order; members keep dataset order.
    """
    if len(d) == 0:
        return {}
    keys, inverse = np.unique(d.qual, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(np.bincount(inverse, minlength=len(keys)))[:-1]
    return {int(k): idx for k, idx in zip(keys, np.split(order, bounds))}


def split_train_eval(
    d: Dataset, eval_fraction: float, seed: int, strict: bool = False
) -> Tuple[Dataset, Dataset]:
    """Seeded split stratified by qualification bucket.

    Each bucket of size n contributes ``floor(n * eval_fraction + 0.5)``
    impressions to the evaluation side. Both halves keep dataset order.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, eval_idx = [], []
    for mask, members in partition_by_qualification(d).items():
        if strict and len(members) < 2:
            raise ValueError(f"qualification bucket {mask} has fewer than 2 impressions")
        n_eval = int(math.floor(len(members) * eval_fraction + 0.5))
        perm = rng.permutation(len(members))
        eval_idx.append(members[perm[:n_eval]])
        train_idx.append(members[perm[n_eval:]])
    if not train_idx:
        return d, d
    tr = np.sort(np.concatenate(train_idx))
    ev = np.sort(np.concatenate(eval_idx))
    return d.take(tr), d.take(ev)


class RankingPolicy(metaclass=ABCMeta):
    """Assigns one qualified signal per impression.

    ``assign`` is vectorised over rows: ``features`` has shape (n, d) and
    ``qual`` holds n bitmasks. Implementations must only return signals
    whose qualification bit is set.
    """

    #: whether assignments can change with listing features for a fixed mask
    feature_dependent = True

    @abstractmethod
    def assign(self, features: np.ndarray, qual: np.ndarray) -> np.ndarray:
        ...

    def assign_proba(self, features: np.ndarray, qual: np.ndarray, n_signals: int) -> np.ndarray:
        """Assignment distribution per row; one-hot for deterministic policies."""
        chosen = self.assign(features, qual)
        out = np.zeros((len(chosen), n_signals))
        out[np.arange(len(chosen)), chosen] = 1.0
        return out

    def assign_dataset(self, d: Dataset) -> np.ndarray:
        return np.asarray(self.assign(d.features, d.qual), dtype=np.int64)


class LoggedPolicy(RankingPolicy):
    """Replays the logged assignment; only meaningful on a dataset."""

    feature_dependent = False

    def assign(self, features, qual):
        raise TypeError("the logged policy is defined only through assign_dataset")

    def assign_dataset(self, d: Dataset) -> np.ndarray:
        return np.asarray(d.shown, dtype=np.int64)


def nth_qualified(indicators: np.ndarray, rank: np.ndarray) -> np.ndarray:
    """Id of the ``rank``-th (0-based) qualified signal in each row."""
    csum = np.cumsum(indicators, axis=1)
    return np.argmax(csum > np.asarray(rank)[:, None], axis=1).astype(np.int64)


@dataclass
class UniformRandomPolicy(RankingPolicy):
    """Uniformly random qualified signal, drawn from a seeded stream.

    Draws one uniform double per row in call order, so chunked calls over a
    dataset reproduce a single whole-dataset call.
    """

    n_signals: int
    seed: int = 0
    feature_dependent = False
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def assign(self, features, qual):
        ind = qual_matrix(qual, self.n_signals)
        counts = ind.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("impression with empty qualification set")
        u = self._rng.random(len(counts))
        rank = np.minimum((u * counts).astype(np.int64), counts - 1)
        return nth_qualified(ind, rank)

    def assign_proba(self, features, qual, n_signals):
        ind = qual_matrix(qual, n_signals).astype(float)
        return ind / ind.sum(axis=1, keepdims=True)


def check_assignments(d: Dataset, assigned: np.ndarray) -> None:
    """Raise if any assignment is outside the impression's qualification set."""
    assigned = np.asarray(assigned, dtype=np.int64)
    ok = (assigned >= 0) & (assigned < d.n_signals)
    ok &= ((d.qual >> np.where(ok, assigned, 0)) & 1) == 1
    if not ok.all():
        i = int(np.flatnonzero(~ok)[0])
        raise ValueError(
            f"policy assigned non-qualified signal {int(assigned[i])} "
            f"to impression {int(d.ids[i])}"
        )

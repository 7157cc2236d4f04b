"""Counterfactual conversion rate of a ranking policy on randomized logs.

Every estimate here is a function of one integer table: for each
(qualification mask z, model-assigned signal i, shown signal t) the number
of impressions and conversions. Tables merge by addition, so chunked or
parallel accumulation gives bit-identical results to a single pass.

For a model group V_i (impressions the policy assigns s_i) the estimate is

    P(Y=1 | do(T=s_i), V_i) = sum_z P(Y=1 | T=s_i, Z=z, V_i) * P(Z=z | V_i)

and the overall rate averages groups with weights |V_i| / N. With a single
mask this reduces to the matched-rows mean k(V_i & shown=s_i) / n(...).

When no impression with T=s_i exists in (z, V_i) the inner rate falls back
to the dataset-wide rate of s_i in cell z; when that is empty too, the
z-term is dropped, the group's Z-mixture renormalized and the dropped mass
reported as ``skipped_mass``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import Dataset, LoggedPolicy, RankingPolicy, UniformRandomPolicy, check_assignments


class AssignmentCounts:
    """Accumulates impression/conversion counts per (mask, assigned, shown)."""

    def __init__(self, n_signals: int):
        self.n_signals = n_signals
        self._index: Dict[int, int] = {}
        self._n = np.zeros((0, n_signals, n_signals), dtype=np.int64)
        self._k = np.zeros((0, n_signals, n_signals), dtype=np.int64)

    def update(self, qual, assigned, shown, y) -> "AssignmentCounts":
        K = self.n_signals
        qual = np.asarray(qual, dtype=np.int64)
        if len(qual) == 0:
            return self
        keys, inverse = np.unique(qual, return_inverse=True)
        new = [int(m) for m in keys if int(m) not in self._index]
        if new:
            for m in new:
                self._index[m] = len(self._index)
            pad = np.zeros((len(new), K, K), dtype=np.int64)
            self._n = np.concatenate([self._n, pad])
            self._k = np.concatenate([self._k, pad.copy()])
        rows = np.array([self._index[int(m)] for m in keys], dtype=np.int64)[inverse]
        flat = (rows * K + np.asarray(assigned, dtype=np.int64)) * K + np.asarray(shown, dtype=np.int64)
        size = self._n.size
        self._n += np.bincount(flat, minlength=size).reshape(self._n.shape)
        self._k += np.bincount(
            flat[np.asarray(y, dtype=bool)], minlength=size
        ).reshape(self._k.shape)
        return self

    def merge(self, other: "AssignmentCounts") -> "AssignmentCounts":
        masks, n, k = other.tables()
        for j, m in enumerate(masks):
            if int(m) not in self._index:
                self._index[int(m)] = len(self._index)
                pad = np.zeros((1, self.n_signals, self.n_signals), dtype=np.int64)
                self._n = np.concatenate([self._n, pad])
                self._k = np.concatenate([self._k, pad.copy()])
            self._n[self._index[int(m)]] += n[j]
            self._k[self._index[int(m)]] += k[j]
        return self

    def tables(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Masks in ascending order with their (Z, K, K) count tables."""
        masks = np.array(sorted(self._index), dtype=np.int64)
        order = np.array([self._index[int(m)] for m in masks], dtype=np.int64)
        if len(order) == 0:
            return masks, self._n.copy(), self._k.copy()
        return masks, self._n[order], self._k[order]

    @property
    def total(self) -> int:
        return int(self._n.sum())


@dataclass
class GroupEstimate:
    signal: int
    weight: float
    estimate: float
    n_assigned: int
    n_matched: int
    skipped_mass: float


@dataclass
class CounterfactualReport:
    c_hat: float
    logged_rate: float
    uplift_estimate: float
    per_group: List[GroupEstimate]
    skipped_mass: float
    stderr: float
    bootstrap_replicates: int
    seed: int
    n_impressions: int
    name: str = ""
    catalog: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        name = (lambda s: self.catalog[s]) if self.catalog else (lambda s: s)
        return {
            "name": self.name,
            "c_hat": self.c_hat,
            "logged_rate": self.logged_rate,
            "uplift_estimate": self.uplift_estimate,
            "skipped_mass": self.skipped_mass,
            "stderr": _json_number(self.stderr),
            "bootstrap_replicates": self.bootstrap_replicates,
            "seed": self.seed,
            "n_impressions": self.n_impressions,
            "per_group": [
                {
                    "signal": name(g.signal),
                    "weight": g.weight,
                    "estimate": _json_number(g.estimate),
                    "n_assigned": g.n_assigned,
                    "n_matched": g.n_matched,
                    "skipped_mass": g.skipped_mass,
                }
                for g in self.per_group
            ],
        }


def _json_number(x: float):
    # NaN marks "not estimable"; JSON has no NaN, so it becomes null
    return None if math.isnan(x) else x


def _diag(a: np.ndarray) -> np.ndarray:
    return np.einsum("...zii->...zi", a)


def _estimate_tables(n: np.ndarray, k: np.ndarray, ladder: bool):
    """Vectorised estimator over a leading batch axis.

    ``n``/``k`` have shape (B, Z, K, K) indexed [batch, mask, assigned, shown].
    Returns a dict of per-batch arrays; ``c_hat`` is NaN where no group is
    estimable.
    """
    N = n.sum(axis=(1, 2, 3)).astype(np.float64)
    n_zm = n.sum(axis=3)
    n_m = n_zm.sum(axis=1)
    nd, kd = _diag(n), _diag(k)
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(nd > 0, kd / np.maximum(nd, 1), np.nan)
        if ladder:
            n_zt, k_zt = n.sum(axis=2), k.sum(axis=2)
            wide = np.where(n_zt > 0, k_zt / np.maximum(n_zt, 1), np.nan)
            rate = np.where(nd > 0, rate, wide)
        estimable = ~np.isnan(rate)
        p_z = n_zm / np.maximum(n_m, 1)[:, None, :]
        used = (n_zm > 0) & estimable
        kept = np.where(used, p_z, 0.0).sum(axis=1)
        dropped = np.where((n_zm > 0) & ~estimable, p_z, 0.0).sum(axis=1)
        mix = np.where(used, p_z * np.nan_to_num(rate), 0.0).sum(axis=1)
        group = np.where(dropped > 0, mix / kept, mix)
        valid = (n_m > 0) & (kept > 0)
        group = np.where(valid, group, np.nan)
        weight = n_m / np.maximum(N, 1)[:, None]
        num = np.where(valid, weight * np.nan_to_num(group), 0.0).sum(axis=1)
        w_valid = np.where(valid, weight, 0.0).sum(axis=1)
        w_skip_whole = np.where((n_m > 0) & ~valid, weight, 0.0).sum(axis=1)
        c = np.where(w_skip_whole > 0, num / w_valid, num)
        c = np.where(valid.any(axis=1), c, np.nan)
        # rounding guard: the estimate is a convex combination of used cell rates
        used_rates = np.where(used, rate, np.nan)
        lo = np.nanmin(np.where(used.any(axis=(1, 2))[:, None, None], used_rates, 0.0), axis=(1, 2))
        hi = np.nanmax(np.where(used.any(axis=(1, 2))[:, None, None], used_rates, 0.0), axis=(1, 2))
        c = np.clip(c, lo, hi)
    skipped = (weight * np.where(valid, dropped, np.where(n_m > 0, 1.0, 0.0))).sum(axis=1)
    return {
        "c_hat": c,
        "logged_rate": k.sum(axis=(1, 2, 3)) / np.maximum(N, 1),
        "group": group,
        "weight": weight,
        "n_assigned": n_m,
        "n_matched": nd.sum(axis=1),
        "group_skipped": np.where(valid, dropped, np.where(n_m > 0, 1.0, 0.0)),
        "skipped_mass": np.minimum(skipped, 1.0),
        "N": N,
    }


def _bootstrap(n: np.ndarray, k: np.ndarray, replicates: int, seed: int, ladder: bool) -> float:
    """Standard deviation of the estimate over impression resamples.

    Because every estimate depends on the data only through the count table,
    resampling N impressions with replacement is exactly a multinomial draw
    of N over the (cell, outcome) atoms.
    """
    if replicates < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    total = int(n.sum())
    if total == 0:
        return float("nan")
    atoms = np.concatenate([k.ravel(), (n - k).ravel()])
    rng = np.random.default_rng(seed)
    draws = rng.multinomial(total, atoms / total, size=replicates)
    kb = draws[:, : k.size].reshape((replicates,) + k.shape)
    nb = kb + draws[:, k.size :].reshape((replicates,) + n.shape)
    c = _estimate_tables(nb, kb, ladder)["c_hat"]
    c = c[np.isfinite(c)]
    if len(c) < 2:
        return float("nan")
    return float(np.std(c, ddof=1))


def report_from_counts(
    counts: AssignmentCounts,
    ladder: bool = True,
    n_bootstrap: int = 200,
    seed: int = 0,
    name: str = "",
    catalog: Sequence[str] = (),
) -> CounterfactualReport:
    _, n, k = counts.tables()
    est = _estimate_tables(n[None], k[None], ladder)
    if not np.isfinite(est["c_hat"][0]):
        raise ValueError("no policy group is estimable on this dataset")
    stderr = _bootstrap(n, k, n_bootstrap, seed, ladder) if n_bootstrap else float("nan")
    groups = [
        GroupEstimate(
            signal=i,
            weight=float(est["weight"][0, i]),
            estimate=float(est["group"][0, i]),
            n_assigned=int(est["n_assigned"][0, i]),
            n_matched=int(est["n_matched"][0, i]),
            skipped_mass=float(est["group_skipped"][0, i]),
        )
        for i in range(counts.n_signals)
    ]
    c_hat = float(est["c_hat"][0])
    logged = float(est["logged_rate"][0])
    return CounterfactualReport(
        c_hat=c_hat,
        logged_rate=logged,
        uplift_estimate=c_hat - logged,
        per_group=groups,
        skipped_mass=float(est["skipped_mass"][0]),
        stderr=stderr,
        bootstrap_replicates=int(n_bootstrap),
        seed=int(seed),
        n_impressions=counts.total,
        name=name,
        catalog=tuple(catalog),
    )


PolicyLike = Union[RankingPolicy, np.ndarray]


def policy_assignments(d: Dataset, policy: PolicyLike) -> np.ndarray:
    if isinstance(policy, RankingPolicy):
        assigned = policy.assign_dataset(d)
    else:
        assigned = np.asarray(policy, dtype=np.int64)
        if assigned.shape != (len(d),):
            raise ValueError("assignment array must have one entry per impression")
    check_assignments(d, assigned)
    return assigned


def count_assignments(d: Dataset, policy: PolicyLike) -> AssignmentCounts:
    assigned = policy_assignments(d, policy)
    return AssignmentCounts(d.n_signals).update(d.qual, assigned, d.shown, d.y)


def estimate_simple(
    d: Dataset, policy: PolicyLike, n_bootstrap: int = 200, seed: int = 0
) -> CounterfactualReport:
    """Estimate for logs sharing a single qualification mask.

    Groups with no matched impressions are skipped and the remaining
    weights renormalized.
    """
    if len(np.unique(d.qual)) > 1:
        raise ValueError("dataset has several qualification masks; use estimate_adjusted")
    return report_from_counts(
        count_assignments(d, policy), ladder=False, n_bootstrap=n_bootstrap, seed=seed,
        catalog=d.catalog,
    )


def estimate_adjusted(
    d: Dataset, policy: PolicyLike, n_bootstrap: int = 200, seed: int = 0
) -> CounterfactualReport:
    """Estimate adjusting for the qualification mask as confounder."""
    return report_from_counts(
        count_assignments(d, policy), ladder=True, n_bootstrap=n_bootstrap, seed=seed,
        catalog=d.catalog,
    )


def bootstrap_stderr(d: Dataset, policy: PolicyLike, replicates: int = 200, seed: int = 0) -> float:
    _, n, k = count_assignments(d, policy).tables()
    return _bootstrap(n, k, replicates, seed, ladder=True)


def baseline_policies(n_signals: int, seed: int = 0) -> Dict[str, RankingPolicy]:
    return {"logged": LoggedPolicy(), "random": UniformRandomPolicy(n_signals, seed=seed)}


def compare_policies(
    d: Dataset,
    policies: Union[Mapping[str, PolicyLike], Iterable[Tuple[str, PolicyLike]]],
    n_bootstrap: int = 200,
    seed: int = 0,
) -> List[CounterfactualReport]:
    """Adjusted estimates for the logged and uniform-random baselines plus ``policies``."""
    items = list(policies.items()) if isinstance(policies, Mapping) else list(policies)
    named = list(baseline_policies(d.n_signals, seed).items())
    for name, _ in items:
        if name in ("logged", "random"):
            raise ValueError(f"policy name {name!r} is reserved for a baseline")
    reports = []
    for name, policy in named + items:
        rep = estimate_adjusted(d, policy, n_bootstrap=n_bootstrap, seed=seed)
        rep.name = name
        reports.append(rep)
    return reports

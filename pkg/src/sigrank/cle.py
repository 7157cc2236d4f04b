"""Conversion Likelihood Estimator.

Ranks the qualified signals of every qualification cell by their empirical
conversion rate, keeping an order only where adjacent differences pass a
Bonferroni-corrected two-proportion z-test.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Dataset, RankingPolicy, ids_from_mask


def two_proportion_z(k1: int, n1: int, k2: int, n2: int) -> Tuple[float, float]:
    """Pooled two-proportion z statistic and its two-sided p-value.

    A pooled rate of exactly 0 or 1 leaves the variance undefined; that case
    returns ``(0.0, 1.0)``.
    """
    if n1 <= 0 or n2 <= 0:
        raise ValueError("both samples must be non-empty")
    if not (0 <= k1 <= n1 and 0 <= k2 <= n2):
        raise ValueError("conversions must lie in [0, n]")
    pooled = (k1 + k2) / (n1 + n2)
    if pooled <= 0.0 or pooled >= 1.0:
        return 0.0, 1.0
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    z = (k1 / n1 - k2 / n2) / se
    return z, math.erfc(abs(z) / math.sqrt(2.0))


def z_test_power(p1: float, p2: float, n1: int, n2: int, alpha: float = 0.05) -> float:
    """Approximate power of the two-sided pooled z-test for true rates p1, p2."""
    from scipy.stats import norm

    pooled = (p1 * n1 + p2 * n2) / (n1 + n2)
    se0 = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    se1 = math.sqrt(p1 * (1 - p1) / n1 + p2 * (1 - p2) / n2)
    crit = norm.isf(alpha / 2) * se0
    delta = abs(p1 - p2)
    return float(norm.sf((crit - delta) / se1) + norm.cdf((-crit - delta) / se1))


@dataclass
class PairTest:
    higher: int
    lower: int
    z: float
    p_value: float
    p_adjusted: float
    significant: bool


@dataclass
class CellModel:
    mask: int
    signals: List[int]
    impressions: Dict[int, int]
    conversions: Dict[int, int]
    ranking: List[int]
    pairs: List[PairTest] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    def rate(self, s: int) -> float:
        n = self.impressions[s]
        return self.conversions[s] / n if n else float("nan")

    @property
    def significant(self) -> bool:
        """True when the top-ranked signal beats the runner-up significantly."""
        if "insufficient-data" in self.flags:
            return False
        return bool(self.pairs) and self.pairs[0].significant


def _rank_cell(
    mask: int,
    signals: List[int],
    n: np.ndarray,
    k: np.ndarray,
    alpha: float,
    min_cell_n: int,
    default_pos: Dict[int, int],
) -> CellModel:
    by_default = sorted(signals, key=default_pos.__getitem__)
    cell = CellModel(
        mask=mask,
        signals=list(signals),
        impressions={s: int(n[s]) for s in signals},
        conversions={s: int(k[s]) for s in signals},
        ranking=by_default,
    )
    if any(n[s] < min_cell_n or n[s] == 0 for s in signals):
        cell.flags.append("insufficient-data")
        return cell

    by_rate = sorted(signals, key=lambda s: (-k[s] / n[s], default_pos[s]))
    n_pairs = len(by_rate) - 1
    groups: List[List[int]] = [[by_rate[0]]]
    for hi, lo in zip(by_rate, by_rate[1:]):
        z, p = two_proportion_z(int(k[hi]), int(n[hi]), int(k[lo]), int(n[lo]))
        p_adj = min(1.0, p * n_pairs)
        sig = p_adj <= alpha
        cell.pairs.append(PairTest(hi, lo, z, p, p_adj, sig))
        if sig:
            groups.append([lo])
        else:
            groups[-1].append(lo)
    cell.ranking = [s for g in groups for s in sorted(g, key=default_pos.__getitem__)]
    if not all(pt.significant for pt in cell.pairs):
        cell.flags.append("tie")
    return cell


class CLERanker(BaseEstimator, RankingPolicy):
    """Per-qualification-set conversion-rate ranker.

    Parameters
    ----------
    alpha : float, default=0.05
        Family-wise significance level per cell (Bonferroni over adjacent pairs).
    min_cell_n : int, default=1000
        A cell falls back to ``default_order`` when any qualified signal has
        fewer impressions.
    default_order : sequence of int or None
        Production order used for ties, thin cells and unseen masks.
        ``None`` means catalog order.
    """

    feature_dependent = False

    def __init__(self, alpha: float = 0.05, min_cell_n: int = 1000, default_order=None):
        self.alpha = alpha
        self.min_cell_n = min_cell_n
        self.default_order = default_order

    def _default_order(self, n_signals: int) -> List[int]:
        if self.default_order is None:
            return list(range(n_signals))
        order = [int(s) for s in self.default_order]
        if sorted(order) != list(range(n_signals)):
            raise ValueError("default_order must be a permutation of the catalog ids")
        return order

    def fit(self, X: Dataset, y=None):
        """Fit on a :class:`Dataset`; ``y`` is ignored (the dataset target is used)."""
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        d = X
        K = d.n_signals
        order = self._default_order(K)
        default_pos = {s: i for i, s in enumerate(order)}
        masks, cell_idx = np.unique(d.qual, return_inverse=True)
        flat = cell_idx * K + d.shown
        n = np.bincount(flat, minlength=len(masks) * K).reshape(len(masks), K)
        k = np.bincount(flat, weights=d.y, minlength=len(masks) * K).reshape(len(masks), K)
        k = np.rint(k).astype(np.int64)
        self.cells_ = {}
        for j, m in enumerate(masks):
            m = int(m)
            self.cells_[m] = _rank_cell(
                m, ids_from_mask(m, K), n[j], k[j], self.alpha, self.min_cell_n, default_pos
            )
        self.catalog_ = tuple(d.catalog)
        self.n_signals_ = K
        self.default_order_ = order
        self.target_ = d.target
        self.top_ = {m: c.ranking[0] for m, c in self.cells_.items()}
        return self

    def ranking(self, mask: int) -> List[int]:
        check_is_fitted(self, "cells_")
        cell = self.cells_.get(int(mask))
        if cell is not None:
            return list(cell.ranking)
        return [s for s in self.default_order_ if (int(mask) >> s) & 1]

    def assign_with_flags(self, qual) -> Tuple[np.ndarray, np.ndarray]:
        """Top-ranked signal per row plus a boolean 'unseen-mask' flag."""
        check_is_fitted(self, "cells_")
        qual = np.asarray(qual, dtype=np.int64).reshape(-1)
        keys, inverse = np.unique(qual, return_inverse=True)
        choice = np.empty(len(keys), dtype=np.int64)
        unseen = np.zeros(len(keys), dtype=bool)
        for j, m in enumerate(keys):
            m = int(m)
            if m in self.top_:
                choice[j] = self.top_[m]
                continue
            unseen[j] = True
            fallback = self.ranking(m)
            if not fallback:
                raise ValueError(f"mask {m} qualifies no catalog signal")
            choice[j] = fallback[0]
        return choice[inverse], unseen[inverse]

    def assign(self, features, qual):
        return self.assign_with_flags(qual)[0]

    def predict(self, features, qual):
        return self.assign(features, qual)

    def to_dict(self) -> dict:
        check_is_fitted(self, "cells_")
        name = self.catalog_.__getitem__
        cells = []
        for m in sorted(self.cells_):
            c = self.cells_[m]
            cells.append(
                {
                    "mask": [name(s) for s in c.signals],
                    "ranking": [name(s) for s in c.ranking],
                    "stats": {
                        name(s): {
                            "impressions": c.impressions[s],
                            "conversions": c.conversions[s],
                            "rate": c.rate(s) if c.impressions[s] else None,
                        }
                        for s in c.signals
                    },
                    "pairs": [
                        {
                            "higher": name(p.higher),
                            "lower": name(p.lower),
                            "z": p.z,
                            "p_value": p.p_value,
                            "p_adjusted": p.p_adjusted,
                            "significant": p.significant,
                        }
                        for p in c.pairs
                    ],
                    "significant": c.significant,
                    "flags": list(c.flags),
                }
            )
        return {
            "model_type": "cle",
            "version": "1",
            "catalog": list(self.catalog_),
            "target": self.target_,
            "config": {
                "alpha": self.alpha,
                "min_cell_n": self.min_cell_n,
                "default_order": [name(s) for s in self.default_order_],
                "test": "two-proportion pooled z, two-sided, Bonferroni per cell",
            },
            "cells": cells,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CLERanker":
        if doc.get("model_type") != "cle":
            raise ValueError("not a CLE model document")
        if str(doc.get("version")) != "1":
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        catalog = tuple(doc["catalog"])
        index = {s: i for i, s in enumerate(catalog)}
        cfg = doc["config"]
        model = cls(
            alpha=cfg["alpha"],
            min_cell_n=cfg["min_cell_n"],
            default_order=[index[s] for s in cfg["default_order"]],
        )
        model.catalog_ = catalog
        model.n_signals_ = len(catalog)
        model.default_order_ = list(model.default_order)
        model.target_ = doc.get("target", "bbowac")
        model.cells_ = {}
        for c in doc["cells"]:
            signals = [index[s] for s in c["mask"]]
            m = sum(1 << s for s in signals)
            model.cells_[m] = CellModel(
                mask=m,
                signals=signals,
                impressions={index[s]: v["impressions"] for s, v in c["stats"].items()},
                conversions={index[s]: v["conversions"] for s, v in c["stats"].items()},
                ranking=[index[s] for s in c["ranking"]],
                pairs=[
                    PairTest(
                        index[p["higher"]],
                        index[p["lower"]],
                        p["z"],
                        p["p_value"],
                        p["p_adjusted"],
                        p["significant"],
                    )
                    for p in c["pairs"]
                ],
                flags=list(c["flags"]),
            )
        model.top_ = {m: c.ranking[0] for m, c in model.cells_.items()}
        return model


def fit_cle(
    d: Dataset,
    alpha: float = 0.05,
    min_cell_n: int = 1000,
    default_order: Optional[Sequence[int]] = None,
) -> CLERanker:
    return CLERanker(alpha=alpha, min_cell_n=min_cell_n, default_order=default_order).fit(d)


def cle_assign(model: CLERanker, qual: int) -> int:
    """Chosen signal for a single qualification mask."""
    return int(model.assign(None, np.array([qual]))[0])

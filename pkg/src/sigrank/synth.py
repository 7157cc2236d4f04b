"""Conditional-randomization simulator with known conversion probabilities.

Within each qualification set the shown signal is drawn uniformly, so the
logs carry no treatment-assignment confounding. A latent popularity score
moves both the listing features and the baseline conversion rate.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import (
    TARGETS,
    Dataset,
    RankingPolicy,
    ids_from_mask,
    mask_from_ids,
    nth_qualified,
    qual_matrix,
)

BLOCK_SIZE = 1 << 16
PROB_TOL = 1e-12

# 4 signals, 6 qualification cells of mixed size.
DEFAULT_MASKS: Tuple[Tuple[Tuple[int, ...], float], ...] = (
    ((0, 1), 1.0),
    ((0, 2), 1.0),
    ((1, 3), 1.0),
    ((2, 3), 1.0),
    ((0, 1, 2), 1.0),
    ((0, 1, 2, 3), 1.0),
)


def _block_rng(seed: int, stream: int) -> np.random.Generator:
    # counter-based stream per (seed, block); stream 0 is reserved for ground truth
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class SynthConfig:
    n_impressions: int = 200_000
    catalog_size: int = 4
    qualification_masks: Tuple[Tuple[Tuple[int, ...], float], ...] = DEFAULT_MASKS
    base_rate: float = 0.01
    uplift_scale: float = 0.01
    feature_dim: int = 4
    popularity_noise: float = 0.5
    popularity_effect: float = 0.004
    cell_base_spread: float = 0.5
    bin_or_bid_ratio: float = 0.5
    purchase_ratio: float = 0.5
    target: str = "bbowac"
    seed: int = 0

    def __post_init__(self):
        masks = tuple(
            (tuple(sorted(int(s) for s in ids)), float(w)) for ids, w in self.qualification_masks
        )
        object.__setattr__(self, "qualification_masks", masks)
        self.validate()

    def validate(self) -> None:
        if self.n_impressions <= 0:
            raise ValueError("n_impressions must be positive")
        if not 1 <= self.catalog_size <= 62:
            raise ValueError("catalog_size must be in [1, 62]")
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be non-negative")
        if not self.qualification_masks:
            raise ValueError("at least one qualification mask is required")
        weights = [w for _, w in self.qualification_masks]
        if any(w < 0 or not math.isfinite(w) for w in weights) or sum(weights) <= 0:
            raise ValueError("mask weights must be non-negative and not all zero")
        seen = set()
        for ids, _ in self.qualification_masks:
            if not ids or any(not 0 <= s < self.catalog_size for s in ids):
                raise ValueError(f"mask {ids} is empty or outside the catalog")
            if ids in seen:
                raise ValueError(f"mask {ids} listed twice")
            seen.add(ids)
        if min(self.base_rate, self.uplift_scale, self.popularity_effect, self.popularity_noise) < 0:
            raise ValueError("rates, uplift and popularity parameters must be non-negative")
        if not 0 <= self.cell_base_spread <= 1:
            raise ValueError("cell_base_spread must lie in [0, 1]")
        if self.base_rate * (1 + self.cell_base_spread) + self.uplift_scale > 1:
            raise ValueError("base_rate + max uplift exceeds 1")
        for r in (self.bin_or_bid_ratio, self.purchase_ratio):
            if not 0 <= r <= 1:
                raise ValueError("label ratios must lie in [0, 1]")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")

    @property
    def catalog(self) -> Tuple[str, ...]:
        return tuple(f"s{k + 1}" for k in range(self.catalog_size))

    @classmethod
    def small_uplift(cls, n_impressions: int = 1_000_000, seed: int = 0, **kw) -> "SynthConfig":
        """Single two-signal cell with order-1e-4 uplift."""
        kw.setdefault("catalog_size", 2)
        kw.setdefault("qualification_masks", (((0, 1), 1.0),))
        kw.setdefault("uplift_scale", 1e-4)
        return cls(n_impressions=n_impressions, seed=seed, **kw)


@dataclass
class GroundTruth:
    """True per-cell conversion probabilities of the active-label scale.

    ``cells`` maps a qualification bitmask to a length-K array holding
    p(z, s) for qualified s and NaN elsewhere, on the ``bbowac`` scale.
    """

    catalog: Tuple[str, ...]
    cells: Dict[int, np.ndarray]
    weights: Dict[int, float]
    quality_order: Tuple[int, ...]
    feature_loadings: np.ndarray
    popularity_noise: float
    popularity_effect: float
    label_ratios: Dict[str, float] = field(
        default_factory=lambda: {"bbowac": 1.0, "bin_or_bid": 0.5, "purchase": 0.25}
    )

    @property
    def n_signals(self) -> int:
        return len(self.catalog)

    @property
    def feature_dim(self) -> int:
        return len(self.feature_loadings)

    def probabilities(self, target: str = "bbowac") -> Dict[int, np.ndarray]:
        ratio = self.label_ratios[target]
        return {m: p * ratio for m, p in self.cells.items()}

    def p(self, mask: int, signal: int, target: str = "bbowac") -> float:
        value = self.cells[int(mask)][int(signal)] * self.label_ratios[target]
        if math.isnan(value):
            raise KeyError(f"signal {signal} is not qualified in mask {mask}")
        return float(value)

    def sample_contexts(self, n: int, seed: int, mask_weights=None):
        """Draw (features, qual, latent popularity) from the generating model."""
        weights = self.weights if mask_weights is None else mask_weights
        masks = np.array(sorted(weights), dtype=np.int64)
        w = np.array([weights[m] for m in masks], dtype=float)
        rng = _block_rng(seed, 0)
        qual = masks[rng.choice(len(masks), size=n, p=w / w.sum())]
        latent = rng.uniform(-1.0, 1.0, size=n)
        features = self._features(latent, rng)
        return features, qual, latent

    def _features(self, latent: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal((len(latent), self.feature_dim))
        return latent[:, None] * self.feature_loadings[None, :] + self.popularity_noise * noise

    def to_dict(self) -> dict:
        return {
            "catalog": list(self.catalog),
            "cells": [
                {
                    "mask": [self.catalog[k] for k in ids_from_mask(m, self.n_signals)],
                    "weight": self.weights.get(m, 0.0),
                    "p": {
                        self.catalog[k]: float(self.cells[m][k])
                        for k in ids_from_mask(m, self.n_signals)
                    },
                }
                for m in sorted(self.cells)
            ],
            "quality_order": [self.catalog[k] for k in self.quality_order],
            "feature_loadings": [float(v) for v in self.feature_loadings],
            "popularity_noise": self.popularity_noise,
            "popularity_effect": self.popularity_effect,
            "label_ratios": dict(self.label_ratios),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        catalog = tuple(doc["catalog"])
        index = {name: k for k, name in enumerate(catalog)}
        cells, weights = {}, {}
        for cell in doc["cells"]:
            m = mask_from_ids(index[s] for s in cell["mask"])
            p = np.full(len(catalog), np.nan)
            for name, v in cell["p"].items():
                p[index[name]] = v
            cells[m] = p
            weights[m] = float(cell["weight"])
        return cls(
            catalog=catalog,
            cells=cells,
            weights=weights,
            quality_order=tuple(index[s] for s in doc["quality_order"]),
            feature_loadings=np.asarray(doc["feature_loadings"], dtype=float),
            popularity_noise=float(doc["popularity_noise"]),
            popularity_effect=float(doc["popularity_effect"]),
            label_ratios=dict(doc["label_ratios"]),
        )

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_ground_truth(cfg: SynthConfig) -> GroundTruth:
    """Draw cell baselines, the global signal quality order and feature loadings.

    In each cell the best qualified signal (by global quality) gets
    ``uplift_scale`` on top of the cell baseline; the rest share the baseline.
    """
    rng = _block_rng(cfg.seed, 0)
    K = cfg.catalog_size
    quality_order = tuple(int(k) for k in rng.permutation(K))
    rank = {s: r for r, s in enumerate(quality_order)}
    total = sum(w for _, w in cfg.qualification_masks)
    cells, weights = {}, {}
    for ids, w in cfg.qualification_masks:
        m = mask_from_ids(ids)
        base = cfg.base_rate * (1.0 + cfg.cell_base_spread * rng.uniform(-1.0, 1.0))
        p = np.full(K, np.nan)
        p[list(ids)] = base
        p[min(ids, key=rank.__getitem__)] += cfg.uplift_scale
        lo = base - cfg.popularity_effect
        hi = base + cfg.uplift_scale + cfg.popularity_effect
        if lo < -PROB_TOL or hi > 1 + PROB_TOL:
            raise ValueError(
                f"effective conversion probability for mask {ids} spans [{lo}, {hi}], outside [0, 1]"
            )
        cells[m] = p
        weights[m] = w / total
    n_engaged = (cfg.feature_dim + 1) // 2
    loadings = np.zeros(cfg.feature_dim)
    loadings[:n_engaged] = rng.uniform(0.5, 1.5, size=n_engaged)
    ratios = {
        "bbowac": 1.0,
        "bin_or_bid": cfg.bin_or_bid_ratio,
        "purchase": cfg.bin_or_bid_ratio * cfg.purchase_ratio,
    }
    return GroundTruth(
        catalog=cfg.catalog,
        cells=cells,
        weights=weights,
        quality_order=quality_order,
        feature_loadings=loadings,
        popularity_noise=cfg.popularity_noise,
        popularity_effect=cfg.popularity_effect,
        label_ratios=ratios,
    )


def generate(cfg: SynthConfig) -> Tuple[Dataset, GroundTruth]:
    """Simulate ``cfg.n_impressions`` conditionally randomized impressions."""
    gt = make_ground_truth(cfg)
    K = cfg.catalog_size
    masks = np.array(sorted(gt.cells), dtype=np.int64)
    w = np.array([gt.weights[m] for m in masks])
    w = w / w.sum()
    p_table = np.stack([gt.cells[m] for m in masks])
    ratio_bob = cfg.bin_or_bid_ratio
    ratio_pur = cfg.bin_or_bid_ratio * cfg.purchase_ratio

    parts = []
    n = cfg.n_impressions
    for block, start in enumerate(range(0, n, BLOCK_SIZE)):
        size = min(BLOCK_SIZE, n - start)
        rng = _block_rng(cfg.seed, block + 1)
        cell = rng.choice(len(masks), size=size, p=w)
        qual = masks[cell]
        ind = qual_matrix(qual, K)
        counts = ind.sum(axis=1)
        rank = np.minimum((rng.random(size) * counts).astype(np.int64), counts - 1)
        shown = nth_qualified(ind, rank)
        latent = rng.uniform(-1.0, 1.0, size=size)
        features = gt._features(latent, rng)
        prob = p_table[cell, shown] + cfg.popularity_effect * latent
        prob = np.clip(prob, 0.0, 1.0)
        v = rng.random(size)
        parts.append((qual, shown, features, v < prob, v < prob * ratio_bob, v < prob * ratio_pur))

    cols = list(zip(*parts))
    d = Dataset(
        ids=np.arange(n, dtype=np.uint64),
        features=np.concatenate(cols[2]),
        qual=np.concatenate(cols[0]),
        shown=np.concatenate(cols[1]),
        bbowac=np.concatenate(cols[3]),
        bin_or_bid=np.concatenate(cols[4]),
        purchase=np.concatenate(cols[5]),
        catalog=cfg.catalog,
        feature_dim=cfg.feature_dim,
        target=cfg.target,
    )
    return d, gt


class OraclePolicy(RankingPolicy):
    """Picks the true best qualified signal per cell; ties go to the lowest id."""

    feature_dependent = False

    def __init__(self, gt: GroundTruth):
        self.gt = gt
        self.table = {
            m: int(np.argmax(np.where(np.isnan(p), -np.inf, p))) for m, p in gt.cells.items()
        }

    def assign(self, features, qual):
        qual = np.asarray(qual, dtype=np.int64)
        keys, inverse = np.unique(qual, return_inverse=True)
        try:
            choice = np.array([self.table[int(k)] for k in keys], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"mask {exc.args[0]} is not a ground-truth cell") from None
        return choice[inverse]


def oracle_policy(gt: GroundTruth) -> OraclePolicy:
    return OraclePolicy(gt)


def true_value(
    policy: RankingPolicy,
    gt: GroundTruth,
    mask_weights: Optional[Dict[int, float]] = None,
    target: str = "bbowac",
    n_samples: int = 200_000,
    seed: int = 0,
    return_stderr: bool = False,
):
    """Expected conversion rate of ``policy`` under the generating model.

    Feature-independent policies are evaluated exactly on a zero feature
    vector per cell. Otherwise the value is a Monte-Carlo average over
    ``n_samples`` simulated contexts, with its standard error.
    The popularity term has zero mean and drops out of the expectation.
    """
    weights = gt.weights if mask_weights is None else mask_weights
    probs = gt.probabilities(target)
    K = gt.n_signals
    if not getattr(policy, "feature_dependent", True):
        masks = sorted(m for m, wt in weights.items() if wt > 0)
        qual = np.array(masks, dtype=np.int64)
        pi = policy.assign_proba(np.zeros((len(masks), gt.feature_dim)), qual, K)
        total = sum(weights[m] for m in masks)
        terms = [
            weights[m] / total * float(np.nansum(np.where(pi[j] > 0, probs[m], 0.0) * pi[j]))
            for j, m in enumerate(masks)
        ]
        value = math.fsum(terms)
        return (value, 0.0) if return_stderr else value

    features, qual, _ = gt.sample_contexts(n_samples, seed, weights)
    pi = policy.assign_proba(features, qual, K)
    masks = np.array(sorted(probs), dtype=np.int64)
    table = np.nan_to_num(np.stack([probs[m] for m in masks]))
    rows = table[np.searchsorted(masks, qual)]
    per_row = (pi * rows).sum(axis=1)
    value = float(per_row.mean())
    stderr = float(per_row.std(ddof=1) / math.sqrt(n_samples))
    return (value, stderr) if return_stderr else value


def config_to_dict(cfg: SynthConfig) -> dict:
    out = asdict(cfg)
    out["qualification_masks"] = [[list(ids), w] for ids, w in cfg.qualification_masks]
    return out

"""``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys are rejected.
``masks`` uses ``name,name:weight`` entries separated by ``;``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Tuple

from .core import TARGETS
from .synth import DEFAULT_MASKS, SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    target: Optional[str] = None
    # CLE
    alpha: float = 0.05
    min_cell_n: int = 1000
    default_order: Optional[Tuple[str, ...]] = None
    # retrospective learner
    retro_epochs: int = 50
    retro_learning_rate: float = 0.5
    retro_l2: float = 1e-4
    retro_batch_size: int = 256
    # evaluation
    bootstrap_replicates: int = 200
    # simulator
    n_impressions: int = 200_000
    catalog_size: int = 4
    masks: Optional[str] = None
    base_rate: float = 0.01
    uplift_scale: float = 0.01
    feature_dim: int = 4
    popularity_noise: float = 0.5
    popularity_effect: float = 0.004
    cell_base_spread: float = 0.5
    bin_or_bid_ratio: float = 0.5
    purchase_ratio: float = 0.5
    # paths
    dataset: Optional[str] = None
    ground_truth: Optional[str] = None
    report: Optional[str] = None

    def synth_config(self) -> SynthConfig:
        catalog = [f"s{k + 1}" for k in range(self.catalog_size)]
        masks = DEFAULT_MASKS if self.masks is None else parse_masks(self.masks, catalog)
        return SynthConfig(
            n_impressions=self.n_impressions,
            catalog_size=self.catalog_size,
            qualification_masks=masks,
            base_rate=self.base_rate,
            uplift_scale=self.uplift_scale,
            feature_dim=self.feature_dim,
            popularity_noise=self.popularity_noise,
            popularity_effect=self.popularity_effect,
            cell_base_spread=self.cell_base_spread,
            bin_or_bid_ratio=self.bin_or_bid_ratio,
            purchase_ratio=self.purchase_ratio,
            target=self.target or "bbowac",
            seed=self.seed,
        )

    def default_order_ids(self, catalog):
        if self.default_order is None:
            return None
        index = {name: k for k, name in enumerate(catalog)}
        try:
            order = [index[name] for name in self.default_order]
        except KeyError as exc:
            raise ConfigError(f"default_order names unknown signal {exc.args[0]!r}") from None
        if sorted(order) != list(range(len(catalog))):
            raise ConfigError("default_order must list every catalog signal exactly once")
        return order


def parse_masks(text: str, catalog):
    index = {name: k for k, name in enumerate(catalog)}
    out = []
    for entry in filter(None, (e.strip() for e in text.split(";"))):
        names, _, weight = entry.partition(":")
        try:
            ids = tuple(index[n.strip()] for n in names.split(","))
            out.append((ids, float(weight) if weight else 1.0))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad mask entry {entry!r}: {exc}") from None
    if not out:
        raise ConfigError("masks must list at least one entry")
    return tuple(out)


def _convert(name: str, raw: str, annotation):
    if annotation in ("int",):
        return int(raw)
    if annotation in ("float",):
        return float(raw)
    if name == "default_order":
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"config line {lineno}: expected key = value")
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, types[key])
        except ValueError:
            raise ConfigError(f"config line {lineno}: bad value for {key}: {raw!r}") from None
    cfg = RunConfig(**values)
    if cfg.target is not None and cfg.target not in TARGETS:
        raise ConfigError(f"target must be one of {TARGETS}")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())

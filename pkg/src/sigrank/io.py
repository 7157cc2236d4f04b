"""NDJSON impression logs and JSON model files.

A dataset file starts with a header line ``{"catalog": [...], "feature_dim": n}``
followed by one record per impression::

    {"id": 7, "features": [0.1, 2.0], "qual": ["s1", "s3"], "shown": "s3",
     "bbowac": 1, "bin_or_bid": 0, "purchase": 0}
"""
from __future__ import annotations

import json
import math
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .cle import CLERanker
from .core import TARGETS, Dataset, validate_dataset
from .retro import RetrospectiveRanker

DEFAULT_CHUNK = 1 << 16
_LABELS = ("bbowac", "bin_or_bid", "purchase")


class DataFormatError(ValueError):
    """Malformed or inconsistent input data."""


def _label(value, key: str, lineno: int) -> bool:
    if value in (0, 1) and not isinstance(value, float):
        return bool(value)
    raise DataFormatError(f"line {lineno}: {key!r} must be 0 or 1")


class RecordParser:
    """Turns wire records into dense columns for one catalog."""

    def __init__(self, catalog: Sequence[str], feature_dim: int, strict: bool = True):
        self.catalog = tuple(catalog)
        self.index = {name: k for k, name in enumerate(self.catalog)}
        self.feature_dim = int(feature_dim)
        self.strict = strict

    def signal(self, name, lineno: int) -> int:
        try:
            return self.index[name]
        except (KeyError, TypeError):
            raise DataFormatError(
                f"line {lineno}: signal {name!r} is not in the catalog {list(self.catalog)}"
            ) from None

    def parse(self, rec: dict, lineno: int, need_outcome: bool = True):
        if not isinstance(rec, dict):
            raise DataFormatError(f"line {lineno}: record must be a JSON object")
        try:
            features = rec["features"]
            qual_names = rec["qual"]
        except KeyError as exc:
            raise DataFormatError(f"line {lineno}: missing field {exc.args[0]!r}") from None
        if not isinstance(features, list) or len(features) != self.feature_dim:
            raise DataFormatError(
                f"line {lineno}: expected {self.feature_dim} features, got "
                f"{len(features) if isinstance(features, list) else type(features).__name__}"
            )
        if not isinstance(qual_names, list):
            raise DataFormatError(f"line {lineno}: 'qual' must be a list of signal names")
        qual = 0
        for name in qual_names:
            qual |= 1 << self.signal(name, lineno)
        if self.strict and qual == 0:
            raise DataFormatError(f"line {lineno}: empty qualification set")
        if self.strict and not all(isinstance(v, (int, float)) and math.isfinite(v) for v in features):
            raise DataFormatError(f"line {lineno}: features must be finite numbers")
        if not need_outcome:
            return features, qual
        try:
            rid = rec["id"]
            shown = self.signal(rec["shown"], lineno)
            labels = [_label(rec[key], key, lineno) for key in _LABELS]
        except KeyError as exc:
            raise DataFormatError(f"line {lineno}: missing field {exc.args[0]!r}") from None
        if not isinstance(rid, int) or not 0 <= rid < 2**64:
            raise DataFormatError(f"line {lineno}: 'id' must be an unsigned 64-bit integer")
        if self.strict:
            if not (qual >> shown) & 1:
                raise DataFormatError(
                    f"line {lineno}: shown signal {rec['shown']!r} is not in 'qual'"
                )
            bbowac, bob, purchase = labels
            if (purchase and not bob) or (bob and not bbowac):
                raise DataFormatError(
                    f"line {lineno}: labels violate purchase => bin_or_bid => bbowac"
                )
        return rid, features, qual, shown, labels


def _parse_header(line: str, lineno: int = 1) -> Tuple[Tuple[str, ...], int, str]:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"line {lineno}: invalid header JSON ({exc.msg})") from None
    if not isinstance(header, dict) or "catalog" not in header or "feature_dim" not in header:
        raise DataFormatError("missing dataset header line with 'catalog' and 'feature_dim'")
    catalog = header["catalog"]
    if not isinstance(catalog, list) or not catalog or not all(isinstance(c, str) for c in catalog):
        raise DataFormatError("header 'catalog' must be a non-empty list of names")
    if len(set(catalog)) != len(catalog) or len(catalog) > 62:
        raise DataFormatError("header 'catalog' must hold at most 62 unique names")
    dim = header["feature_dim"]
    if not isinstance(dim, int) or dim < 0:
        raise DataFormatError("header 'feature_dim' must be a non-negative integer")
    target = header.get("target", "bbowac")
    if target not in TARGETS:
        raise DataFormatError(f"header 'target' must be one of {TARGETS}")
    return tuple(catalog), dim, target


class DatasetReader:
    """Streams a dataset file as :class:`Dataset` chunks.

    Only the current chunk is held in memory. A malformed line raises
    :class:`DataFormatError` naming its line number.
    """

    def __init__(self, path, strict: bool = True, chunk_size: int = DEFAULT_CHUNK, target=None):
        self.path = path
        self.strict = strict
        self.chunk_size = chunk_size
        with open(path) as fh:
            first = fh.readline()
        if not first.strip():
            raise DataFormatError("missing dataset header line")
        self.catalog, self.feature_dim, header_target = _parse_header(first)
        self.target = target or header_target
        if self.target not in TARGETS:
            raise DataFormatError(f"unknown target {self.target!r}")

    def _build(self, cols) -> Dataset:
        ids, feats, qual, shown, labels = cols
        lab = np.array(labels, dtype=bool).reshape(-1, 3)
        return Dataset(
            ids=np.array(ids, dtype=np.uint64),
            features=np.array(feats, dtype=np.float64).reshape(len(ids), self.feature_dim),
            qual=np.array(qual, dtype=np.int64),
            shown=np.array(shown, dtype=np.int64),
            bbowac=lab[:, 0],
            bin_or_bid=lab[:, 1],
            purchase=lab[:, 2],
            catalog=self.catalog,
            feature_dim=self.feature_dim,
            target=self.target,
        )

    def __iter__(self) -> Iterator[Dataset]:
        parser = RecordParser(self.catalog, self.feature_dim, self.strict)
        loads = json.loads
        cols: Tuple[list, ...] = ([], [], [], [], [])
        with open(self.path) as fh:
            fh.readline()
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    rec = loads(line)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from None
                rid, features, qual, shown, labels = parser.parse(rec, lineno)
                cols[0].append(rid)
                cols[1].append(features)
                cols[2].append(qual)
                cols[3].append(shown)
                cols[4].append(labels)
                if len(cols[0]) >= self.chunk_size:
                    yield self._build(cols)
                    cols = ([], [], [], [], [])
        if cols[0]:
            yield self._build(cols)


def read_dataset(path, strict: bool = True, target: Optional[str] = None) -> Dataset:
    """Load a whole dataset file. Strict mode also rejects invariant violations."""
    reader = DatasetReader(path, strict=strict, target=target)
    chunks: List[Dataset] = list(reader)
    if not chunks:
        return Dataset(
            ids=[], features=np.zeros((0, reader.feature_dim)), qual=[], shown=[],
            bbowac=[], bin_or_bid=[], purchase=[], catalog=reader.catalog,
            feature_dim=reader.feature_dim, target=reader.target,
        )
    d = chunks[0] if len(chunks) == 1 else Dataset(
        ids=np.concatenate([c.ids for c in chunks]),
        features=np.concatenate([c.features for c in chunks]),
        qual=np.concatenate([c.qual for c in chunks]),
        shown=np.concatenate([c.shown for c in chunks]),
        bbowac=np.concatenate([c.bbowac for c in chunks]),
        bin_or_bid=np.concatenate([c.bin_or_bid for c in chunks]),
        purchase=np.concatenate([c.purchase for c in chunks]),
        catalog=reader.catalog,
        feature_dim=reader.feature_dim,
        target=reader.target,
    )
    if strict:
        violations = validate_dataset(d)
        if violations:
            v = violations[0]
            raise DataFormatError(f"impression {v.impression_id}: {v.rule}")
    return d


def write_dataset(d: Dataset, path) -> None:
    names = d.catalog
    K = d.n_signals
    with open(path, "w") as fh:
        header = {"catalog": list(names), "feature_dim": d.feature_dim, "target": d.target}
        fh.write(json.dumps(header) + "\n")
        dumps = json.dumps
        for i in range(len(d)):
            q = int(d.qual[i])
            rec = {
                "id": int(d.ids[i]),
                "features": d.features[i].tolist(),
                "qual": [names[k] for k in range(K) if (q >> k) & 1],
                "shown": names[int(d.shown[i])],
                "bbowac": int(d.bbowac[i]),
                "bin_or_bid": int(d.bin_or_bid[i]),
                "purchase": int(d.purchase[i]),
            }
            fh.write(dumps(rec, separators=(",", ":")) + "\n")


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path):
    """Load a CLE or retro model file by its ``model_type``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid model JSON ({exc.msg})") from None
    kind = doc.get("model_type") if isinstance(doc, dict) else None
    try:
        if kind == "cle":
            return CLERanker.from_dict(doc)
        if kind == "retro":
            return RetrospectiveRanker.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: malformed {kind} model ({exc})") from None
    raise DataFormatError(f"{path}: unknown model_type {kind!r}")

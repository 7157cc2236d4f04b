import numpy as np
import pytest

from sigrank.core import Dataset


def make_dataset(qual, shown, y, features=None, catalog=None, feature_dim=None):
    """Small dataset with bbowac as the only (monotone) label."""
    qual = np.asarray(qual, dtype=np.int64)
    n = len(qual)
    K = int(max(int(q).bit_length() for q in qual)) if n else 2
    catalog = catalog or [f"s{k + 1}" for k in range(K)]
    if features is None:
        features = np.zeros((n, feature_dim or 0))
    y = np.asarray(y, dtype=bool)
    return Dataset(
        ids=np.arange(n),
        features=features,
        qual=qual,
        shown=shown,
        bbowac=y,
        bin_or_bid=np.zeros(n, bool),
        purchase=np.zeros(n, bool),
        catalog=catalog,
        feature_dim=np.asarray(features).shape[1] if n else (feature_dim or 0),
    )


@pytest.fixture
def worked_eight():
    """Two signals, both always qualified; s1 shown to 1-4, s2 to 5-8.

    The model assigns s1 to {1, 2, 5, 6} and s2 to {3, 4, 7, 8}.
    """
    d = make_dataset(
        qual=[0b11] * 8,
        shown=[0, 0, 0, 0, 1, 1, 1, 1],
        y=[1, 1, 0, 0, 1, 0, 0, 0],
    )
    model = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    return d, model


def random_dataset(rng, n, n_signals=3, n_masks=3, single_mask=False, feature_dim=2):
    """Randomized log with random masks and per-(mask, signal) rates."""
    all_masks = np.arange(1, 1 << n_signals)
    if single_mask:
        masks = rng.choice(all_masks[np.array([bin(m).count("1") >= 2 for m in all_masks])], 1)
    else:
        masks = rng.choice(all_masks, size=min(n_masks, len(all_masks)), replace=False)
    qual = rng.choice(masks, size=n)
    shown = np.empty(n, dtype=np.int64)
    for i, q in enumerate(qual):
        shown[i] = rng.choice([k for k in range(n_signals) if (q >> k) & 1])
    rates = rng.uniform(0, 1, size=(1 << n_signals, n_signals))
    y = rng.random(n) < rates[qual, shown]
    return make_dataset(
        qual, shown, y,
        features=rng.normal(size=(n, feature_dim)),
        catalog=[f"s{k + 1}" for k in range(n_signals)],
    )


def random_assignment(rng, d):
    out = np.empty(len(d), dtype=np.int64)
    for i, q in enumerate(d.qual):
        out[i] = rng.choice([k for k in range(d.n_signals) if (int(q) >> k) & 1])
    return out


def brute_force_adjusted(d, assigned, ladder=True):
    """Literal set-based evaluation of the adjustment estimator.

    Returns (c_hat, skipped_mass). Written with Python sets and loops to stay
    independent of the count-table implementation.
    """
    N = len(d)
    idx = range(N)
    y = [bool(v) for v in d.y]
    shown = [int(v) for v in d.shown]
    qual = [int(v) for v in d.qual]
    assigned = [int(v) for v in assigned]
    groups, weights, skipped = {}, {}, 0.0
    for i in sorted(set(assigned)):
        V_M = {u for u in idx if assigned[u] == i}
        w = len(V_M) / N
        terms, kept, dropped = [], 0.0, 0.0
        for z in sorted({qual[u] for u in V_M}):
            in_z = {u for u in V_M if qual[u] == z}
            p_z = len(in_z) / len(V_M)
            matched = [u for u in in_z if shown[u] == i]
            if not matched and ladder:
                matched = [u for u in idx if qual[u] == z and shown[u] == i]
            if not matched:
                dropped += p_z
                continue
            terms.append(p_z * sum(y[u] for u in matched) / len(matched))
            kept += p_z
        if kept == 0:
            skipped += w
            continue
        groups[i] = sum(terms) / kept if dropped else sum(terms)
        weights[i] = w
        skipped += w * dropped
    total_w = sum(weights.values())
    c = sum(weights[i] * groups[i] for i in groups)
    if total_w < 1 - 1e-12:
        c /= total_w
    return c, skipped


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")

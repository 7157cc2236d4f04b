import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from statsmodels.stats.proportion import proportions_ztest

from sigrank.cle import CLERanker, cle_assign, fit_cle, two_proportion_z
from sigrank.synth import SynthConfig, generate, oracle_policy

from .conftest import make_dataset


def counts_dataset(cells, n_signals=3):
    """Dataset with exact conversions: {mask: {signal: (k, n)}}."""
    qual, shown, y = [], [], []
    for mask, per_signal in cells.items():
        for s, (k, n) in per_signal.items():
            qual += [mask] * n
            shown += [s] * n
            y += [1] * k + [0] * (n - k)
    return make_dataset(qual, shown, y, catalog=[f"s{i + 1}" for i in range(n_signals)])


def test_z_matches_hand_computation():
    pooled = 40 / 2000
    se = math.sqrt(pooled * (1 - pooled) * (1 / 1000 + 1 / 1000))
    z, p = two_proportion_z(30, 1000, 10, 1000)
    assert z == pytest.approx(0.02 / se, rel=1e-12)
    assert z == pytest.approx(3.194, abs=0.01)
    assert p == pytest.approx(0.0014, abs=0.0005)


@pytest.mark.parametrize("k1,n1,k2,n2", [(30, 1000, 10, 1000), (11, 1000, 10, 1000),
                                         (5, 80, 19, 120), (400, 5000, 350, 4100)])
def test_z_agrees_with_statsmodels(k1, n1, k2, n2):
    z_ref, p_ref = proportions_ztest([k1, k2], [n1, n2])
    z, p = two_proportion_z(k1, n1, k2, n2)
    assert z == pytest.approx(z_ref, rel=1e-12)
    assert p == pytest.approx(p_ref, rel=1e-9)


def test_z_symmetric_and_degenerate():
    assert two_proportion_z(17, 300, 17, 300) == (0.0, 1.0)
    assert two_proportion_z(0, 100, 0, 100) == (0.0, 1.0)
    assert two_proportion_z(100, 100, 50, 50) == (0.0, 1.0)
    with pytest.raises(ValueError):
        two_proportion_z(1, 0, 1, 10)


@pytest.mark.parametrize("z", [0.01, 0.5, 1.96, 3.194, 6.0, 12.0, 30.0])
def test_p_value_relative_error(z):
    mpmath.mp.dps = 40
    exact = mpmath.erfc(mpmath.mpf(z) / mpmath.sqrt(2))
    got = math.erfc(z / math.sqrt(2.0))
    assert abs(got - float(exact)) / float(exact) < 1e-10


def test_significant_cell_is_ranked_by_rate():
    d = counts_dataset({0b11: {0: (30, 1000), 1: (10, 1000)}}, n_signals=2)
    m = fit_cle(d, alpha=0.05, min_cell_n=1000)
    cell = m.cells_[0b11]
    assert cell.ranking == [0, 1]
    assert cell.significant
    assert cell.flags == []


def test_non_significant_cell_uses_default_order():
    d = counts_dataset({0b11: {0: (11, 1000), 1: (10, 1000)}}, n_signals=2)
    m = fit_cle(d, alpha=0.05, min_cell_n=100, default_order=[1, 0])
    cell = m.cells_[0b11]
    assert cell.pairs[0].z == pytest.approx(0.22, abs=0.01)
    assert cell.pairs[0].p_value == pytest.approx(0.82, abs=0.01)
    assert cell.ranking == [1, 0]
    assert not cell.significant
    assert "tie" in cell.flags


def test_thin_cell_falls_back():
    d = counts_dataset({0b111: {0: (5, 50), 1: (1, 50)}})
    m = fit_cle(d, min_cell_n=1, default_order=[2, 0, 1])
    cell = m.cells_[0b111]
    assert cell.flags == ["insufficient-data"]
    assert cell.ranking == [2, 0, 1]
    assert cle_assign(m, 0b111) == 2


def test_bonferroni_counts_adjacent_pairs():
    # raw p ~ 0.04 passes alpha=0.05 alone but not after doubling for two pairs
    k1, k2 = 130, 100
    z, p = two_proportion_z(k1, 2000, k2, 2000)
    assert 0.025 < p < 0.05
    d = counts_dataset({0b111: {0: (k2, 2000), 1: (k1, 2000), 2: (10, 2000)}})
    cell = fit_cle(d, min_cell_n=10, default_order=[0, 1, 2]).cells_[0b111]
    assert cell.pairs[0].p_adjusted == pytest.approx(2 * p)
    assert not cell.pairs[0].significant
    assert cell.pairs[1].significant
    # s2 and s1 tie, ordered by default; s3 significantly last
    assert cell.ranking == [0, 1, 2]


def test_assign_lookup_and_unseen_mask():
    d = counts_dataset({0b011: {0: (10, 1000), 1: (40, 1000)}})
    m = fit_cle(d, min_cell_n=100, default_order=[0, 1, 2])
    assert m.ranking(0b011) == [1, 0]
    assert cle_assign(m, 0b011) == 1
    choice, unseen = m.assign_with_flags([0b100, 0b011])
    assert choice.tolist() == [2, 1]
    assert unseen.tolist() == [True, False]


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 200), st.integers(1, 200)), min_size=2, max_size=5),
    st.floats(0.001, 0.5),
)
def test_ranking_is_permutation_and_exact_when_all_significant(stats, alpha):
    K = len(stats)
    cell = {s: (min(k, n), n) for s, (k, n) in enumerate(stats)}
    d = counts_dataset({(1 << K) - 1: cell}, n_signals=K)
    m = fit_cle(d, alpha=alpha, min_cell_n=1)
    c = m.cells_[(1 << K) - 1]
    assert sorted(c.ranking) == list(range(K))
    qual = np.full(4, (1 << K) - 1)
    assert all((q >> s) & 1 for q, s in zip(qual, m.assign(None, qual)))
    if all(p.significant for p in c.pairs):
        rates = [cell[s][0] / cell[s][1] for s in c.ranking]
        assert rates == sorted(rates, reverse=True)


def test_fit_is_deterministic_and_sklearn_compatible():
    d, _ = generate(SynthConfig(n_impressions=30_000, seed=1))
    a = CLERanker(alpha=0.01, min_cell_n=50).fit(d)
    b = clone(a).fit(d)
    assert a.get_params() == {"alpha": 0.01, "min_cell_n": 50, "default_order": None}
    assert a.to_dict() == b.to_dict()


def test_model_dict_roundtrip():
    d, _ = generate(SynthConfig(n_impressions=30_000, seed=2))
    m = fit_cle(d, min_cell_n=100, default_order=[3, 2, 1, 0])
    back = CLERanker.from_dict(m.to_dict())
    assert back.to_dict() == m.to_dict()
    assert np.array_equal(back.assign(None, d.qual), m.assign(None, d.qual))


@pytest.mark.slow
def test_consistency_recovers_argmax_with_enough_data():
    # 6 cells x 5e4 impressions, 1e-2 uplift
    hits = 0
    for seed in range(20):
        d, gt = generate(SynthConfig(n_impressions=300_000, seed=100 + seed))
        m = fit_cle(d)
        orc = oracle_policy(gt)
        hits += all(m.top_[z] == orc.table[z] for z in gt.cells)
    assert hits >= 19

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigrank.core import (
    ConversionLabels,
    Dataset,
    Impression,
    LoggedPolicy,
    UniformRandomPolicy,
    check_assignments,
    ids_from_mask,
    mask_from_ids,
    partition_by_qualification,
    split_train_eval,
    validate_dataset,
)
from sigrank.synth import SynthConfig, generate

from .conftest import make_dataset


def test_mask_roundtrip():
    assert mask_from_ids([0, 2]) == 0b101
    assert ids_from_mask(0b1011, 4) == [0, 1, 3]


def test_empty_dataset_has_no_violations():
    d = make_dataset([], [], [], feature_dim=2)
    assert len(d) == 0
    assert validate_dataset(d) == []


def test_shown_not_qualified_is_reported():
    d = make_dataset([0b01, 0b11], [1, 1], [0, 1])
    assert validate_dataset(d) == [(0, "shown-not-qualified")]


def test_label_monotonicity_violation():
    d = Dataset(
        ids=[5], features=np.zeros((1, 0)), qual=[1], shown=[0],
        bbowac=[False], bin_or_bid=[True], purchase=[True],
        catalog=["a"], feature_dim=0,
    )
    assert [v.rule for v in validate_dataset(d)] == ["label-monotonicity"]
    assert not ConversionLabels(False, True, True).is_monotone()


def test_other_violation_rules():
    d = Dataset(
        ids=[1, 1, 2, 3], features=[[0.0], [np.nan], [0.0], [0.0]],
        qual=[0, 1, 0b100, 1], shown=[0, 0, 0, 3],
        bbowac=[0] * 4, bin_or_bid=[0] * 4, purchase=[0] * 4,
        catalog=["a", "b"], feature_dim=1,
    )
    rules = {v.rule for v in validate_dataset(d)}
    assert {"empty-qualification", "non-finite-feature", "mask-width",
            "shown-out-of-range", "duplicate-id"} <= rules


def test_feature_dim_mismatch_flags_every_impression():
    d = Dataset(
        ids=[1, 2], features=np.zeros((2, 3)), qual=[1, 1], shown=[0, 0],
        bbowac=[0, 0], bin_or_bid=[0, 0], purchase=[0, 0], catalog=["a"], feature_dim=2,
    )
    assert [v.rule for v in validate_dataset(d)] == ["feature-dim"] * 2


def test_dataset_is_immutable():
    d = make_dataset([3, 3], [0, 1], [1, 0])
    with pytest.raises(ValueError):
        d.shown[0] = 1


def test_from_impressions_roundtrip():
    d = make_dataset([3, 1, 3], [1, 0, 0], [1, 0, 1], features=np.arange(6.0).reshape(3, 2))
    again = Dataset.from_impressions(list(d), d.catalog, d.feature_dim)
    assert again.equals(d)
    assert isinstance(d.impression(0), Impression)


def test_partition_single_cell():
    d = make_dataset([0b11] * 8, [0, 1] * 4, [0] * 8)
    parts = partition_by_qualification(d)
    assert list(parts) == [0b11]
    assert len(parts[0b11]) == 8


def test_partition_two_cells():
    d = make_dataset([0b11, 0b111] * 4, [0, 2, 1, 0] * 2, [0] * 8)
    parts = partition_by_qualification(d)
    assert {m: len(v) for m, v in parts.items()} == {0b11: 4, 0b111: 4}
    # members keep dataset order
    assert list(parts[0b111]) == [1, 3, 5, 7]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([1, 2, 3, 5, 6, 7]), min_size=0, max_size=60))
def test_partition_is_exhaustive_and_disjoint(masks):
    d = make_dataset(masks, [int(m & -m).bit_length() - 1 for m in masks], [0] * len(masks),
                     catalog=["a", "b", "c"])
    parts = partition_by_qualification(d)
    allidx = np.concatenate(list(parts.values())) if parts else np.array([], dtype=int)
    assert sorted(allidx.tolist()) == list(range(len(masks)))
    for m, members in parts.items():
        assert all(d.qual[i] == m for i in members)


def test_split_rounding_per_bucket():
    d = make_dataset([1] * 10, [0] * 10, [0] * 10)
    tr, ev = split_train_eval(d, 0.3, seed=11)
    assert (len(tr), len(ev)) == (7, 3)
    assert set(tr.ids.tolist()).isdisjoint(ev.ids.tolist())


def test_split_is_deterministic():
    d, _ = generate(SynthConfig(n_impressions=5000, seed=2))
    a = split_train_eval(d, 0.4, seed=9)
    b = split_train_eval(d, 0.4, seed=9)
    assert a[0].equals(b[0]) and a[1].equals(b[1])
    c = split_train_eval(d, 0.4, seed=10)
    assert not c[1].equals(a[1])


def test_split_half_is_stratified():
    d, _ = generate(SynthConfig(n_impressions=10_000, seed=4))
    _, ev = split_train_eval(d, 0.5, seed=1)
    full = {m: len(v) for m, v in partition_by_qualification(d).items()}
    got = {m: len(v) for m, v in partition_by_qualification(ev).items()}
    for m, n in full.items():
        assert abs(got[m] - n / 2) <= 1


def test_split_strict_rejects_tiny_bucket():
    d = make_dataset([1, 3, 3], [0, 0, 1], [0, 0, 0])
    with pytest.raises(ValueError):
        split_train_eval(d, 0.5, seed=0, strict=True)
    split_train_eval(d, 0.5, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 15), min_size=1, max_size=50))
def test_uniform_random_policy_stays_qualified(seed, masks):
    pol = UniformRandomPolicy(4, seed=seed)
    qual = np.array(masks)
    out = pol.assign(np.zeros((len(qual), 0)), qual)
    assert all((m >> s) & 1 for m, s in zip(masks, out))


def test_uniform_random_policy_chunking_matches_single_call():
    qual = np.random.default_rng(0).integers(1, 16, size=1000)
    whole = UniformRandomPolicy(4, seed=5).assign(None, qual)
    pol = UniformRandomPolicy(4, seed=5)
    parts = np.concatenate([pol.assign(None, qual[:333]), pol.assign(None, qual[333:])])
    assert np.array_equal(whole, parts)


def test_logged_policy_and_assignment_check():
    d = make_dataset([3, 1], [1, 0], [0, 0])
    assert np.array_equal(LoggedPolicy().assign_dataset(d), [1, 0])
    with pytest.raises(ValueError, match="impression 1"):
        check_assignments(d, [0, 1])

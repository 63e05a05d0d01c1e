import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnfrag import metrics
from nnfrag.errors import DegenerateInput, DegenerateSaliency, InvalidK, LengthMismatch


def brute_average_ranks(v):
    ranks = []
    for x in v:
        below = sum(1 for y in v if y < x)
        equal = sum(1 for y in v if y == x)
        ranks.append(below + (equal + 1) / 2)
    return ranks


def brute_spearman(a, b):
    ra, rb = brute_average_ranks(a), brute_average_ranks(b)
    n = len(a)
    ma, mb = sum(ra) / n, sum(rb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)


def brute_topk(v, k):
    order = sorted(range(len(v)), key=lambda i: (-v[i], i))
    return set(order[:k])


def test_spearman_identical():
    assert metrics.spearman([3, 1, 2], [3, 1, 2]) == pytest.approx(1.0)


def test_spearman_reversal():
    assert metrics.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_ties_against_brute_force():
    expected = brute_spearman([1, 2, 2, 4], [1, 3, 2, 4])
    assert metrics.spearman([1, 2, 2, 4], [1, 3, 2, 4]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.9486832980505138)


def test_spearman_errors():
    with pytest.raises(LengthMismatch):
        metrics.spearman([1, 2], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        metrics.spearman([1], [1])
    with pytest.raises(DegenerateInput):
        metrics.spearman([1, 1, 1], [1, 2, 3])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=3, max_size=12))
def test_spearman_matches_brute_force(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    if len(set(a)) == 1 or len(set(b)) == 1:
        return
    assert metrics.spearman(a, b) == pytest.approx(brute_spearman(a, b), abs=1e-12)
    assert metrics.spearman(a, b) == pytest.approx(metrics.spearman(b, a), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=3, max_size=20, unique=True), st.integers(0, 1000))
def test_spearman_invariant_under_monotone_transform(a, seed):
    b = np.random.default_rng(seed).permutation(len(a)).astype(float)
    a = np.array(a, dtype=float) / 100
    base = metrics.spearman(a, b)
    assert metrics.spearman(np.exp(a), b) == pytest.approx(base, abs=1e-12)
    assert metrics.spearman(a, 3 * b ** 3 + 1) == pytest.approx(base, abs=1e-12)


def test_topk_identical_and_disjoint():
    a = np.array([0.5, 0.3, 0.2, 0.0, 0.0, 0.0])
    assert metrics.topk_intersection(a, a, 3) == 1.0
    b = np.array([0.0, 0.0, 0.0, 0.2, 0.3, 0.5])
    assert metrics.topk_intersection(a, b, 3) == 0.0


def test_topk_tie_break_lower_index():
    assert list(metrics.topk_indices([1.0, 2.0, 2.0, 2.0], 2)) == [1, 2]


def test_topk_invalid_k():
    with pytest.raises(InvalidK):
        metrics.topk_intersection([1, 2], [1, 2], 3)
    with pytest.raises(InvalidK):
        metrics.topk_intersection([1, 2], [1, 2], 0)


@pytest.mark.parametrize("seed", range(5))
def test_topk_against_naive_sort(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(50), rng.random(50)
    for k in range(1, 51):
        expected = len(brute_topk(list(a), k) & brute_topk(list(b), k)) / k
        assert metrics.topk_intersection(a, b, k) == expected
        assert metrics.topk_intersection(b, a, k) == expected


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=4, max_size=15), st.integers(0, 100))
def test_topk_fuzz_with_ties(vals, seed):
    b = list(np.random.default_rng(seed).integers(0, 3, size=len(vals)))
    for k in range(1, len(vals) + 1):
        got = metrics.topk_intersection(vals, b, k)
        assert got == len(brute_topk(vals, k) & brute_topk(b, k)) / k
        assert (got * k) == int(round(got * k))


def test_center_of_mass_examples():
    assert metrics.center_of_mass(np.full((3, 3), 1 / 9)) == pytest.approx((2.0, 2.0))
    point = np.zeros((3, 3))
    point[0, 2] = 1.0
    assert metrics.center_of_mass(point) == (1.0, 3.0)
    two = np.zeros((3, 3))
    two[0, 0] = two[2, 2] = 0.5
    assert metrics.center_of_mass(two) == (2.0, 2.0)


def test_center_of_mass_sums_channels():
    m = np.zeros((2, 3, 3))
    m[0, 0, 0] = 0.5
    m[1, 2, 2] = 0.5
    assert metrics.center_of_mass(m) == (2.0, 2.0)


def test_center_of_mass_degenerate():
    with pytest.raises(DegenerateSaliency):
        metrics.center_of_mass(np.zeros((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 3), st.integers(0, 3))
def test_center_of_mass_translation_equivariance(r, c, dr, dc):
    a = np.zeros((10, 10))
    a[r, c] = 1.0
    b = np.zeros((10, 10))
    b[r + dr, c + dc] = 1.0
    (r1, c1), (r2, c2) = metrics.center_of_mass(a), metrics.center_of_mass(b)
    assert (r2 - r1, c2 - c1) == (dr, dc)


def test_center_shift_examples():
    a = np.zeros((5, 5))
    a[0, 0] = 1.0
    b = np.zeros((5, 5))
    b[0, 3] = 1.0
    assert metrics.center_shift(a, a) == 0.0
    assert metrics.center_shift(a, b) == 3.0


@pytest.mark.parametrize("seed", range(3))
def test_center_shift_definitional(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 7)), rng.random((6, 7))
    a /= a.sum()
    b /= b.sum()

    def com(m):
        r = sum((i + 1) * m[i, j] for i, j in itertools.product(range(6), range(7)))
        c = sum((j + 1) * m[i, j] for i, j in itertools.product(range(6), range(7)))
        return r, c

    (r1, c1), (r2, c2) = com(a), com(b)
    assert metrics.center_shift(a, b) == pytest.approx(math.sqrt((r1 - r2) ** 2 + (c1 - c2) ** 2), abs=1e-12)


def test_compare_report():
    rng = np.random.default_rng(0)
    a = rng.random((1, 4, 4))
    rep = metrics.compare(a, a, 5)
    assert rep.rank_correlation == pytest.approx(1.0)
    assert rep.topk_intersection == 1.0 and rep.k == 5 and rep.center_shift == 0.0

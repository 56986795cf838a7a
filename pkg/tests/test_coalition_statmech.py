import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurogame.coalition import (
    ACTIVATION_FLOOR,
    ConfigurationState,
    GridCoord,
    block_pairs,
    coalition_count,
    neighbor_pairs,
    partition,
)
from neurogame.statmech import (
    BOLTZMANN,
    EnergyParams,
    energy,
    gibbs_layer,
    log_gibbs,
    payoff,
    score_layer,
    temperature,
    thermal_energy,
)


def block_state(values, block=(2, 2), cid=0):
    coords = tuple(GridCoord(r, c) for r in range(block[0]) for c in range(block[1]))
    return ConfigurationState(cid, coords, tuple(float(v) for v in values), block)


# -- partition ---------------------------------------------------------------


@pytest.mark.parametrize("shape,m", [((4, 4), 4), ((5, 5), 4), ((2, 2), 1)])
def test_partition_counts(shape, m):
    states = partition(np.ones(shape), (2, 2))
    assert len(states) == m == coalition_count(shape, (2, 2))
    assert all(s.size == 4 for s in states)


def test_partition_drops_trailing_and_covers_once():
    states = partition(np.arange(25.0).reshape(5, 5) + 1, (2, 2))
    seen = [c for s in states for c in s.coords]
    assert len(seen) == len(set(seen)) == 16
    assert all(c.row < 4 and c.col < 4 for c in seen)
    # row-major tile order
    assert [s.coords[0] for s in states] == [(0, 0), (0, 2), (2, 0), (2, 2)]


def test_partition_floor_and_errors():
    s = partition(np.zeros((2, 2)), (2, 2))[0]
    assert min(s.activations) == ACTIVATION_FLOOR
    with pytest.raises(ValueError):
        partition(np.ones((2, 2)), (3, 1))
    with pytest.raises(ValueError):
        block_state([1, 1, 1, 0])


def brute_pairs(rows, cols, kind):
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    out = set()
    for a, b in itertools.combinations(range(len(cells)), 2):
        (r1, c1), (r2, c2) = cells[a], cells[b]
        d = (abs(r1 - r2), abs(c1 - c2))
        if kind == "plus4" and d in ((0, 1), (1, 0)):
            out.add((a, b))
        if kind == "full8" and d in ((0, 1), (1, 0), (1, 1)):
            out.add((a, b))
    return out


def test_neighbor_pair_examples():
    s = block_state([1, 1, 1, 1])
    plus = neighbor_pairs(s, "plus4")
    # TL-TR, TL-BL, TR-BR, BL-BR
    assert set(plus.index_pairs) == {(0, 1), (0, 2), (1, 3), (2, 3)}
    assert len(neighbor_pairs(s, "full8").index_pairs) == 6
    one = block_state([1], (1, 1))
    assert neighbor_pairs(one, "plus4").index_pairs == () == neighbor_pairs(one, "full8").index_pairs


@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from(["plus4", "full8"]))
def test_block_pairs_match_brute_force(rows, cols, kind):
    pairs = block_pairs((rows, cols), kind)
    assert len(pairs) == len(set(pairs))
    assert set(pairs) == brute_pairs(rows, cols, kind)


# -- energy ------------------------------------------------------------------


def test_energy_examples():
    s = block_state([1, 1, 1, 1])
    pairs = neighbor_pairs(s)
    assert energy(s, pairs, EnergyParams(alpha=0, beta=1)) == 4
    assert energy(s, pairs, EnergyParams(alpha=1, beta=0)) == 4
    s2 = block_state([2, 2, 2, 2])
    assert energy(s2, neighbor_pairs(s2), EnergyParams(alpha=0, beta=1)) == 1


@settings(max_examples=100)
@given(
    st.lists(st.floats(1e-3, 1e3), min_size=4, max_size=4),
    st.floats(0, 3),
    st.floats(0, 3),
)
def test_energy_matches_direct_sum(acts, alpha, beta):
    s = block_state(acts)
    e = energy(s, neighbor_pairs(s), EnergyParams(alpha, beta))
    a = acts
    ref = alpha * sum(1 / x for x in a) + beta * (
        1 / (a[0] * a[1]) + 1 / (a[0] * a[2]) + 1 / (a[1] * a[3]) + 1 / (a[2] * a[3])
    )
    assert math.isclose(e, ref, rel_tol=1e-12, abs_tol=1e-300)


# -- temperature / Gibbs / payoff -------------------------------------------


def test_temperature_examples():
    assert math.isclose(temperature(1), 1e23 / math.log(2))
    assert math.isclose(thermal_energy(1), 1.38e-23 * 1e23 / math.log(2))
    assert abs(thermal_energy(1) - 1.9909) < 1e-4
    assert math.isclose(temperature(math.e - 1), 1e23, rel_tol=1e-12)
    assert BOLTZMANN == 1.38e-23
    with pytest.raises(ValueError):
        temperature(0)


@given(st.floats(1, 1e6), st.floats(1, 1e6))
def test_temperature_decreasing(i, j):
    if i < j:
        assert temperature(i) > temperature(j)


def test_gibbs_examples():
    p, _ = gibbs_layer([3.7], 1)
    assert p.tolist() == [1.0]
    p, _ = gibbs_layer([2.0, 2.0], 5)
    np.testing.assert_allclose(p, [0.5, 0.5])
    unit = EnergyParams(c=math.log(2) / 1.38)  # k_B T(1) == 1
    assert math.isclose(thermal_energy(1, unit), 1.0, rel_tol=1e-12)
    p, q = gibbs_layer([1.0, 2.0], 1, unit)
    assert abs(p[0] - 0.731059) < 1e-6 and abs(p[1] - 0.268941) < 1e-6
    assert math.isclose(q, math.exp(-1) + math.exp(-2), rel_tol=1e-12)
    with pytest.raises(ValueError):
        gibbs_layer([], 1)


def test_payoff_examples():
    assert payoff(0.0) == 0.0
    assert math.isclose(payoff(0.5), math.log(2), rel_tol=1e-12)
    assert abs(payoff(1.0) - 27.631) < 1e-3
    assert math.isclose(payoff(0.5, EnergyParams(k1=2.0)), math.log(4), rel_tol=1e-12)


@given(st.floats(0, 0.999), st.floats(0, 0.999))
def test_payoff_increasing(p, q):
    if p < q:
        assert payoff(p) < payoff(q)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1e3), min_size=2, max_size=50), st.integers(1, 10**6))
def test_gibbs_properties(energies, i):
    p, _ = gibbs_layer(energies, i)
    assert abs(p.sum() - 1) < 1e-9
    e = np.array(energies)
    lp, _ = log_gibbs(energies, i)
    for a, b in itertools.combinations(range(len(e)), 2):
        if e[a] < e[b]:
            assert lp[a] >= lp[b]
        if e[b] - e[a] > 1e-9:  # strict once the gap is above float resolution
            assert lp[a] > lp[b]


def test_score_layer_examples():
    uniform = partition(np.full((4, 4), 0.7), (2, 2))
    em = score_layer(uniform, 3)
    np.testing.assert_allclose(em.gibbs, 0.25)
    assert np.ptp(em.payoffs) == 0

    rng = np.random.default_rng(0)
    m = rng.uniform(0.1, 1, (4, 4))
    m[2:, :2] += 5.0  # coalition 2 strictly stronger
    em = score_layer(partition(m, (2, 2)), 1)
    assert int(np.argmax(em.payoffs)) == 2
    assert np.sum(em.payoffs == em.payoffs.max()) == 1

    em = score_layer(partition(rng.uniform(0.1, 1, (4, 4)), (2, 2)), 1)
    assert list(np.argsort(-em.payoffs, kind="stable")) == list(np.argsort(em.energies, kind="stable"))
    assert math.isclose(em.partition, math.exp(em.log_partition))

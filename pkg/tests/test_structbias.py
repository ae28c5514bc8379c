import itertools

import numpy as np
import pytest

from relphormer.structbias import adjacency_powers, normalize_adjacency, structure_bias


def all_graphs(n):
    """Every symmetric 0/1 matrix with zero diagonal on n nodes, shape (2**(n(n-1)/2), n, n)."""
    pairs = list(itertools.combinations(range(n), 2))
    bits = np.array(list(itertools.product((0.0, 1.0), repeat=len(pairs))), dtype=float)
    bits = bits.reshape(2 ** len(pairs), len(pairs))
    out = np.zeros((bits.shape[0], n, n))
    for c, (i, j) in enumerate(pairs):
        out[:, i, j] = out[:, j, i] = bits[:, c]
    return out


def walk_sum(norm, m):
    """Oracle: for each (i, j) sum the weight products of every length-m walk i -> j.

    ``norm`` is a batch (G, L, L).  Walks are enumerated explicitly as index
    tuples; no matrix products are used.
    """
    G, L, _ = norm.shape
    walks = np.array(list(itertools.product(range(L), repeat=m + 1)))     # (L^(m+1), m+1)
    w = np.ones((G, walks.shape[0]))
    for s in range(m):
        w = w * norm[:, walks[:, s], walks[:, s + 1]]
    out = np.zeros((G, L, L))
    flat = walks[:, 0] * L + walks[:, -1]
    for g in range(G):
        out[g] = np.bincount(flat, weights=w[g], minlength=L * L).reshape(L, L)
    return out


def test_isolated_node():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((1, 1))), [[1.0]])


def test_single_edge():
    np.testing.assert_allclose(normalize_adjacency(np.array([[0, 1], [1, 0]])), [[0.5, 0.5], [0.5, 0.5]],
                               rtol=0, atol=1e-15)


def test_path_graph():
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert normalize_adjacency(a)[0, 1] == pytest.approx(1 / np.sqrt(6), abs=1e-12)
    assert normalize_adjacency(a)[0, 1] == pytest.approx(0.40825, abs=1e-5)


def test_asymmetric_rejected():
    with pytest.raises(ValueError):
        normalize_adjacency(np.array([[0, 1], [0, 0]]))


def test_powers_identity():
    stack = adjacency_powers(np.eye(4), 3)
    for p in stack:
        np.testing.assert_array_equal(p, np.eye(4))


def test_powers_idempotent():
    half = np.full((2, 2), 0.5)
    stack = adjacency_powers(half, 2)
    np.testing.assert_allclose(stack[1], half, atol=1e-15)


def test_powers_m1_and_m0():
    a = normalize_adjacency(np.array([[0, 1], [1, 0]]))
    stack = adjacency_powers(a, 1)
    assert stack.shape == (1, 2, 2)
    np.testing.assert_array_equal(stack[0], a)
    with pytest.raises(ValueError):
        adjacency_powers(a, 0)


@pytest.mark.parametrize("L", range(1, 7))
def test_powers_match_walk_enumeration(L):
    graphs = all_graphs(L)
    norm = np.stack([normalize_adjacency(g) for g in graphs])
    for m in (1, 2, 3):
        got = np.stack([adjacency_powers(x, m)[m - 1] for x in norm])
        for lo in range(0, len(norm), 4096):
            np.testing.assert_allclose(got[lo:lo + 4096], walk_sum(norm[lo:lo + 4096], m), rtol=0, atol=1e-10)


def test_power_invariants(rng):
    for _ in range(50):
        L = int(rng.integers(2, 12))
        a = np.triu((rng.random((L, L)) < 0.4).astype(float), 1)
        a = a + a.T
        norm = normalize_adjacency(a)
        stack = adjacency_powers(norm, 4)
        ones = np.ones(L)
        for t in range(4):
            p = stack[t]
            np.testing.assert_allclose(p, p.T, atol=1e-12)
            assert p.min() >= 0 and p.max() <= 1 + 1e-12
            if t:
                np.testing.assert_allclose(stack[t], stack[t - 1] @ norm, atol=1e-10)
                np.testing.assert_allclose(p @ ones, stack[t - 1] @ (norm @ ones), atol=1e-8)


def test_bias_zero_weights():
    stack = adjacency_powers(normalize_adjacency(np.array([[0, 1], [1, 0]])), 2)
    phi = structure_bias(stack, np.zeros((3, 3)))
    assert phi.shape == (3, 2, 2)
    assert np.all(phi == 0)


def test_bias_selector_weights():
    norm = normalize_adjacency(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]]))
    stack = adjacency_powers(norm, 3)
    phi = structure_bias(stack, np.array([[1.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_array_equal(phi[0], norm)


def test_bias_hand_value():
    stack = adjacency_powers(normalize_adjacency(np.array([[0, 1], [1, 0]])), 2)
    phi = structure_bias(stack, np.array([[1.0, 1.0, 0.5]]))
    assert phi[0, 0, 1] == pytest.approx(1.5, abs=1e-12)


def test_bias_shape_mismatch():
    stack = adjacency_powers(np.eye(2), 2)
    with pytest.raises(ValueError):
        structure_bias(stack, np.zeros((2, 2)))

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gmtr.affinity import assemble_lawler, build_graph
from gmtr.discretize import (AssignmentProblem, brute_force_assignment, brute_force_qap,
                             discretize, hungarian, matching_accuracy, matrix_to_perm,
                             perm_to_matrix, qap_objective)
from gmtr.numerics import Tensor


def test_one_by_one():
    x, val = hungarian(AssignmentProblem([[4.2]]))
    assert x.tolist() == [[1.0]] and val == 4.2


def test_identity_dominant():
    s = np.eye(3) * 5 + np.random.default_rng(0).random((3, 3))
    x, _ = hungarian(AssignmentProblem(s))
    assert np.array_equal(x, np.eye(3))


def test_non_finite_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        hungarian(AssignmentProblem([[1.0, np.inf], [0.0, 1.0]]))


def test_matches_enumeration_on_random_7x7():
    rng = np.random.default_rng(1)
    for _ in range(200):
        s = rng.normal(size=(7, 7))
        x, val = hungarian(AssignmentProblem(s))
        perm, best = brute_force_assignment(s)
        assert val == best
        assert tuple(matrix_to_perm(x)) == perm


def test_minimize_matches_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.normal(size=(5, 5))
        _, val = hungarian(AssignmentProblem(s, "minimize"))
        assert val == brute_force_assignment(s, maximize=False)[1]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(-100, 100)))
def test_maximize_equals_minimize_of_negation(s):
    a, va = hungarian(AssignmentProblem(s, "maximize"))
    b, vb = hungarian(AssignmentProblem(-s, "minimize"))
    assert np.array_equal(a, b) and va == -vb


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_beats_random_permutations(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, n))
    _, val = hungarian(AssignmentProblem(s))
    samples = np.array([rng.permutation(n) for _ in range(1000)])
    assert val >= s[np.arange(n), samples].sum(axis=1).max() - 1e-12


def test_ties_go_to_lexicographic_smallest():
    x, _ = hungarian(AssignmentProblem(np.ones((4, 4))))
    assert np.array_equal(x, np.eye(4))
    s = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 2.0]])
    assert matrix_to_perm(hungarian(AssignmentProblem(s))[0]).tolist() == [0, 1, 2]
    rng = np.random.default_rng(3)
    for _ in range(100):
        s = rng.integers(0, 3, (5, 5)).astype(float)
        x, val = hungarian(AssignmentProblem(s))
        assert tuple(matrix_to_perm(x)) == brute_force_assignment(s)[0]


def test_rectangular_assigns_every_short_side_row():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(3, 5))
    x, val = hungarian(AssignmentProblem(s))
    assert x.sum() == 3 and (x.sum(axis=1) == 1).all()
    assert val == brute_force_assignment(s)[1]


def test_discretize_picks_soft_argmax_permutation():
    soft = np.array([[0.1, 0.8, 0.1], [0.7, 0.2, 0.1], [0.2, 0.0, 0.8]])
    assert matrix_to_perm(discretize(soft)).tolist() == [1, 0, 2]


def _instance(kp, ke=None, seed=0):
    n1, n2 = kp.shape
    rng = np.random.default_rng(seed)
    g1, g2 = build_graph(rng.uniform(0, 9, (n1, 2))), build_graph(rng.uniform(0, 9, (n2, 2)))
    if ke is None:
        ke = np.zeros((len(g1.edges), len(g2.edges)))
    return assemble_lawler(Tensor(kp), Tensor(ke), g1, g2)


def test_qap_diagonal_only_reduces_to_assignment():
    rng = np.random.default_rng(5)
    for seed in range(20):
        kp = rng.normal(size=(5, 5))
        perm, val = brute_force_qap(_instance(kp, seed=seed).dense_array(), 5, 5)
        x, hval = hungarian(AssignmentProblem(kp))
        assert perm == tuple(matrix_to_perm(x)) and abs(val - hval) <= 1e-12


def test_qap_isomorphic_triangles():
    coords = np.array([[0.0, 0.0], [6.0, 0.0], [2.0, 5.0]])
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.6]])
    perm = np.array([2, 0, 1])  # node i of graph 1 is node perm[i] of graph 2
    f2 = np.empty_like(feats)
    f2[perm] = feats
    kp = feats @ f2.T
    g1 = build_graph(coords)
    c2 = np.empty_like(coords)
    c2[perm] = coords
    g2 = build_graph(c2)
    desc = lambda f, g: np.concatenate([f[g.edges[:, 0]] + f[g.edges[:, 1]],
                                        np.abs(f[g.edges[:, 0]] - f[g.edges[:, 1]])], axis=1)
    ke = desc(feats, g1) @ desc(f2, g2).T
    inst = assemble_lawler(Tensor(kp), Tensor(ke), g1, g2)
    assert brute_force_qap(inst.dense_array(), 3, 3)[0] == tuple(perm)


def test_qap_all_equal_tie():
    k = np.ones((4, 4))
    assert brute_force_qap(k, 2, 2)[0] == (0, 1)


def test_qap_objective_matches_loop():
    rng = np.random.default_rng(6)
    k = rng.normal(size=(9, 9))
    x = perm_to_matrix([2, 0, 1])
    v = x.reshape(-1)
    loop = sum(v[a] * k[a, b] * v[b] for a in range(9) for b in range(9))
    assert abs(qap_objective(k, x) - loop) <= 1e-12


def test_qap_enumeration_matches_loop_oracle():
    rng = np.random.default_rng(7)
    k = rng.normal(size=(12, 12))
    k = k + k.T
    best, best_val = None, -np.inf
    for perm in itertools.permutations(range(4), 3):
        val = qap_objective(k, perm_to_matrix(perm, 4))
        if val > best_val + 1e-12:
            best, best_val = perm, val
    perm, val = brute_force_qap(k, 3, 4)
    assert perm == best and abs(val - best_val) <= 1e-10


def test_qap_size_guard_names_limit():
    with pytest.raises(ValueError, match="40320"):
        brute_force_qap(np.zeros((81, 81)), 9, 9)
    with pytest.raises(ValueError, match="40320"):
        brute_force_qap(np.zeros((60, 60)), 5, 12)


def test_matching_accuracy_cases():
    x = perm_to_matrix([0, 1, 2])
    assert matching_accuracy(x, x) == 1.0
    assert matching_accuracy(perm_to_matrix([1, 0]), perm_to_matrix([0, 1])) == 0.0
    assert matching_accuracy(perm_to_matrix([0, 2, 1]), perm_to_matrix([0, 1, 2])) == pytest.approx(1 / 3)


def test_perm_matrix_round_trip():
    perm = [3, 0, 2, 1]
    assert matrix_to_perm(perm_to_matrix(perm)).tolist() == perm
    partial = np.zeros((2, 3))
    partial[1, 2] = 1
    assert matrix_to_perm(partial).tolist() == [-1, 2]

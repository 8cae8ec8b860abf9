import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import null_space, subspace_angles

from quasi_sl.analysis import green_form, random_contraction, random_domain_function, random_unitary
from quasi_sl.errors import SpecError, TraceRelationError
from quasi_sl.quasisys import Problem, synthesize_domain_function
from quasi_sl.triplet import (ACCUMULATIVE, DISSIPATIVE, SELF_ADJOINT, UNCLASSIFIED, BoundaryMatrix,
                              NodePermutation, admissible_subspace, classify,
                              domain_function_with_traces, expand_presets, from_trace_relation,
                              locality_check, node_block, traces)


def test_traces_of_identity_function():
    tv = traces(synthesize_domain_function(Problem.free([0, 1]), [(0, 1)]))
    assert np.allclose(tv.gamma1, [1, -1], atol=1e-14)
    assert np.allclose(tv.gamma2, [0, 1], atol=1e-14)


def test_traces_of_constant():
    tv = traces(synthesize_domain_function(Problem.free([0, 1]), [(1, 0)]))
    assert np.allclose(tv.gamma1, [0, 0], atol=1e-14)
    assert np.allclose(tv.gamma2, [1, 1], atol=1e-14)


def test_traces_two_intervals():
    tv = traces(synthesize_domain_function(Problem.free([0, 1, 2]), [(0, 1), (1, 1)]))
    assert np.allclose(tv.gamma1, [1, -1, 1, -1], atol=1e-13)
    assert np.allclose(tv.gamma2, [0, 1, 1, 2], atol=1e-13)


@pytest.mark.parametrize("K,expected", [
    (np.eye(2), SELF_ADJOINT),
    (-np.eye(4), SELF_ADJOINT),
    (np.zeros((2, 2)), DISSIPATIVE),
    (0.5 * np.eye(2), DISSIPATIVE),
    (2.0 * np.eye(2), UNCLASSIFIED),
])
def test_classification(K, expected):
    assert classify(BoundaryMatrix(K)) == expected


def test_variant_decides_side():
    assert BoundaryMatrix(np.zeros((2, 2)), "accumulative").classify() == ACCUMULATIVE
    assert BoundaryMatrix(np.eye(2), "accumulative").classify() == SELF_ADJOINT
    with pytest.raises(SpecError):
        BoundaryMatrix(np.eye(2), "sideways")


def test_classification_flags_use_tolerance():
    K = np.eye(2) * (1 + 2e-13)
    bm = BoundaryMatrix(K)
    assert bm.is_contraction and bm.is_unitary
    assert not BoundaryMatrix(np.eye(2) * (1 + 1e-9)).is_contraction


def test_dimension_mismatch():
    with pytest.raises(SpecError):
        classify(BoundaryMatrix(np.eye(2)), m=2)
    with pytest.raises(SpecError):
        BoundaryMatrix(np.eye(3))


def test_dirichlet_and_neumann_conditions():
    dirichlet = BoundaryMatrix(np.eye(2))
    M1, M2 = dirichlet.coefficient_matrices()
    assert np.array_equal(M1, np.zeros((2, 2)))
    assert np.array_equal(M2, 2j * np.eye(2))
    M1, M2 = BoundaryMatrix(-np.eye(2)).coefficient_matrices()
    assert np.array_equal(M1, -2 * np.eye(2)) and np.array_equal(M2, np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# node bookkeeping


def test_node_permutation_layout():
    perm = NodePermutation(3)
    assert perm.block_sizes == [1, 2, 2, 1]
    assert sorted(perm.perm.tolist()) == list(range(6))
    K = np.arange(36.0).reshape(6, 6)
    assert np.array_equal(perm.from_nodes(perm.to_nodes(K)), K)


@pytest.mark.parametrize("K,local", [
    (np.diag([0.3, -0.2j]), True),
    (np.array([[0, 1], [1, 0]]), False),
])
def test_single_interval_locality(K, local):
    assert locality_check(K).local is local


def test_transmission_locality():
    K = expand_presets(["dirichlet", "transmission", "dirichlet"], 2)
    rep = locality_check(K)
    assert rep.local
    assert np.array_equal(rep.blocks[1], [[0, -1], [-1, 0]])
    assert BoundaryMatrix(K).is_unitary


def test_nonlocal_coupling():
    K = np.eye(4, dtype=complex)
    K[0, 3] = K[3, 0] = 0.1
    rep = locality_check(K)
    assert not rep.local and rep.offblock_max == pytest.approx(0.1)


def test_permutation_keeps_condition_invariant():
    rng = np.random.default_rng(3)
    m = 3
    perm = NodePermutation(m)
    K = random_contraction(m, rng)
    g1 = rng.normal(size=2 * m) + 1j * rng.normal(size=2 * m)
    g2 = rng.normal(size=2 * m) + 1j * rng.normal(size=2 * m)
    r_interval = (K - np.eye(2 * m)) @ g1 + 1j * (K + np.eye(2 * m)) @ g2
    Kn = perm.to_nodes(K)
    r_node = (Kn - np.eye(2 * m)) @ perm.vector_to_nodes(g1) + 1j * (Kn + np.eye(2 * m)) @ perm.vector_to_nodes(g2)
    assert np.allclose(perm.vector_to_nodes(r_interval), r_node, atol=1e-13)


def test_presets():
    assert np.array_equal(node_block("robin(0)", 1), [[1]])
    assert np.allclose(node_block("robin(pi)", 1), [[-1]])
    assert np.array_equal(expand_presets("neumann", 2), -np.eye(4))
    with pytest.raises(SpecError):
        expand_presets(["transmission", "dirichlet"], 1)
    with pytest.raises(SpecError):
        node_block("periodic", 1)


# ---------------------------------------------------------------------------
# trace relations


def test_dirichlet_recovery():
    basis = [(np.array([1, 0]), np.zeros(2)), (np.array([0, 1]), np.zeros(2))]
    assert np.allclose(from_trace_relation(basis).K, np.eye(2))


def test_neumann_recovery():
    basis = [(np.zeros(2), np.array([1, 0])), (np.zeros(2), np.array([0, 1]))]
    assert np.allclose(from_trace_relation(basis).K, -np.eye(2))


def test_transmission_recovery():
    # node coordinates at an interior node: g1 = (-d, d), g2 = (y, y)
    basis = [(np.array([-1, 1]), np.zeros(2)), (np.zeros(2), np.array([1, 1]))]
    bm = from_trace_relation(basis)
    assert np.allclose(bm.K, [[0, -1], [-1, 0]], atol=1e-14)
    assert bm.is_unitary


def test_underdetermined_relation():
    with pytest.raises(TraceRelationError):
        from_trace_relation([(np.array([1, 0]), np.zeros(2))])


def test_inconsistent_relation():
    basis = [(np.array([1, 0]), np.zeros(2)), (np.array([0, 1]), np.zeros(2)),
             (np.array([1, 1]), np.array([0, 1]))]
    with pytest.raises(TraceRelationError):
        from_trace_relation(basis)


@pytest.mark.parametrize("variant", ["dissipative", "accumulative"])
def test_round_trip_random_contractions(variant):
    rng = np.random.default_rng(17)
    for _ in range(100):
        m = int(rng.integers(1, 4))
        K = random_contraction(m, rng)
        bm = BoundaryMatrix(K, variant)
        back = from_trace_relation(admissible_subspace(bm), variant)
        assert np.max(np.abs(back.K - K)) < 1e-10


def test_injectivity():
    rng = np.random.default_rng(23)
    for _ in range(50):
        K1, K2 = random_contraction(2, rng), random_contraction(2, rng)
        spaces = []
        for K in (K1, K2):
            M1, M2 = BoundaryMatrix(K).coefficient_matrices()
            spaces.append(null_space(np.hstack([M1, M2])))
        assert np.max(subspace_angles(*spaces)) > 1e-10


def test_admissible_subspace_satisfies_condition():
    rng = np.random.default_rng(2)
    bm = BoundaryMatrix(random_unitary(2, rng))
    basis = admissible_subspace(bm)
    assert len(basis) == 4
    for g1, g2 in basis:
        M1, M2 = bm.coefficient_matrices()
        assert np.linalg.norm(M1 @ g1 + M2 @ g2) < 1e-13


# ---------------------------------------------------------------------------
# triplet axioms


def test_surjectivity():
    prob = Problem.from_spec([0, 0.7, 2], [dict(p="1 + t", q="t", deltas=[(0.3, 2)]),
                                           dict(p="3", r="sin(t)")])
    rng = np.random.default_rng(31)
    for _ in range(10):
        g1 = rng.normal(size=4) + 1j * rng.normal(size=4)
        g2 = rng.normal(size=4) + 1j * rng.normal(size=4)
        tv = traces(domain_function_with_traces(prob, g1, g2))
        assert np.max(np.abs(tv.gamma1 - g1)) < 1e-8
        assert np.max(np.abs(tv.gamma2 - g2)) < 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_abstract_green_identity(seed):
    prob = Problem.from_spec([0, 1, 2], [dict(p="2 + t", q="cos(t)", r="t", deltas=[(0.5, -3)]),
                                         dict(p="1", q="t^2")])
    rng = np.random.default_rng(seed)
    f, g = random_domain_function(prob, rng), random_domain_function(prob, rng)
    lhs, rhs, scale = green_form(f, g)
    assert abs(lhs - rhs) <= 1e-8 * scale

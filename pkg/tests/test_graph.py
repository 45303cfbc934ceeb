import numpy as np
import pytest

from boneage.graph import (SchemaError, build_graphs, default_schema_document, load_roi_schema,
                           normalized_propagation)


@pytest.fixture(scope="module")
def schema():
    return load_roi_schema()


def neighbours(A, schema, name):
    i = schema.index(name)
    return {schema.names[j] for j in np.flatnonzero(A[i])}


def test_default_schema_shape(schema):
    assert schema.n == 17
    assert schema.group_labels == ("A", "B", "C", "D")
    assert [len(schema.members(g)) for g in "ABCD"] == [5, 5, 5, 2]


def test_b3_joint_neighbours(schema):
    g = build_graphs(schema)
    assert neighbours(g.adjacency[0], schema, "B3") == {"A3", "C3"}


def test_b3_group_neighbours(schema):
    g = build_graphs(schema)
    assert neighbours(g.adjacency[1], schema, "B3") == {"B1", "B2", "B4", "B5"}


def test_group_d_is_two_clique(schema):
    A2 = build_graphs(schema).adjacency[1]
    d = schema.members("D")
    np.testing.assert_array_equal(A2[np.ix_(d, d)], [[0, 1], [1, 0]])


def test_joint_degrees_match_edge_counts(schema):
    A1 = build_graphs(schema).adjacency[0]
    counts = np.zeros(schema.n)
    for a, b in default_schema_document()["g1_edges"]:
        counts[schema.index(a)] += 1
        counts[schema.index(b)] += 1
    np.testing.assert_array_equal(A1.sum(axis=1), counts)


def test_wrong_roi_count_rejected():
    doc = default_schema_document()
    doc["rois"] = doc["rois"][:16]
    doc["g1_edges"] = [e for e in doc["g1_edges"] if "D2" not in e]
    with pytest.raises(SchemaError, match="17"):
        load_roi_schema(doc)


def test_unknown_group_rejected():
    doc = default_schema_document()
    doc["rois"][0]["group"] = "Z"
    with pytest.raises(SchemaError, match="unknown anatomy group"):
        load_roi_schema(doc)


def test_duplicate_reverse_edge_rejected():
    doc = default_schema_document()
    doc["g1_edges"].append(["B1", "A1"])
    with pytest.raises(SchemaError, match="duplicate edge"):
        load_roi_schema(doc)


def test_isolated_node_row_is_unit_vector():
    doc = default_schema_document()
    doc["g1_edges"] = [e for e in doc["g1_edges"] if "A1" not in e]
    s = load_roi_schema(doc)
    L1 = build_graphs(s).L1
    i = s.index("A1")
    np.testing.assert_array_equal(L1[i], np.eye(s.n)[i])


def test_propagation_small_cases():
    np.testing.assert_array_equal(normalized_propagation([[0.0]]), [[1.0]])
    np.testing.assert_allclose(normalized_propagation([[0, 1], [1, 0]]), [[0.5, 0.5], [0.5, 0.5]])


def test_propagation_rejects_asymmetric():
    with pytest.raises(ValueError, match="symmetric"):
        normalized_propagation([[0, 1], [0, 0]])


def power_iteration(L, iters=2000):
    v = np.ones(len(L))
    for _ in range(iters):
        v = L @ v
        v /= np.linalg.norm(v)
    return v @ L @ v, v


@pytest.mark.parametrize("which", [0, 1])
def test_top_eigenpair_by_power_iteration(schema, which):
    g = build_graphs(schema)
    L, deg = g.propagation[which], g.degree[which]
    # shift keeps power iteration away from a -1 eigenvalue of bipartite components
    lam, v = power_iteration(0.5 * (L + np.eye(len(L))))
    assert 2 * lam - 1 == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(L @ np.sqrt(deg), np.sqrt(deg), atol=1e-12)


@pytest.mark.parametrize("which", [0, 1])
def test_default_mode_spectrum(schema, which):
    L = build_graphs(schema).propagation[which]
    np.testing.assert_array_equal(L, L.T)
    assert np.all(L >= 0)
    ev = np.linalg.eigvalsh(L)
    assert ev.min() >= -1 - 1e-12 and ev.max() == pytest.approx(1.0, abs=1e-6)


def test_literal_mode_is_similar_but_not_symmetric(schema):
    A = build_graphs(schema).adjacency[0]
    lit = normalized_propagation(A, "literal")
    sym = normalized_propagation(A, "symmetric")
    assert not np.allclose(lit, lit.T)
    d = (A + np.eye(len(A))).sum(axis=1)
    np.testing.assert_allclose(lit, sym * d[None, :])


def test_relabelling_is_conjugation(schema):
    perm = np.random.default_rng(5).permutation(schema.n)
    g, gp = build_graphs(schema), build_graphs(schema.permuted(perm))
    P = np.eye(schema.n)[perm]
    for j in (0, 1):
        np.testing.assert_array_equal(gp.adjacency[j], P @ g.adjacency[j] @ P.T)
        np.testing.assert_allclose(gp.propagation[j], P @ g.propagation[j] @ P.T, atol=0, rtol=0)


def test_group_adjacency_block_diagonal_when_sorted(schema):
    rng = np.random.default_rng(0)
    shuffled = schema.permuted(rng.permutation(schema.n))
    order = np.argsort(np.array(shuffled.groups), kind="stable")
    A2 = build_graphs(shuffled.permuted(order)).adjacency[1]
    groups = np.array(shuffled.permuted(order).groups)
    off_block = groups[:, None] != groups[None, :]
    assert np.all(A2[off_block] == 0)

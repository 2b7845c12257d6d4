import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leco.ontology import (
    Taxonomy,
    TaxonomyError,
    build_edge_matrix,
    coarsen_label,
    coarsen_labels,
    marginalize,
)


@st.composite
def taxonomies(draw, max_levels=4):
    n_levels = draw(st.integers(2, max_levels))
    sizes = [draw(st.integers(1, 6))]
    for _ in range(n_levels - 1):
        sizes.append(sizes[-1] + draw(st.integers(1, 8)))
    seed = draw(st.integers(0, 2**32 - 1))
    return Taxonomy.random(sizes, np.random.default_rng(seed))


def two_level(parents, num_coarse):
    return Taxonomy((num_coarse, len(parents)), (np.array(parents),))


def test_edge_matrix_transcribes_parent_map():
    tax = two_level([0, 0, 1, 1], 2)
    np.testing.assert_array_equal(build_edge_matrix(tax, 1, 0), [[1, 0], [1, 0], [0, 1], [0, 1]])


def test_edge_matrix_rejects_bad_levels():
    tax = Taxonomy.balanced([2, 2, 2])
    for t, tp in ((1, 1), (0, 1), (3, 0), (2, -1)):
        with pytest.raises(TaxonomyError):
            build_edge_matrix(tax, t, tp)


def test_inat_shaped_edge_matrix():
    tax = Taxonomy.random([123, 339, 729, 810], np.random.default_rng(0))
    e = build_edge_matrix(tax, 3, 0)
    assert e.shape == (810, 123)
    np.testing.assert_array_equal(e.sum(axis=1), 1.0)


@settings(max_examples=60, deadline=None)
@given(taxonomies())
def test_edge_matrices_compose_and_are_row_stochastic(tax):
    L = tax.num_levels
    for t in range(1, L):
        for tp in range(t):
            e = build_edge_matrix(tax, t, tp)
            assert set(np.unique(e)) <= {0.0, 1.0}
            np.testing.assert_array_equal(e.sum(axis=1), 1.0)
            for mid in range(tp + 1, t):
                np.testing.assert_array_equal(e, build_edge_matrix(tax, t, mid) @ build_edge_matrix(tax, mid, tp))


@settings(max_examples=60, deadline=None)
@given(taxonomies())
def test_coarsen_chained_lookups_match_edge_matrix(tax):
    t = tax.num_levels - 1
    for label in range(tax.level_sizes[t]):
        chained = label
        for lvl in range(t, 0, -1):
            chained = tax.parent(chained, lvl)
        assert coarsen_label(tax, label, t, 0) == chained == int(np.argmax(build_edge_matrix(tax, t, 0)[label]))
    np.testing.assert_array_equal(
        coarsen_labels(tax, np.arange(tax.level_sizes[t]), t, 0), np.argmax(build_edge_matrix(tax, t, 0), axis=1)
    )


def test_coarsen_label_examples():
    tax = two_level([0, 0, 1, 1], 2)
    assert coarsen_label(tax, 3, 1, 0) == 1
    with pytest.raises(TaxonomyError):
        coarsen_label(tax, 3, 1, 1)
    with pytest.raises(TaxonomyError):
        coarsen_label(tax, 4, 1, 0)


def test_marginalize_examples():
    e = build_edge_matrix(two_level([0, 0, 1, 1], 2), 1, 0)
    np.testing.assert_allclose(marginalize(np.array([0.1, 0.2, 0.3, 0.4]), e), [0.3, 0.7], atol=1e-15)
    np.testing.assert_array_equal(marginalize(np.eye(4)[2], e), [0.0, 1.0])


def test_marginalize_rejects_bad_input():
    e = build_edge_matrix(two_level([0, 0, 1, 1], 2), 1, 0)
    with pytest.raises(ValueError):
        marginalize(np.array([0.5, 0.5, 0.1, 0.0]), e)
    with pytest.raises(ValueError):
        marginalize(np.array([0.5, 0.5]), e)


def test_marginalize_random_50_to_10_matches_child_sums():
    rng = np.random.default_rng(1)
    tax = Taxonomy.random([10, 50], rng)
    q = rng.dirichlet(np.ones(50))
    out = marginalize(q, build_edge_matrix(tax, 1, 0))
    brute = [sum(q[i] for i in range(50) if tax.parent(i, 1) == j) for j in range(10)]
    np.testing.assert_allclose(out, brute, atol=1e-12, rtol=0)
    assert abs(out.sum() - 1.0) < 1e-9


def test_identity_ontology_marginalizes_to_itself():
    tax = Taxonomy.identity(7)
    q = np.random.default_rng(2).dirichlet(np.ones(7))
    np.testing.assert_array_equal(marginalize(q, build_edge_matrix(tax, 1, 0)), q)


def test_invariants_are_enforced():
    with pytest.raises(TaxonomyError):
        Taxonomy((3, 3), (np.array([0, 1, 2]),))
    with pytest.raises(TaxonomyError):
        Taxonomy((3, 4), (np.array([0, 0, 1, 1]),))  # label 2 childless
    with pytest.raises(TaxonomyError):
        Taxonomy((2, 3), (np.array([0, 1, 2]),))


@settings(max_examples=30, deadline=None)
@given(taxonomies())
def test_text_round_trip(tax):
    back = Taxonomy.from_text(tax.to_text())
    assert back.level_sizes == tax.level_sizes
    for a, b in zip(back.parent_maps, tax.parent_maps):
        np.testing.assert_array_equal(a, b)


def test_text_format_has_one_line_per_label(tmp_path):
    tax = Taxonomy.balanced([2, 3])
    path = tmp_path / "tax.txt"
    tax.save(path)
    rows = [line.split() for line in path.read_text().splitlines() if not line.startswith("#")]
    assert len(rows) == 2 + 6
    assert rows[0][3] == "-1"
    assert rows[-1][:2] == ["1", "5"] and rows[-1][3] == "1"
    with pytest.raises(TaxonomyError):
        Taxonomy.from_text("0 0 a -1\n1 0 b 0\n1 0 c 0\n")

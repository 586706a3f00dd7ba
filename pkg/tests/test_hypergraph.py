import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypercare.cohort import mask_to_basic
from hypercare.errors import EmptyAfterMask, EmptyGraph, EmptyGroup, GraphError
from hypercare.hypergraph import Hypergraph, build_basic_graph, build_finetune_graph, build_inference_graph
from hypercare.training import TrainConfig, finetune_subset

from conftest import make_cohort


def dual_consistent(g: Hypergraph) -> bool:
    en, ne = g.edge_nodes, g.node_edges
    pairs_e = {(v, e) for e, vs in enumerate(en) for v in vs}
    pairs_v = {(v, e) for v, es in enumerate(ne) for e in es}
    return pairs_e == pairs_v


class TestBasicGraph:
    def cohort(self):
        # c1=0, c2=1 basic; e1=2 extra
        return make_cohort([((0, 1), (1,), "basic_only", "pretrain_train"),
                            ((1, 2), (0,), "extra", "finetune_train")])

    def test_example(self):
        g = build_basic_graph(self.cohort())
        assert g.num_edges == 2 and g.num_nodes == 2
        assert g.edge_nodes == [[0, 1], [1]]
        assert g.node_edges[1] == [0, 1]
        assert dual_consistent(g)

    def test_no_extra_incidence(self, small_cohort):
        g = build_basic_graph(small_cohort)
        assert g.edge_idx.max() < small_cohort.n_basic

    def test_only_training_splits(self, small_cohort):
        g = build_basic_graph(small_cohort)
        by_id = small_cohort.by_id()
        assert {by_id[v].split for v in g.edge_visit_ids} <= {"pretrain_train", "finetune_train"}

    def test_empty(self):
        c = make_cohort([((0,), (1,), "extra", "test")])
        with pytest.raises(EmptyGraph):
            build_basic_graph(c)

    def test_deterministic(self, small_cohort):
        a, b = build_basic_graph(small_cohort), build_basic_graph(small_cohort)
        assert np.array_equal(a.edge_idx, b.edge_idx) and np.array_equal(a.node_idx, b.node_idx)
        assert a.edge_visit_ids == b.edge_visit_ids


class TestFinetuneGraph:
    def cohort(self):
        return make_cohort([((0, 2), (1,), "extra", "finetune_train"),
                            ((1,), (0,), "basic_only", "finetune_train"),
                            ((0,), (0,), "basic_only", "test")])

    def test_example(self):
        g = build_finetune_graph(self.cohort(), {1})
        assert g.num_edges == 2 and g.num_nodes == 3
        assert g.edge_nodes == [[0, 2], [1]]
        assert dual_consistent(g)

    def test_empty_basic_subset(self):
        with pytest.raises(EmptyGroup):
            build_finetune_graph(self.cohort(), set())

    def test_no_extra_visits(self):
        c = make_cohort([((0, 2), (1,), "extra", "test"), ((1,), (0,), "basic_only", "finetune_train")])
        with pytest.raises(EmptyGroup):
            build_finetune_graph(c, {1})

    def test_subset_must_be_basic_only_finetune(self):
        with pytest.raises(GraphError):
            build_finetune_graph(self.cohort(), {2})

    def test_extra_nodes_only_on_extra_edges(self, small_cohort):
        subset = finetune_subset(small_cohort, TrainConfig())
        g = build_finetune_graph(small_cohort, subset)
        by_id = small_cohort.by_id()
        for v, edges in enumerate(g.node_edges):
            if v >= small_cohort.n_basic:
                assert all(by_id[g.edge_visit_ids[e]].group == "extra" for e in edges)


class TestInferenceGraph:
    def base(self, cohort):
        return build_finetune_graph(cohort, finetune_subset(cohort, TrainConfig()))

    def test_appended_count_and_flags(self, small_cohort):
        base = self.base(small_cohort)
        g = build_inference_graph(base, small_cohort, "test", "full")
        n_test = len(small_cohort.select(splits=("test",)))
        assert g.num_edges == base.num_edges + n_test
        assert not g.predict_only[: base.num_edges].any() and g.predict_only[base.num_edges:].all()

    def test_scenarios_differ_only_in_extra_incidences_of_appended_edges(self, small_cohort):
        base = self.base(small_cohort)
        gb = build_inference_graph(base, small_cohort, "test", "basic")
        gf = build_inference_graph(base, small_cohort, "test", "full")
        n = small_cohort.n_basic
        for e, (nb, nf) in enumerate(zip(gb.edge_nodes, gf.edge_nodes)):
            if e < base.num_edges:
                assert nb == nf
            else:
                assert nb == [v for v in nf if v < n]

    def test_basic_equals_masked_cohort(self, small_cohort):
        base = self.base(small_cohort)
        gb = build_inference_graph(base, small_cohort, "test", "basic")
        gm = build_inference_graph(base, mask_to_basic(small_cohort), "test", "full")
        assert gb.edge_nodes == gm.edge_nodes

    def test_empty_after_mask(self):
        c = make_cohort([((0, 2), (1,), "extra", "finetune_train"),
                         ((1,), (0,), "basic_only", "finetune_train"),
                         ((2,), (0,), "extra", "test")])
        base = build_finetune_graph(c, {1})
        build_inference_graph(base, c, "test", "full")
        with pytest.raises(EmptyAfterMask):
            build_inference_graph(base, c, "test", "basic")

    def test_rejects_training_split(self, small_cohort):
        with pytest.raises(ValueError):
            build_inference_graph(self.base(small_cohort), small_cohort, "pretrain_train", "full")


edge_lists = st.integers(1, 12).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.sets(st.integers(0, n - 1), min_size=1), min_size=1, max_size=15)))


@settings(max_examples=60, deadline=None)
@given(edge_lists)
def test_incidence_counts_and_duality(data):
    n, edges = data
    g = Hypergraph.from_edges(n, [sorted(e) for e in edges], list(range(len(edges))))
    assert sum(map(len, g.edge_nodes)) == sum(map(len, g.node_edges)) == g.num_incidences
    assert dual_consistent(g)
    assert set(np.flatnonzero(g.isolated)) == set(range(n)) - set().union(*edges)
    for lst in g.node_edges:
        assert lst == sorted(lst)


def test_empty_edge_rejected():
    with pytest.raises(GraphError):
        Hypergraph.from_edges(3, [[0], []], [0, 1])


def test_shuffled_keeps_incidence_sets(small_cohort, rng):
    g = build_basic_graph(small_cohort)
    s = g.shuffled(rng)
    assert [sorted(e) for e in s.edge_nodes] == g.edge_nodes
    assert not np.array_equal(s.edge_idx, g.edge_idx)

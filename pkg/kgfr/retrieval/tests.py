from collections import deque

import numpy as np
from django.test import SimpleTestCase

from kgfr.exceptions import PreconditionError
from kgfr.graph_store.services import augment_inverse, build_graph
from kgfr.propagation.params import ModelParams
from kgfr.propagation.services import (
    AttentionTable, EntityScores, RetrievalSubgraph, propagate, score_entities
)
from kgfr.retrieval.services import (
    Path, build_bundle, bundle_to_document, edge_retrieve, node_retrieve, path_retrieve
)


def make_subgraph(edges, topics=(0,), extra_entities=()):
    edges = np.unique(np.asarray(edges, dtype=np.int64).reshape(-1, 3), axis=0)
    nodes = set(topics) | set(extra_entities) | set(edges[:, 0].tolist()) | set(edges[:, 2].tolist())
    return RetrievalSubgraph(topics=tuple(sorted(topics)),
                             reached_history=[np.array(sorted(topics), dtype=np.int64),
                                              np.array(sorted(nodes), dtype=np.int64)],
                             edge_history=[edges])


def brute_force_paths(edges, source, target, cap):
    """前向 BFS 求距离，再枚举所有恰好该长度的游走，按边序列字典序取前 cap 条"""
    out = {}
    for s, r, o in sorted(map(tuple, edges)):
        out.setdefault(s, []).append((s, r, o))
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for _, _, v in out.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    if target not in dist:
        return []
    length = dist[target]
    found = []

    def walk(u, prefix):
        if len(prefix) == length:
            if u == target:
                found.append(tuple(prefix))
            return
        for edge in out.get(u, ()):
            walk(edge[2], prefix + [edge])

    walk(source, [])
    return sorted(found)[:cap]


class NodeRetrievalTests(SimpleTestCase):

    def test_matches_full_sort(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(5, 60))
            scored = np.unique(rng.integers(0, n, size=n))
            scores = EntityScores(entity_ids=scored, values=np.round(rng.normal(size=len(scored)), 1))
            reached = np.unique(rng.integers(0, n, size=n))
            sub = RetrievalSubgraph(topics=(int(reached[0]),), reached_history=[reached])
            k = int(rng.integers(1, 15))
            expected = sorted(reached.tolist(), key=lambda e: (-scores.get(e), e))[:k]
            result = node_retrieve(scores, sub, k)
            self.assertEqual(result.entity_ids, expected)
            self.assertEqual(result.unreached, [])

    def test_candidates_filter(self):
        scores = EntityScores(entity_ids=np.array([1, 2, 3]), values=np.array([0.5, 2.0, 1.0]))
        sub = RetrievalSubgraph(topics=(0,), reached_history=[np.array([0, 1, 2, 3])])
        result = node_retrieve(scores, sub, 5, candidates_filter=[3, 1, 9, 7])
        self.assertEqual(result.candidates, [(3, 1.0), (1, 0.5)])
        self.assertEqual(result.unreached, [7, 9])

    def test_invalid_k(self):
        sub = RetrievalSubgraph(topics=(0,), reached_history=[np.array([0])])
        with self.assertRaises(PreconditionError):
            node_retrieve(EntityScores(np.array([0]), np.array([1.0])), sub, 0)


class EdgeRetrievalTests(SimpleTestCase):

    def test_ties_sorted_by_subject_and_relation(self):
        edges = np.array([[4, 1, 5], [2, 3, 5], [2, 0, 5], [0, 0, 6], [3, 2, 5]])
        per_layer = np.array([[0.5, 0.5, np.nan, 0.9, 0.1],
                              [np.nan, 0.2, 0.5, 0.9, 0.7]])
        table = AttentionTable(edges=edges, per_layer=per_layer)
        facts = edge_retrieve(table, 5, n=10)
        self.assertEqual([f.edge for f in facts], [(3, 2, 5), (2, 0, 5), (2, 3, 5), (4, 1, 5)])
        self.assertEqual([f.alpha_max for f in facts], [0.7, 0.5, 0.5, 0.5])
        self.assertEqual(len(edge_retrieve(table, 5, n=2)), 2)
        self.assertEqual(edge_retrieve(table, 9), [])

    def test_invalid_n(self):
        table = AttentionTable(edges=np.zeros((0, 3), dtype=np.int64), per_layer=np.zeros((1, 0)))
        with self.assertRaises(PreconditionError):
            edge_retrieve(table, 0, n=0)


class PathRetrievalTests(SimpleTestCase):

    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(5, 50))
            m = int(rng.integers(n, 2 * n + 1))
            edges = np.stack([rng.integers(0, n, m), rng.integers(0, 3, m), rng.integers(0, n, m)], axis=1)
            sub = make_subgraph(edges)
            edge_list = sub.reached_edges.tolist()
            for _ in range(5):
                source, target = (int(v) for v in rng.integers(0, n, 2))
                cap = int(rng.integers(1, 6))
                expected = brute_force_paths(edge_list, source, target, cap)
                paths = path_retrieve(sub, [source], [target], cap)
                self.assertEqual([p.edges for p in paths], expected)
                for path in paths:
                    self.assertEqual((path.source, path.target), (source, target))

    def test_diamond(self):
        sub = make_subgraph([(0, 0, 1), (0, 0, 2), (1, 0, 3), (2, 0, 3)])
        paths = path_retrieve(sub, [0], [3])
        self.assertEqual([p.edges for p in paths], [((0, 0, 1), (1, 0, 3)), ((0, 0, 2), (2, 0, 3))])
        self.assertEqual(len(path_retrieve(sub, [0], [3], cap=1)), 1)

    def test_source_is_topic(self):
        sub = make_subgraph([(0, 0, 1)])
        self.assertEqual(path_retrieve(sub, [0], [0]), [Path(0, 0, ())])

    def test_disconnected_pair(self):
        sub = make_subgraph([(0, 0, 1), (2, 0, 3)])
        self.assertEqual(path_retrieve(sub, [0], [3]), [])
        self.assertEqual(path_retrieve(sub, [1], [0]), [])

    def test_invalid_cap(self):
        with self.assertRaises(PreconditionError):
            path_retrieve(make_subgraph([(0, 0, 1)]), [0], [1], cap=0)


class BundleTests(SimpleTestCase):

    def setUp(self):
        self.graph = augment_inverse(build_graph([
            ('Paris', 'capital_of', 'France'),
            ('Lyon', 'located_in', 'France'),
            ('France', 'member_of', 'EU'),
        ]))
        rng = np.random.default_rng(0)
        self.params = ModelParams.initialize(2, 8, 4, seed=0).astype(np.float64)
        self.rel_init = rng.standard_normal((self.graph.num_relations, 8))
        self.q_emb = rng.standard_normal(8)
        self.topic = self.graph.entity_id('Paris')
        self.result = propagate(self.graph, self.q_emb, [self.topic], self.params, self.rel_init, lam=float('inf'))
        self.scores = score_entities(self.result.state, self.params)

    def test_bundle_parts(self):
        bundle = build_bundle(self.graph, self.result, self.scores, k=3, n=5, cap=2, label='first')
        nodes = node_retrieve(self.scores, self.result.subgraph, 3)
        self.assertEqual(bundle.candidates, nodes.candidates)
        self.assertEqual(bundle.topics, (self.topic,))
        self.assertFalse(bundle.is_empty())
        for path in bundle.paths:
            self.assertEqual(path.target, self.topic)
            self.assertIn(path.source, nodes.entity_ids)
        for fact in bundle.fact_union:
            self.assertTrue(self.result.subgraph.contains_edge(*fact.edge))
        self.assertTrue(bundle.edges() <= self.result.subgraph.edge_set())

    def test_document_uses_labels(self):
        bundle = build_bundle(self.graph, self.result, self.scores, k=3, label='first')
        document = bundle_to_document(self.graph, bundle)
        self.assertEqual(document['label'], 'first')
        self.assertEqual(document['topics'], ['Paris'])
        self.assertEqual(len(document['candidates']), len(bundle.candidates))
        labels = set(self.graph.entity_labels)
        for fact in document['facts']:
            self.assertIn(fact['triple'][0], labels)
            self.assertIn(fact['triple'][2], labels)

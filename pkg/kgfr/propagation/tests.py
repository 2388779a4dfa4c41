import tempfile
from collections import deque
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from kgfr.embeddings.services import HashEmbeddingProvider, fallback_descriptions, relation_embeddings
from kgfr.exceptions import (
    CapacityError, CheckpointError, ConfigurationError, PreconditionError, UnknownIdError
)
from kgfr.graph_store.services import augment_inverse, build_graph
from kgfr.graph_store.synthetic import hub_graph, random_graph
from kgfr.propagation.params import ModelParams, load_checkpoint, save_checkpoint
from kgfr.propagation.services import (
    attention, expand_subgraph, init_entities, propagate, score_entities, update_relations
)

INF = float('inf')


def random_case(seed, num_entities=25, num_relations=4, num_triples=60, dim=8, dim_attn=4, layers=2):
    rng = np.random.default_rng(seed)
    graph = augment_inverse(build_graph(random_graph(num_entities, num_relations, num_triples, seed=seed)))
    params = ModelParams.initialize(layers, dim, dim_attn, seed=seed).astype(np.float64)
    rel_init = rng.standard_normal((graph.num_relations, dim))
    q_emb = rng.standard_normal(dim)
    topics = sorted(set(rng.integers(0, graph.num_entities, size=2).tolist()))
    return graph, params, rel_init, q_emb, topics


def dense_forward(graph, params, rel_init, q_emb, sub):
    """逐边直写的 64 位参考实现，返回 |E| x d 的最终实体表示"""
    d = params.dim
    x = np.zeros((graph.num_entities, d))
    x[list(sub.topics)] = 1.0
    relations = np.array(rel_init, dtype=np.float64)
    for i in range(params.layers):
        relations = np.array([params['W1', i] @ np.concatenate([r, q_emb]) for r in relations])
        aggregate = np.zeros_like(x)
        for s, r, o in sub.edges_for_layer(i).tolist():
            hidden = np.maximum(params['W4', i] @ x[s] + params['W5', i] @ relations[r] + params['W6', i] @ q_emb, 0)
            alpha = 1.0 / (1.0 + np.exp(-(params['W3', i][0] @ hidden)))
            aggregate[o] += alpha * (x[s] + relations[r])
        x = aggregate @ params['W2', i].T
    return x


def bfs_closure(graph, topics, hops):
    neighbours = {}
    for s, _, o in graph.triples.tolist():
        neighbours.setdefault(s, set()).add(o)
    dist = {t: 0 for t in topics}
    queue = deque(topics)
    while queue:
        u = queue.popleft()
        if dist[u] == hops:
            continue
        for v in neighbours.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return set(dist)


class OperatorTests(SimpleTestCase):

    def test_identity_relation_update(self):
        params = ModelParams.zeros(1, 3, 2)
        params['W1', 0] = np.hstack([np.eye(3), np.zeros((3, 3))]).astype(np.float32)
        rel = np.arange(6, dtype=np.float32).reshape(2, 3)
        q = np.ones(3, dtype=np.float32)
        self.assertTrue(np.array_equal(update_relations(0, rel, q, params), rel))

    def test_relation_update_dimension_mismatch(self):
        params = ModelParams.zeros(1, 3, 2)
        with self.assertRaises(ConfigurationError):
            update_relations(0, np.zeros((2, 4)), np.zeros(3), params)

    def test_zero_attention_weights_give_one_half(self):
        params = ModelParams.initialize(1, 4, 2, seed=0)
        params['W3', 0] = np.zeros((1, 2), dtype=np.float32)
        self.assertEqual(attention(np.ones(4), np.ones(4), np.ones(4), 0, params), 0.5)

    def test_saturated_attention_stays_inside_open_interval(self):
        for dtype in (np.float32, np.float64):
            params = ModelParams.zeros(1, 4, 2, dtype=dtype)
            params['W6', 0] = np.ones((2, 4), dtype=dtype)
            for weight in (300.0, -300.0):
                params['W3', 0] = np.full((1, 2), weight, dtype=dtype)
                ones = np.ones(4, dtype=dtype)
                alpha = attention(ones, ones, ones, 0, params)
                self.assertGreater(alpha, 0.0)
                self.assertLess(alpha, 1.0)

    def test_topics_start_at_ones(self):
        graph = augment_inverse(build_graph([('A', 'r', 'B')]))
        state = init_entities(graph, [1], 5)
        self.assertTrue(np.array_equal(state.embedding(1), np.ones(5)))
        self.assertTrue(np.array_equal(state.embedding(0), np.zeros(5)))
        self.assertNotIn(0, state)

    def test_single_edge_worked_example(self):
        graph = augment_inverse(build_graph([('A', 'r', 'B')]))
        params = ModelParams.zeros(1, 2, 2, dtype=np.float64)
        params['W1', 0] = np.hstack([np.eye(2), np.zeros((2, 2))])
        params['W2', 0] = np.eye(2)
        params['W7'] = np.ones((1, 2))
        rel_init = np.array([[1.0, 2.0], [0.0, 0.0]])
        result = propagate(graph, np.zeros(2), [0], params, rel_init, lam=INF)
        self.assertEqual(result.subgraph.edge_set(), {(0, 0, 1)})
        self.assertTrue(np.array_equal(result.state.embedding(1), [1.0, 1.5]))
        # 没有自保留：主题实体没有入边时表示为零
        self.assertTrue(np.array_equal(result.state.embedding(0), [0.0, 0.0]))
        scores = score_entities(result.state, params)
        self.assertEqual(scores.get(1), 2.5)
        self.assertEqual(scores.get(0), 0.0)

    def test_invalid_topics(self):
        graph, params, rel_init, q_emb, _ = random_case(0)
        with self.assertRaises(PreconditionError):
            propagate(graph, q_emb, [], params, rel_init)
        with self.assertRaises(UnknownIdError):
            propagate(graph, q_emb, [graph.num_entities], params, rel_init)

    def test_negative_lambda(self):
        graph, _, _, _, topics = random_case(0)
        with self.assertRaises(ConfigurationError):
            expand_subgraph(graph, topics, 2, -1)

    def test_dimension_mismatch(self):
        graph, params, rel_init, _, topics = random_case(0)
        with self.assertRaises(ConfigurationError):
            propagate(graph, np.zeros(params.dim + 1), topics, params, rel_init)


class ForwardOracleTests(SimpleTestCase):

    def test_matches_dense_reimplementation(self):
        for seed in range(20):
            graph, params, rel_init, q_emb, topics = random_case(seed)
            result = propagate(graph, q_emb, topics, params, rel_init, lam=3)
            expected = dense_forward(graph, params, rel_init, q_emb, result.subgraph)
            actual = np.array([result.state.embedding(e) for e in range(graph.num_entities)])
            np.testing.assert_allclose(actual, expected, rtol=0, atol=1e-10)

    def test_zero_score_outside_reached_set(self):
        for seed in range(10):
            graph, params, rel_init, q_emb, topics = random_case(seed, num_entities=200, num_triples=300)
            result = propagate(graph, q_emb, topics, params, rel_init, lam=5)
            dense = score_entities(result.state, params).dense(graph.num_entities)
            reached = set(result.subgraph.reached_entities.tolist())
            for e in range(graph.num_entities):
                if e not in reached:
                    self.assertEqual(dense[e], 0.0)

    def test_attention_records_cover_active_layers(self):
        graph, params, rel_init, q_emb, topics = random_case(3)
        result = propagate(graph, q_emb, topics, params, rel_init, lam=INF)
        sub = result.subgraph
        first_hop = {tuple(e) for e in sub.frontier_history[0].tolist()}
        for i in range(len(result.attention)):
            record = result.attention.record(i)
            layers = [layer for layer, _ in record.alphas]
            self.assertEqual(layers, [0, 1] if record.edge in first_hop else [1])
            self.assertEqual(record.alpha_max, max(a for _, a in record.alphas))
            self.assertTrue(0.0 < record.alpha_max < 1.0)

    def test_reused_subgraph_gives_same_result(self):
        graph, params, rel_init, q_emb, topics = random_case(5)
        sub = expand_subgraph(graph, topics, params.layers, 4)
        a = propagate(graph, q_emb, topics, params, rel_init, lam=4)
        b = propagate(graph, q_emb, topics, params, rel_init, subgraph=sub)
        self.assertTrue(np.array_equal(a.state.embeddings, b.state.embeddings))


class ExpansionLawTests(SimpleTestCase):

    def graphs(self):
        for seed in range(20):
            yield augment_inverse(build_graph(random_graph(40, 4, 100, seed=seed))), seed
        for seed in range(5):
            yield augment_inverse(build_graph(hub_graph(120, 4, 150, num_hubs=3, hub_degree=60, seed=seed))), seed

    def test_lambda_monotonicity(self):
        for graph, seed in self.graphs():
            topics = [seed % graph.num_entities]
            previous = None
            for lam in (1, 5, 25, INF):
                sub = expand_subgraph(graph, topics, 3, lam)
                current = (set(sub.reached_entities.tolist()), sub.edge_set())
                if previous is not None:
                    self.assertLessEqual(previous[0], current[0])
                    self.assertLessEqual(previous[1], current[1])
                previous = current

    def test_unpruned_closure_equals_bfs(self):
        for graph, seed in self.graphs():
            topics = [seed % graph.num_entities, (seed * 7 + 3) % graph.num_entities]
            for hops in (1, 2, 3):
                sub = expand_subgraph(graph, topics, hops, INF)
                self.assertEqual(set(sub.reached_entities.tolist()), bfs_closure(graph, sorted(set(topics)), hops))

    def test_group_emission_bound(self):
        for graph, seed in self.graphs():
            log = []
            expand_subgraph(graph, [seed % graph.num_entities], 3, 10, instrument=log)
            self.assertTrue(log)
            for group in log:
                self.assertLessEqual(group.emitted, max(10, group.overlap))
                self.assertLessEqual(group.emitted, group.group_size)
                if group.pruned:
                    self.assertGreater(group.group_size, 10)
                    self.assertEqual(group.emitted, group.overlap)
                else:
                    self.assertEqual(group.emitted, group.group_size)

    def test_infinite_lambda_matches_no_pruning(self):
        for graph, seed in self.graphs():
            topics = [seed % graph.num_entities]
            a = expand_subgraph(graph, topics, 2, INF, asymmetric=True)
            b = expand_subgraph(graph, topics, 2, 1, asymmetric=False)
            self.assertEqual(a.edge_set(), b.edge_set())

    def test_progressive_expansion_is_local(self):
        # 两个互不相连的连通块，主题只在第一个块中
        near = [(f'a{i}', 'r', f'a{i + 1}') for i in range(5)]
        far = [(f'b{i}', 'r', f'b{i + 1}') for i in range(50)]
        graph = augment_inverse(build_graph(near + far))
        on = expand_subgraph(graph, [0], 2, INF, progressive=True)
        off = expand_subgraph(graph, [0], 2, INF, progressive=False)
        self.assertLess(on.num_entities, off.num_entities)
        self.assertLess(on.num_edges, off.num_edges)
        self.assertEqual(off.num_edges, len(graph))

    def test_edge_cap(self):
        graph = augment_inverse(build_graph(hub_graph(100, 3, 100, num_hubs=1, hub_degree=80, seed=0)))
        with self.assertRaises(CapacityError) as ctx:
            expand_subgraph(graph, [0], 3, INF, progressive=False, edge_cap=10)
        self.assertGreater(ctx.exception.edges, 10)


class LocalityTests(SimpleTestCase):

    def test_disconnected_component_changes_nothing(self):
        provider = HashEmbeddingProvider(8)
        for seed in range(10):
            base = random_graph(30, 3, 80, seed=seed)
            labels = sorted({r for _, r, _ in base})
            rng = np.random.default_rng(seed)
            extra = [(f'iso_{int(rng.integers(0, 100)):03d}', labels[int(rng.integers(0, len(labels)))],
                      f'iso_{int(rng.integers(0, 100)):03d}') for _ in range(150)]
            extra += [(f'iso_{i:03d}', labels[0], f'iso_{(i + 1) % 100:03d}') for i in range(100)]
            small = augment_inverse(build_graph(base))
            large = augment_inverse(build_graph(base + extra))
            self.assertEqual(small.num_relations, large.num_relations)

            params = ModelParams.initialize(2, 8, 4, seed=seed)
            q_emb = provider.encode(f'question {seed}').vector
            topics = [small.entity_id(base[0][0])]
            results = [
                propagate(g, q_emb, topics, params, relation_embeddings(g, fallback_descriptions(g), provider), lam=5)
                for g in (small, large)
            ]
            self.assertTrue(np.array_equal(results[0].state.entity_ids, results[1].state.entity_ids))
            self.assertTrue(np.array_equal(results[0].state.embeddings, results[1].state.embeddings))
            a = score_entities(results[0].state, params).dense(small.num_entities)
            b = score_entities(results[1].state, params).dense(large.num_entities)
            self.assertTrue(np.array_equal(a, b[:small.num_entities]))
            self.assertFalse(np.any(b[small.num_entities:]))


class CheckpointTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'model.ckpt'

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_exact(self):
        params = ModelParams.initialize(3, 16, 4, seed=9)
        save_checkpoint(params, self.path)
        loaded = load_checkpoint(self.path)
        self.assertTrue(loaded.equals(params))
        self.assertEqual((loaded.layers, loaded.dim, loaded.dim_attn), (3, 16, 4))

    def test_corrupt_files(self):
        params = ModelParams.initialize(1, 4, 2, seed=0)
        save_checkpoint(params, self.path)
        data = self.path.read_bytes()
        for broken in (b'XXXXXXXX' + data[8:], data[:-4], data + b'\x00'):
            self.path.write_bytes(broken)
            with self.assertRaises(CheckpointError):
                load_checkpoint(self.path)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(Path(self.tmp.name) / 'absent.ckpt')

    def test_initialization_is_seeded(self):
        self.assertTrue(ModelParams.initialize(2, 8, 4, seed=1).equals(ModelParams.initialize(2, 8, 4, seed=1)))
        self.assertFalse(ModelParams.initialize(2, 8, 4, seed=1).equals(ModelParams.initialize(2, 8, 4, seed=2)))

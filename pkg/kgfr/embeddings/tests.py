import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import requests
from django.test import SimpleTestCase

from kgfr.embeddings.services import (
    HashEmbeddingProvider, PrecomputedEmbeddingProvider, Provenance, RelationDescriptionTable,
    RemoteEncoderProvider, create_provider, describe_all_relations, fallback_descriptions,
    load_precomputed, relation_embeddings, save_precomputed
)
from kgfr.exceptions import CheckpointError, ConfigurationError, ProviderError, UnknownIdError
from kgfr.graph_store.services import augment_inverse, build_graph
from kgfr.reasoning.llm import ScriptedChatClient


class HashProviderTests(SimpleTestCase):

    def test_deterministic_unit_vectors(self):
        a, b = HashEmbeddingProvider(32, seed=1), HashEmbeddingProvider(32, seed=1)
        for text in ('', 'who founded it?', '中文问题'):
            va, vb = a.encode(text).vector, b.encode(text).vector
            self.assertEqual(va.shape, (32,))
            self.assertTrue(np.array_equal(va, vb))
            self.assertAlmostEqual(float(np.linalg.norm(va)), 1.0, places=5)
        self.assertEqual(a.encode('x').source_tag, 'hash')

    def test_seed_and_text_change_the_vector(self):
        provider = HashEmbeddingProvider(16)
        self.assertFalse(np.array_equal(provider.encode('a').vector, provider.encode('b').vector))
        self.assertFalse(np.array_equal(provider.encode('a').vector,
                                        HashEmbeddingProvider(16, seed=2).encode('a').vector))

    def test_no_collisions_on_many_texts(self):
        provider = HashEmbeddingProvider(8)
        vectors = provider.encode_many(f'text {i}' for i in range(500))
        self.assertEqual(len({v.tobytes() for v in vectors}), 500)

    def test_vectors_are_read_only(self):
        vector = HashEmbeddingProvider(4).encode('x').vector
        with self.assertRaises(ValueError):
            vector[0] = 1.0

    def test_cache_is_bounded(self):
        provider = HashEmbeddingProvider(8, cache_size=4)
        first = provider.encode('q0').vector
        self.assertIs(provider.encode('q0').vector, first)
        for i in range(1, 10):
            provider.encode(f'q{i}')
        info = provider.cache_info()
        self.assertEqual((info.maxsize, info.currsize), (4, 4))
        again = provider.encode('q0').vector
        self.assertIsNot(again, first)
        self.assertTrue(np.array_equal(again, first))

    def test_invalid_dimension(self):
        with self.assertRaises(ConfigurationError):
            HashEmbeddingProvider(0)
        with self.assertRaises(ConfigurationError):
            HashEmbeddingProvider(4, cache_size=-1)


class PrecomputedProviderTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'vectors.bin'

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_exact(self):
        rng = np.random.default_rng(0)
        vectors = {f'key {i}': rng.standard_normal(6).astype(np.float32) for i in range(10)}
        vectors['关系'] = rng.standard_normal(6).astype(np.float32)
        save_precomputed(vectors, 6, self.path)
        provider = load_precomputed(self.path, 6)
        self.assertEqual(len(provider), 11)
        for key, vector in vectors.items():
            self.assertEqual(provider.encode(key).vector.tobytes(), vector.tobytes())

    def test_dimension_mismatch(self):
        save_precomputed({'a': np.ones(4)}, 4, self.path)
        with self.assertRaises(ConfigurationError):
            load_precomputed(self.path, 8)

    def test_missing_key(self):
        provider = PrecomputedEmbeddingProvider({'a': np.ones(3)}, 3)
        self.assertIn('a', provider)
        with self.assertRaises(UnknownIdError):
            provider.encode('b')

    def test_bad_and_truncated_files(self):
        self.path.write_bytes(b'not an embedding file')
        with self.assertRaises(CheckpointError):
            load_precomputed(self.path, 4)
        save_precomputed({'a': np.ones(4), 'b': np.zeros(4)}, 4, self.path)
        self.path.write_bytes(self.path.read_bytes()[:-3])
        with self.assertRaises(CheckpointError):
            load_precomputed(self.path, 4)
        with self.assertRaises(CheckpointError):
            load_precomputed(Path(self.tmp.name) / 'absent.bin', 4)

    def test_create_provider_specs(self):
        save_precomputed({'a': np.ones(4)}, 4, self.path)
        self.assertIsInstance(create_provider(str(self.path), 4), PrecomputedEmbeddingProvider)
        self.assertEqual(create_provider('hash:7', 4).seed, 7)
        with self.assertRaises(ConfigurationError):
            create_provider('hash:abc', 4)


def _response(status, body=None):
    response = mock.Mock()
    response.status_code = status
    response.json.return_value = body or {}
    return response


class RemoteEncoderTests(SimpleTestCase):

    def test_openai_style_body(self):
        provider = RemoteEncoderProvider(3, url='http://encoder.local/embed', retry_budget=2)
        with mock.patch('kgfr.embeddings.services.requests.post',
                        return_value=_response(200, {'data': [{'embedding': [1, 2, 3]}]})) as post:
            vector = provider.encode('hello').vector
        self.assertEqual(vector.tolist(), [1.0, 2.0, 3.0])
        self.assertEqual(post.call_args.kwargs['json']['input'], 'hello')

    def test_dimension_mismatch(self):
        provider = RemoteEncoderProvider(4, url='http://encoder.local/embed', retry_budget=1)
        with mock.patch('kgfr.embeddings.services.requests.post',
                        return_value=_response(200, {'embedding': [1, 2, 3]})):
            with self.assertRaises(ConfigurationError):
                provider.encode('hello')

    def test_transport_failure_is_retried(self):
        provider = RemoteEncoderProvider(2, url='http://encoder.local/embed', retry_budget=2)
        side_effect = [requests.exceptions.ConnectionError('down'), _response(200, {'embedding': [0.5, 0.5]})]
        with mock.patch('kgfr.embeddings.services.requests.post', side_effect=side_effect) as post:
            vector = provider.encode('hello').vector
        self.assertEqual(post.call_count, 2)
        self.assertEqual(vector.tolist(), [0.5, 0.5])

    def test_client_error_is_not_retried(self):
        provider = RemoteEncoderProvider(2, url='http://encoder.local/embed', retry_budget=3)
        with mock.patch('kgfr.embeddings.services.requests.post', return_value=_response(400)) as post:
            with self.assertRaises(ProviderError) as ctx:
                provider.encode('hello')
        self.assertEqual(post.call_count, 1)
        self.assertFalse(ctx.exception.retryable)

    def test_malformed_body(self):
        provider = RemoteEncoderProvider(2, url='http://encoder.local/embed', retry_budget=3)
        not_json = _response(200)
        not_json.json.side_effect = ValueError('Expecting value: line 1 column 1 (char 0)')
        for response in (not_json, _response(200, {'data': [{'vector': [1, 2]}]}),
                         _response(200, {'embedding': ['a', 'b']})):
            with mock.patch('kgfr.embeddings.services.requests.post', return_value=response) as post:
                with self.assertRaises(ProviderError) as ctx:
                    provider.encode('hello')
            self.assertEqual(post.call_count, 1)
            self.assertFalse(ctx.exception.retryable)

    def test_missing_url(self):
        with self.settings(KGFR_ENCODER_URL=''):
            with self.assertRaises(ConfigurationError):
                RemoteEncoderProvider(2)


class RelationDescriptionTests(SimpleTestCase):

    def setUp(self):
        self.graph = augment_inverse(build_graph([('Paris', 'capital_of', 'France'),
                                                  ('Lyon', 'located_in', 'France')]))

    def test_describe_with_scripted_client(self):
        llm = ScriptedChatClient([
            {'match': r'Relation: capital_of\n', 'reply': 'Links a city to the country it is the capital of.'},
            {'match': r'Relation: located_in\n', 'reply': {'error': 'offline'}},
            {'match': r'Relation: .*\^-1', 'reply': '  Inverse\n direction.  ', 'times': None},
        ])
        table = describe_all_relations(self.graph, llm, samples_per_relation=2)
        self.assertEqual(len(table), self.graph.num_relations)
        self.assertEqual(table.entries[0], 'Links a city to the country it is the capital of.')
        self.assertEqual(table.provenance[0], Provenance.LLM_GENERATED)
        self.assertEqual(table.entries[1], 'located_in')
        self.assertEqual(table.provenance[1], Provenance.FALLBACK_NAME)
        self.assertEqual(table.entries[2], 'Inverse direction.')

    def test_prompt_carries_examples(self):
        llm = ScriptedChatClient([{'match': '.', 'reply': 'desc', 'times': None}])
        describe_all_relations(self.graph, llm, samples_per_relation=1)
        prompt = llm.transcript[0][0]
        self.assertIn('(Paris, capital_of, France)', prompt)

    def test_tsv_round_trip(self):
        table = fallback_descriptions(self.graph)
        table.set(0, 'a city that is the capital', Provenance.LLM_GENERATED)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'desc.tsv'
            table.save_tsv(self.graph, path)
            self.assertEqual(len(path.read_text(encoding='utf-8').splitlines()), self.graph.num_relations)
            loaded = RelationDescriptionTable.load_tsv(self.graph, path)
        self.assertEqual(loaded.entries, table.entries)
        self.assertTrue(all(p == Provenance.FILE_LOADED for p in loaded.provenance.values()))

    def test_incomplete_table_rejected(self):
        table = RelationDescriptionTable()
        table.set(0, 'only one', Provenance.FILE_LOADED)
        with self.assertRaises(ConfigurationError):
            relation_embeddings(self.graph, table, HashEmbeddingProvider(4))

    def test_relation_embeddings_follow_vocabulary_order(self):
        provider = HashEmbeddingProvider(8)
        matrix = relation_embeddings(self.graph, fallback_descriptions(self.graph), provider)
        self.assertEqual(matrix.shape, (self.graph.num_relations, 8))
        self.assertTrue(np.array_equal(matrix[2], provider.encode('capital_of^-1').vector))

import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from kgfr.exceptions import GraphFormatError, GraphStateError, UnknownIdError
from kgfr.graph_store.services import (
    INVERSE_SUFFIX, augment_inverse, build_graph, candidate_set, forward_label_triples,
    load_questions, load_triples, write_questions, write_triples
)
from kgfr.graph_store.synthetic import hub_graph, one_hop_task, random_graph


class TripleLoadingTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        path = self.dir / name
        path.write_text(text, encoding='utf-8')
        return path

    def test_duplicates_are_removed(self):
        path = self.write('g.tsv', "a\tr\tb\nb\tr\tc\na\tr\tb\nc\ts\ta\n")
        graph = load_triples(path)
        self.assertEqual(len(graph), 3)
        self.assertEqual(graph.entity_labels, ('a', 'b', 'c'))
        self.assertEqual([r.label for r in graph.relations], ['r', 's'])

    def test_missing_object_reports_line(self):
        path = self.write('g.tsv', "# comment\na\tr\tb\na\tr\t\n")
        with self.assertRaises(GraphFormatError) as ctx:
            load_triples(path)
        self.assertEqual(ctx.exception.line_no, 3)

    def test_empty_file(self):
        path = self.write('g.tsv', "# nothing here\n\n")
        with self.assertRaises(GraphFormatError):
            load_triples(path)

    def test_missing_file(self):
        with self.assertRaises(GraphFormatError):
            load_triples(self.dir / 'absent.tsv')

    def test_symmetric_pair(self):
        path = self.write('g.tsv', "A\tr\tB\nB\tr\tA\n")
        graph = load_triples(path)
        self.assertEqual((graph.num_entities, graph.num_relations, len(graph)), (2, 1, 2))
        self.assertFalse(graph.augmented)

    def test_reserved_suffix_rejected(self):
        path = self.write('g.tsv', f"a\tr{INVERSE_SUFFIX}\tb\n")
        with self.assertRaises(GraphFormatError):
            load_triples(path)

    def test_vocabulary_is_deterministic(self):
        path = self.dir / 'g.tsv'
        write_triples(random_graph(40, 4, 120, seed=3), path)
        first, second = load_triples(path), load_triples(path)
        self.assertEqual(first.entity_ids, second.entity_ids)
        self.assertEqual(first.relation_ids, second.relation_ids)
        self.assertTrue(np.array_equal(first.triples, second.triples))

    def test_object_only_entities_get_ids(self):
        graph = build_graph([('a', 'r', 'b')])
        self.assertEqual(graph.entity_id('b'), 1)
        self.assertEqual(graph.relation_groups(1), [])


class AugmentationTests(SimpleTestCase):

    def test_single_triple_doubles(self):
        graph = augment_inverse(build_graph([('A', 'r', 'B')]))
        self.assertEqual(len(graph), 2)
        self.assertEqual(graph.num_relations, 2)
        self.assertTrue(graph.has_triple(1, 1, 0))
        self.assertEqual(graph.relations[1].label, 'r' + INVERSE_SUFFIX)

    def test_symmetric_pair_enumeration(self):
        graph = augment_inverse(build_graph([('A', 'r', 'B'), ('B', 'r', 'A')]))
        self.assertEqual(graph.triple_set(), {(0, 0, 1), (1, 0, 0), (1, 1, 0), (0, 1, 1)})

    def test_count_law_and_involution(self):
        for seed in range(5):
            forward = build_graph(random_graph(30, 5, 90, seed=seed))
            graph = augment_inverse(forward)
            self.assertEqual(len(graph), 2 * len(forward))
            for r in range(graph.num_relations):
                self.assertEqual(graph.inverse_of(graph.inverse_of(r)), r)
                self.assertNotEqual(graph.inverse_of(r), r)

    def test_inverse_ids_are_offset(self):
        graph = augment_inverse(build_graph(random_graph(20, 3, 40, seed=1)))
        for r in range(graph.num_forward_relations):
            self.assertEqual(graph.inverse_of(r), r + graph.num_forward_relations)

    def test_self_loop(self):
        graph = augment_inverse(build_graph([('s', 'r', 's')]))
        self.assertTrue(graph.has_triple(0, 1, 0))

    def test_augment_twice_fails(self):
        graph = augment_inverse(build_graph([('A', 'r', 'B')]))
        with self.assertRaises(GraphStateError):
            augment_inverse(graph)

    def test_forward_export_drops_inverses(self):
        labelled = [('A', 'r', 'B'), ('B', 's', 'C')]
        graph = augment_inverse(build_graph(labelled))
        self.assertEqual(sorted(forward_label_triples(graph)), sorted(labelled))


class CandidateSetTests(SimpleTestCase):

    def test_direct_read_and_empty_group(self):
        graph = build_graph([('A', 'r', 'B'), ('A', 'r', 'C'), ('B', 's', 'C')])
        self.assertEqual(candidate_set(graph, 0, 0), [1, 2])
        self.assertEqual(candidate_set(graph, 0, 1), [])

    def test_unknown_ids(self):
        graph = build_graph([('A', 'r', 'B')])
        with self.assertRaises(UnknownIdError):
            candidate_set(graph, 5, 0)
        with self.assertRaises(UnknownIdError):
            candidate_set(graph, 0, 3)
        with self.assertRaises(KeyError):
            graph.entity_id('nobody')

    def test_hub_group(self):
        triples = [('hub', 'r', f'e{i}') for i in range(1000)]
        graph = build_graph(triples)
        self.assertEqual(len(graph.candidate_set(0, 0)), 1000)

    def test_matches_brute_force(self):
        graph = augment_inverse(build_graph(hub_graph(300, 6, 2000, num_hubs=2, hub_degree=150, seed=7)))
        triples = graph.triples.tolist()
        rng = np.random.default_rng(0)
        for _ in range(200):
            e = int(rng.integers(0, graph.num_entities))
            r = int(rng.integers(0, graph.num_relations))
            expected = sorted(o for s, rr, o in triples if s == e and rr == r)
            self.assertEqual(graph.candidate_set(e, r), expected)


class QuestionFileTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.graph = augment_inverse(build_graph([('A', 'r', 'B'), ('B', 'r', 'C'), ('A', 's', 'C')]))

    def tearDown(self):
        self.tmp.cleanup()

    def write_records(self, lines):
        path = self.dir / 'q.jsonl'
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return path

    def test_parse_records(self):
        path = self.write_records([
            '# header',
            json.dumps({'id': 'x', 'question': 'where?', 'topics': ['A'], 'answers': ['B', 'C']}),
            '',
            json.dumps({'question': 'which?', 'topics': 'B', 'answers': ['C'], 'candidates': ['A', 'C']}),
        ])
        questions = load_questions(path, self.graph)
        self.assertEqual(len(questions), 2)
        self.assertEqual(questions[0].qid, 'x')
        self.assertEqual(questions[0].answers, frozenset({1, 2}))
        self.assertIsNone(questions[0].candidates)
        self.assertEqual(questions[1].topic_entities, (1,))
        self.assertEqual(questions[1].candidates, frozenset({0, 2}))

    def test_unknown_label(self):
        path = self.write_records([json.dumps({'question': 'q', 'topics': ['Z']})])
        with self.assertRaises(GraphFormatError) as ctx:
            load_questions(path, self.graph)
        self.assertEqual(ctx.exception.line_no, 1)

    def test_unknown_answers_allowed(self):
        path = self.write_records([json.dumps({'question': 'q', 'topics': ['A'], 'answers': ['B', 'Nope']})])
        with self.assertRaises(GraphFormatError):
            load_questions(path, self.graph)
        questions = load_questions(path, self.graph, allow_unknown_answers=True)
        self.assertEqual(questions[0].answers, frozenset({1}))

    def test_answers_outside_candidates(self):
        path = self.write_records([json.dumps({'question': 'q', 'topics': ['A'], 'answers': ['B'],
                                               'candidates': ['C']})])
        with self.assertRaises(GraphFormatError):
            load_questions(path, self.graph)

    def test_write_then_load(self):
        path = self.write_records([json.dumps({'id': 'k', 'question': 'q', 'topics': ['A'], 'answers': ['C']})])
        questions = load_questions(path, self.graph)
        out = self.dir / 'copy.jsonl'
        write_questions(self.graph, questions, out)
        self.assertEqual(load_questions(out, self.graph), questions)


class SyntheticTaskTests(SimpleTestCase):

    def test_one_hop_answers_are_unique_neighbours(self):
        triples, records = one_hop_task(num_entities=200, num_relations=8, num_questions=150, seed=0)
        graph = build_graph(triples)
        self.assertEqual(len(records), 150)
        for record in records:
            s = graph.entity_id(record['topics'][0])
            r = graph.relation_id(record['question'].split()[-1].rstrip('?'))
            self.assertEqual(graph.candidate_set(s, r), [graph.entity_id(record['answers'][0])])

    def test_one_hop_is_seeded(self):
        self.assertEqual(one_hop_task(seed=4), one_hop_task(seed=4))

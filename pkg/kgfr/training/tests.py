import json
import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from kgfr.embeddings.services import HashEmbeddingProvider, fallback_descriptions, relation_embeddings
from kgfr.evaluation.services import EngineSettings, evaluate_retriever
from kgfr.exceptions import ConfigurationError, NumericError, PreconditionError, TrainingError
from kgfr.graph_store.services import QuestionInstance, augment_inverse, build_graph, parse_question_record
from kgfr.graph_store.synthetic import one_hop_task, random_graph
from kgfr.propagation.params import ModelParams, parameter_names
from kgfr.propagation.services import expand_subgraph
from kgfr.training.services import (
    Adam, GradientSet, TrainConfig, backward, gradient_check, loss, prepare_questions, question_gradients,
    retriever_h1, train
)


def toy_instance(seed):
    """不超过 20 个实体、60 条增强三元组的小图，以及一个答案已被到达的问题"""
    rng = np.random.default_rng(seed)
    graph = augment_inverse(build_graph(random_graph(15, 3, 25, seed=seed)))
    topic = int(rng.integers(0, graph.num_entities))
    reached = expand_subgraph(graph, [topic], 2, 100).reached_entities.tolist()
    others = [e for e in reached if e != topic] or [topic]
    question = QuestionInstance(text=f'toy {seed}', topic_entities=(topic,),
                                answers=frozenset({others[int(rng.integers(0, len(others)))]}), qid=str(seed))
    params = ModelParams.initialize(2, 8, 4, seed=seed).astype(np.float64)
    rel_init = 0.5 * rng.standard_normal((graph.num_relations, 8))
    q_emb = rng.standard_normal(8)
    return graph, params, rel_init, q_emb, question


def one_hop_split(num_train=120, seed=0):
    triples, records = one_hop_task(num_entities=200, num_relations=8, num_questions=150, seed=seed)
    graph = augment_inverse(build_graph(triples))
    questions = [parse_question_record(graph, record) for record in records]
    return graph, questions[:num_train], questions[num_train:]


class LossTests(SimpleTestCase):

    def test_two_entity_example(self):
        self.assertAlmostEqual(loss({0: 0.0, 1: 0.0}, [0], [0, 1]), math.log(2), places=12)

    def test_unlisted_entities_score_zero(self):
        value = loss({0: 2.0}, [0], range(4))
        self.assertAlmostEqual(value, math.log(math.exp(2) + 3) - 2.0, places=12)

    def test_answers_equal_all_entities(self):
        self.assertEqual(loss({0: 5.0, 1: -3.0, 2: 1.0}, [0, 1, 2], [0, 1, 2]), 0.0)

    def test_empty_answers(self):
        with self.assertRaises(PreconditionError):
            loss({0: 1.0}, [], [0, 1])

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            values = rng.normal(0, 3, size=n)
            answers = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist()
            naive = math.log(sum(math.exp(v) for v in values)) - math.log(sum(math.exp(values[a]) for a in answers))
            expected = 0.0 if len(answers) == n else max(0.0, naive)
            actual = loss(dict(enumerate(values.tolist())), answers, range(n))
            self.assertAlmostEqual(actual, expected, delta=1e-10)

    def test_large_scores_are_stable(self):
        value = loss({0: 1000.0, 1: 999.0}, [1], [0, 1])
        self.assertAlmostEqual(value, math.log(1 + math.e), places=9)


class GradientTests(SimpleTestCase):

    def test_finite_differences(self):
        for seed in (0, 1, 2):
            graph, params, rel_init, q_emb, question = toy_instance(seed)
            entries = gradient_check(graph, params, rel_init, q_emb, question, lam=100, samples_per_matrix=4,
                                     h=1e-3, seed=seed)
            self.assertEqual({e.name for e in entries}, set(parameter_names(2)))
            checked = [e for e in entries if not e.skipped]
            self.assertGreater(len(checked), len(entries) // 2)
            for entry in checked:
                self.assertLessEqual(entry.relative_error, 1e-4,
                                     f'{entry.name}{entry.index}: {entry.analytic} vs {entry.numeric}')

    def test_zero_output_weights(self):
        graph, params, rel_init, q_emb, question = toy_instance(4)
        params['W7'] = np.zeros((1, params.dim))
        step = question_gradients(graph, params, rel_init, q_emb, question)
        self.assertAlmostEqual(step.loss, math.log(graph.num_entities / len(question.answers)), places=12)
        for name, value in step.gradients.items():
            if name != 'W7':
                self.assertFalse(np.any(value), name)

        state = step.result.state
        weights = np.array([1.0 / graph.num_entities - (e in question.answers) / len(question.answers)
                            for e in state.entity_ids.tolist()])
        np.testing.assert_allclose(step.gradients['W7'][0], weights @ state.embeddings, rtol=0, atol=1e-12)

    def test_gradients_do_not_touch_parameters(self):
        graph, params, rel_init, q_emb, question = toy_instance(5)
        before = params.copy()
        question_gradients(graph, params, rel_init, q_emb, question)
        self.assertTrue(params.equals(before))

    def test_backward_sums_questions(self):
        graph, params, rel_init, _, question = toy_instance(6)
        provider = HashEmbeddingProvider(8)
        other = QuestionInstance(text='another', topic_entities=question.topic_entities,
                                 answers=question.answers, qid='b')
        config = TrainConfig(layers=2, dim=8, dim_attn=4)
        total, grads = backward([question, other], graph, params, provider, rel_init, config)
        parts = [question_gradients(graph, params, rel_init, provider.encode(q.text).vector, q) for q in (question, other)]
        self.assertAlmostEqual(total, parts[0].loss + parts[1].loss, places=10)
        np.testing.assert_allclose(grads['W7'], parts[0].gradients['W7'] + parts[1].gradients['W7'], atol=1e-12)

    def test_non_finite_gradient_names_parameter(self):
        grads = GradientSet.zeros_like(ModelParams.zeros(1, 2, 2))
        grads['W5', 0][0, 0] = np.nan
        with self.assertRaises(NumericError) as ctx:
            grads.check_finite()
        self.assertIn('W5[0]', str(ctx.exception))


class AdamTests(SimpleTestCase):

    def test_zero_learning_rate_keeps_parameters(self):
        params = ModelParams.initialize(1, 4, 2, seed=0)
        before = params.copy()
        grads = GradientSet.zeros_like(params)
        for _, value in grads.items():
            value += 1.0
        Adam(params, lr=0.0).step(params, grads)
        self.assertTrue(params.equals(before))

    def test_first_step_moves_by_learning_rate(self):
        params = ModelParams.zeros(1, 2, 2, dtype=np.float64)
        grads = GradientSet.zeros_like(params)
        grads['W7'][:] = 2.0
        grads['W2', 0][:] = -0.5
        Adam(params, lr=0.1).step(params, grads)
        np.testing.assert_allclose(params['W7'], -0.1, rtol=1e-6)
        np.testing.assert_allclose(params['W2', 0], 0.1, rtol=1e-6)
        self.assertFalse(np.any(params['W1', 0]))

    def test_negative_learning_rate(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig(learning_rate=-1e-3)


class TrainingLoopTests(SimpleTestCase):

    def test_empty_dataset(self):
        graph, train_set, dev = one_hop_split()
        with self.assertRaises(PreconditionError):
            train([], dev, graph, HashEmbeddingProvider(8), TrainConfig(layers=1, dim=8, dim_attn=4))

    def test_unreachable_answers(self):
        graph = augment_inverse(build_graph([('A', 'r', 'B'), ('C', 'r', 'D')]))
        question = QuestionInstance(text='q', topic_entities=(0,), answers=frozenset({3}))
        with self.assertRaises(TrainingError):
            train([question], [], graph, HashEmbeddingProvider(8), TrainConfig(layers=1, dim=8, dim_attn=4))

    def test_provider_dimension_must_match(self):
        graph, train_set, dev = one_hop_split()
        with self.assertRaises(ConfigurationError):
            train(train_set, dev, graph, HashEmbeddingProvider(16), TrainConfig(layers=1, dim=8, dim_attn=4))

    def test_patience_stops_a_flat_run(self):
        graph, train_set, dev = one_hop_split()
        config = TrainConfig(learning_rate=0.0, max_epochs=20, patience=3, layers=1, dim=8, dim_attn=4)
        initial = ModelParams.initialize(1, 8, 4, seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            log_path = Path(tmp) / 'train.jsonl'
            best, log = train(train_set[:20], dev[:10], graph, HashEmbeddingProvider(8), config,
                              params=initial, log_path=log_path)
            lines = [json.loads(line) for line in log_path.read_text(encoding='utf-8').splitlines()]
        self.assertTrue(log.stopped_early)
        self.assertEqual(len(log.epochs), 4)
        self.assertEqual(log.best_epoch, 1)
        self.assertTrue(best.equals(initial))
        self.assertEqual([line['epoch'] for line in lines], [1, 2, 3, 4])
        self.assertEqual(set(lines[0]), {'epoch', 'mean_loss', 'dev_h1', 'seconds', 'skipped'})

    def test_training_is_deterministic(self):
        graph, train_set, dev = one_hop_split()
        config = TrainConfig(learning_rate=1e-2, max_epochs=2, patience=5, layers=1, dim=8, dim_attn=4)
        first, _ = train(train_set[:30], dev[:10], graph, HashEmbeddingProvider(8), config)
        second, _ = train(train_set[:30], dev[:10], graph, HashEmbeddingProvider(8), config)
        self.assertTrue(first.equals(second))

    def test_learns_one_hop_questions(self):
        graph, train_set, dev = one_hop_split()
        provider = HashEmbeddingProvider(32)
        config = TrainConfig(learning_rate=1e-2, max_epochs=50, patience=5, layers=1, dim=32, dim_attn=16)
        params, log = train(train_set, dev, graph, provider, config, descriptions=fallback_descriptions(graph))
        self.assertGreaterEqual(log.best_dev_h1, 0.8)

        self.assertLess(log.epochs[-1].mean_loss, log.epochs[0].mean_loss)

    def test_dev_metric_matches_retriever_only_evaluation(self):
        graph, _, dev = one_hop_split()
        provider = HashEmbeddingProvider(8)
        config = TrainConfig(layers=1, dim=8, dim_attn=4)
        params = ModelParams.initialize(1, 8, 4, seed=3)
        prepared, skipped = prepare_questions(dev, graph, provider, config, require_reached_answer=False)
        rel_init = relation_embeddings(graph, fallback_descriptions(graph), provider)
        report = evaluate_retriever(dev, graph, params, provider,
                                    EngineSettings(layers=1, dim=8, dim_attn=4, lam=config.lam, k=5))
        self.assertEqual(skipped, 0)
        self.assertEqual(len(prepared), len(report.rows))
        self.assertAlmostEqual(retriever_h1(prepared, graph, params, rel_init), report.h1_rate)

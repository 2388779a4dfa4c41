import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from kgfr.embeddings.services import HashEmbeddingProvider
from kgfr.evaluation.metrics import metric_f1, metric_h1, metric_hit
from kgfr.evaluation.services import (
    BENCH_COLUMNS, EngineSettings, EvalReport, QuestionReport, bench_app, evaluate_pipeline, evaluate_retriever
)
from kgfr.exceptions import ConfigurationError, PreconditionError
from kgfr.graph_store.services import QuestionInstance, augment_inverse, build_graph
from kgfr.graph_store.synthetic import hub_graph
from kgfr.propagation.params import ModelParams, save_checkpoint
from kgfr.reasoning.llm import ScriptedChatClient
from kgfr.reasoning.services import PipelineConfig

INF = float('inf')


def europe_graph():
    return augment_inverse(build_graph([
        ('Paris', 'capital_of', 'France'),
        ('Lyon', 'located_in', 'France'),
        ('France', 'member_of', 'EU'),
        ('Berlin', 'capital_of', 'Germany'),
        ('Germany', 'member_of', 'EU'),
    ]))


def write_rules(path, rules):
    with open(path, 'w', encoding='utf-8') as f:
        for rule in rules:
            f.write(json.dumps(rule) + '\n')


class MetricTests(SimpleTestCase):

    def test_f1_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred = set(rng.integers(0, 10, size=int(rng.integers(0, 6))).tolist())
            gold = set(rng.integers(0, 10, size=int(rng.integers(0, 6))).tolist())
            tp = sum(1 for p in pred if p in gold)
            if not pred and not gold:
                expected = 1.0
            elif tp == 0:
                expected = 0.0
            else:
                expected = 2 * tp / (len(pred) + len(gold))
            self.assertAlmostEqual(metric_f1(pred, gold), expected, places=12)

    def test_worked_examples(self):
        self.assertAlmostEqual(metric_f1(['a'], ['a', 'b']), 0.6667, places=4)
        self.assertEqual(metric_f1([], ['a']), 0.0)
        self.assertEqual(metric_f1([], []), 1.0)
        self.assertTrue(metric_hit(['x', 'a'], ['a']))
        self.assertFalse(metric_hit([], ['a']))
        self.assertFalse(metric_h1(['x', 'a'], ['a']))
        self.assertTrue(metric_h1(['a', 'x'], ['a']))
        self.assertFalse(metric_h1([], []))


class EngineSettingsTests(SimpleTestCase):

    def test_preset_with_overrides(self):
        settings = EngineSettings.from_preset('desk', k=5, lam=INF, layers=None)
        self.assertEqual(settings.k, 5)
        self.assertEqual(settings.lam, INF)
        self.assertEqual(settings.layers, 2)

    def test_unknown_preset(self):
        with self.assertRaises(ConfigurationError):
            EngineSettings.from_preset('nonexistent')

    def test_invalid_values(self):
        with self.assertRaises(ConfigurationError):
            EngineSettings(k=0)
        with self.assertRaises(ConfigurationError):
            EngineSettings(lam=-1)

    def test_checkpoint_dimensions_win(self):
        params = ModelParams.zeros(1, 8, 4)
        adopted = EngineSettings(dim=64).adopt_checkpoint(params)
        self.assertEqual((adopted.layers, adopted.dim, adopted.dim_attn), (1, 8, 4))
        with self.assertRaises(ConfigurationError):
            EngineSettings(dim=64).adopt_checkpoint(params, explicit=['dim'])

    def test_ablation_switches(self):
        config = EngineSettings(k=7).pipeline_config(use_nodes=False, use_reflection=False)
        self.assertEqual(config.k, 7)
        self.assertFalse(config.use_nodes)
        self.assertFalse(config.use_reflection)
        self.assertTrue(config.use_facts and config.use_paths and config.verbalize)
        with self.assertRaises(ConfigurationError):
            EngineSettings().pipeline_config(use_edges=False)


class EvalReportTests(SimpleTestCase):

    def test_aggregates(self):
        rows = [
            QuestionReport('a', ['x'], ['x'], 1.0, True, True, 'confirmed', 1, llm_calls=2),
            QuestionReport('b', ['y', 'x'], ['x'], 2 / 3, True, False, 'exhausted', 3, llm_calls=6),
            QuestionReport('c', [], ['z'], 0.0, False, False, 'failed', 1, llm_calls=1),
        ]
        report = EvalReport(rows)
        self.assertEqual(report.count, 3)
        self.assertEqual(report.failed, 1)
        self.assertAlmostEqual(report.mean_f1, 5 / 9)
        self.assertAlmostEqual(report.hit_rate, 2 / 3)
        self.assertAlmostEqual(report.h1_rate, 1 / 3)
        self.assertAlmostEqual(report.mean_llm_calls, 3.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'rows.jsonl'
            report.write_jsonl(path)
            lines = [json.loads(line) for line in path.read_text(encoding='utf-8').splitlines()]
        self.assertEqual([line['id'] for line in lines], ['a', 'b', 'c'])
        self.assertEqual(set(lines[0]), {'id', 'predicted', 'gold', 'f1', 'hit', 'h1', 'status', 'steps'})

    def test_empty_report(self):
        self.assertEqual(EvalReport().summary()['f1'], 0.0)


class PipelineEvaluationTests(SimpleTestCase):

    def setUp(self):
        self.graph = europe_graph()
        self.params = ModelParams.initialize(2, 8, 4, seed=0)
        self.provider = HashEmbeddingProvider(8)
        e = self.graph.entity_id
        self.questions = [
            QuestionInstance('Which country is Paris the capital of?', (e('Paris'),), frozenset({e('France')}), qid='1'),
            QuestionInstance('Which country is Berlin the capital of?', (e('Berlin'),),
                             frozenset({e('Germany')}), qid='2'),
            QuestionInstance('Where is Lyon?', (e('Lyon'),), frozenset({e('France')}), qid='3'),
        ]

    def test_three_questions_in_order(self):
        llm = ScriptedChatClient([
            {'match': r'Question: Which country is Paris.*ANSWERS: <answer>', 'reply': '```\nANSWERS: France\n```',
             'times': None},
            {'match': r'Question: Which country is Berlin.*ANSWERS: <answer>',
             'reply': '```\nANSWERS: France | Germany\n```', 'times': None},
            {'match': r'Question: Which country.*Current answers', 'reply': 'STATUS: confirmed', 'times': None},
        ])
        config = PipelineConfig(k=5, n=5, max_steps=2, lam=INF)
        report = evaluate_pipeline(self.questions, self.graph, self.params, self.provider, llm, config, workers=2)
        self.assertEqual([row.qid for row in report.rows], ['1', '2', '3'])
        self.assertEqual(report.rows[0].f1, 1.0)
        self.assertAlmostEqual(report.rows[1].f1, 2 / 3)
        self.assertFalse(report.rows[1].h1)
        self.assertEqual(report.rows[2].status, 'failed')
        self.assertEqual(report.rows[2].f1, 0.0)
        self.assertEqual(report.failed, 1)
        self.assertAlmostEqual(report.mean_f1, 5 / 9)

    def test_invalid_workers(self):
        with self.assertRaises(ConfigurationError):
            evaluate_pipeline(self.questions, self.graph, self.params, self.provider,
                              ScriptedChatClient([]), PipelineConfig(), workers=0)

    def test_retriever_only(self):
        settings = EngineSettings(layers=2, dim=8, dim_attn=4, k=3, lam=INF)
        report = evaluate_retriever(self.questions, self.graph, self.params, self.provider, settings)
        self.assertEqual(len(report.rows), 3)
        for row in report.rows:
            self.assertLessEqual(len(row.ranked), 3)
            self.assertEqual(row.h1, bool(row.ranked) and row.ranked[0] in row.gold)
            self.assertEqual(row.hit, bool(set(row.ranked) & set(row.gold)))
        self.assertIn('hit@3', report.summary())
        self.assertEqual(len(report.to_frame()), 3)


class BenchTests(SimpleTestCase):

    def setUp(self):
        self.graph = augment_inverse(build_graph(hub_graph(300, 6, 1500, num_hubs=2, hub_degree=120, seed=3)))
        rng = np.random.default_rng(0)
        self.questions = [QuestionInstance(f'q{i}', (int(e),), qid=str(i))
                          for i, e in enumerate(rng.integers(0, self.graph.num_entities, size=5))]

    def test_grid_and_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'bench.csv'
            frame = bench_app(self.graph, self.questions, [10, INF], out=out)
            written = pd.read_csv(out, keep_default_na=False)
        self.assertEqual(list(frame.columns), BENCH_COLUMNS)
        self.assertEqual(list(written.columns), BENCH_COLUMNS)
        self.assertEqual(len(frame), 8)
        self.assertTrue((frame['status'] == 'ok').all())
        unbounded = frame[frame['lambda'] == 'inf'].set_index(['pe', 'ap'])
        for pe in ('on', 'off'):
            self.assertEqual(unbounded.loc[(pe, 'on'), 'mean_facts'], unbounded.loc[(pe, 'off'), 'mean_facts'])
        bounded = frame[frame['lambda'] == '10'].set_index(['pe', 'ap'])
        self.assertLessEqual(bounded.loc[('on', 'on'), 'mean_facts'], unbounded.loc[('on', 'on'), 'mean_facts'])

    def test_exceeded_rows(self):
        frame = bench_app(self.graph, self.questions, [INF], edge_cap=1)
        self.assertTrue((frame['status'] == 'exceeded').all())
        self.assertTrue(frame['mean_entities'].isna().all())

    def test_empty_inputs(self):
        with self.assertRaises(PreconditionError):
            bench_app(self.graph, [], [10])
        with self.assertRaises(PreconditionError):
            bench_app(self.graph, self.questions, [])


class CommandTests(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def call(self, name, **options):
        out = StringIO()
        call_command(name, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()

    def test_synth_train_eval(self):
        self.call('kgfr_synth', kind='one-hop', entities=120, relations=4, questions=30, out=str(self.dir))
        graph, questions = self.dir / 'graph.tsv', self.dir / 'questions.jsonl'
        self.assertEqual(len(questions.read_text(encoding='utf-8').splitlines()), 30)

        checkpoint = self.dir / 'model.ckpt'
        output = self.call('kgfr_train', graph=str(graph), questions=str(questions), checkpoint=str(checkpoint),
                           layers=1, dim=8, dim_attn=4, lr=0.01, max_epochs=2, patience=2,
                           log=str(self.dir / 'train.jsonl'))
        self.assertTrue(checkpoint.is_file())
        self.assertIn(str(checkpoint), output)

        output = self.call('kgfr_eval', graph=str(graph), questions=str(questions), checkpoint=str(checkpoint),
                           retriever_only=True, k=5, csv=str(self.dir / 'retriever.csv'))
        summary = json.loads(output.strip().splitlines()[-1])
        self.assertEqual(summary['questions'], 30)
        self.assertIn('hit@5', summary)

        rules = self.dir / 'rules.jsonl'
        write_rules(rules, [
            {'match': 'ANSWERS: <answer>', 'reply': '```\nANSWERS: #1\n```', 'times': None},
            {'match': 'Current answers', 'reply': '```\nSTATUS: confirmed\n```', 'times': None},
        ])
        rows = self.dir / 'rows.jsonl'
        output = self.call('kgfr_eval', graph=str(graph), questions=str(questions), checkpoint=str(checkpoint),
                           llm=f'scripted:{rules}', workers=2, out=str(rows))
        summary = json.loads(output.strip().splitlines()[-1])
        self.assertEqual(summary['questions'], 30)
        self.assertEqual(summary['failed'], 0)
        self.assertEqual(summary['mean_llm_calls'], 2.0)
        records = [json.loads(line) for line in rows.read_text(encoding='utf-8').splitlines()]
        self.assertEqual(len(records), 30)
        self.assertTrue(all(r['status'] == 'confirmed' for r in records))

        write_rules(rules, [{'match': 'ANSWERS: <answer>', 'reply': '```\nANSWERS: unknown\n```', 'times': None}])
        output = self.call('kgfr_eval', graph=str(graph), questions=str(questions), checkpoint=str(checkpoint),
                           llm=f'scripted:{rules}', no_reflection=True, no_node=True, no_edge=True, no_path=True,
                           no_descriptions=True, descriptions=str(self.dir / 'absent.tsv'))
        summary = json.loads(output.strip().splitlines()[-1])
        self.assertEqual(summary['failed'], 0)
        self.assertEqual(summary['mean_llm_calls'], 1.0)
        self.assertIn('--no-descriptions', output)

    def test_ask_with_missing_checkpoint(self):
        graph = self.dir / 'graph.tsv'
        graph.write_text('Paris\tcapital_of\tFrance\n', encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            self.call('kgfr_ask', graph=str(graph), checkpoint=str(self.dir / 'absent.ckpt'),
                      question='Which country?', topics=['Paris'], llm='scripted:unused')
        self.assertEqual(ctx.exception.returncode, 4)
        self.assertIn('CheckpointError', str(ctx.exception))

    def test_ask_saves_session(self):
        graph = self.dir / 'graph.tsv'
        graph.write_text('Paris\tcapital_of\tFrance\nLyon\tlocated_in\tFrance\n', encoding='utf-8')
        checkpoint = self.dir / 'model.ckpt'
        save_checkpoint(ModelParams.initialize(2, 8, 4, seed=0), checkpoint)
        rules = self.dir / 'rules.jsonl'
        write_rules(rules, [
            {'match': 'ANSWERS: <answer>', 'reply': '```\nANSWERS: France\n```', 'times': None},
            {'match': 'Current answers', 'reply': '```\nSTATUS: confirmed\n```', 'times': None},
        ])
        transcript = self.dir / 'transcript.jsonl'
        output = self.call('kgfr_ask', graph=str(graph), checkpoint=str(checkpoint), question='Paris is in?',
                           topics=['Paris'], llm=f'scripted:{rules}', out=str(transcript), save=True)
        self.assertIn('France', output)
        self.assertIn('confirmed', output)
        kinds = [json.loads(line)['kind'] for line in transcript.read_text(encoding='utf-8').splitlines()]
        self.assertEqual(kinds, ['answer', 'reflect'])

    def test_build_and_describe(self):
        graph = self.dir / 'graph.tsv'
        graph.write_text('a\tr\tb\nb\ts\tc\na\tr\tb\n', encoding='utf-8')
        normalized = self.dir / 'normalized.tsv'
        output = self.call('kgfr_build', graph=str(graph), out=str(normalized))
        self.assertIn('正向三元组: 2', output)
        self.assertEqual(len(normalized.read_text(encoding='utf-8').splitlines()), 2)

        rules = self.dir / 'rules.jsonl'
        write_rules(rules, [{'match': '.', 'reply': 'A relation between two things.', 'times': None}])
        descriptions, templates = self.dir / 'desc.tsv', self.dir / 'templates.tsv'
        self.call('kgfr_describe', graph=str(normalized), llm=f'scripted:{rules}', out=str(descriptions),
                  templates=str(templates))
        self.assertEqual(len(descriptions.read_text(encoding='utf-8').splitlines()), 4)
        self.assertEqual(len(templates.read_text(encoding='utf-8').splitlines()), 4)

    def test_bench_csv(self):
        self.call('kgfr_synth', kind='one-hop', entities=120, relations=4, questions=10, out=str(self.dir))
        out = self.dir / 'bench.csv'
        self.call('kgfr_bench', graph=str(self.dir / 'graph.tsv'), questions=str(self.dir / 'questions.jsonl'),
                  lambdas='10,inf', pe='on', ap='both', out=str(out))
        frame = pd.read_csv(out, dtype={'lambda': str})
        self.assertEqual(list(frame.columns), BENCH_COLUMNS)
        self.assertEqual(len(frame), 4)
        self.assertEqual(sorted(set(frame['lambda'])), ['10', 'inf'])

    def test_invalid_llm_spec(self):
        self.call('kgfr_synth', kind='random', entities=20, relations=2, triples=40, out=str(self.dir))
        with self.assertRaises(CommandError) as ctx:
            self.call('kgfr_describe', graph=str(self.dir / 'graph.tsv'), llm='local',
                      out=str(self.dir / 'desc.tsv'))
        self.assertEqual(ctx.exception.returncode, 2)

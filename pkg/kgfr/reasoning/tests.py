import tempfile
from pathlib import Path
from unittest import mock

from django.test import SimpleTestCase, TestCase
from openai import OpenAIError

from kgfr.embeddings.services import HashEmbeddingProvider, Provenance
from kgfr.exceptions import ConfigurationError, GraphFormatError, LlmTransportError, PipelineError
from kgfr.graph_store.services import QuestionInstance, augment_inverse, build_graph
from kgfr.propagation.params import ModelParams
from kgfr.reasoning.llm import RemoteChatClient, ScriptedChatClient, clean_reply, create_client
from kgfr.reasoning.models import ReasoningSession
from kgfr.reasoning.services import (
    PipelineConfig, TemplateTable, build_templates, parse_reply_block, render_fact, run_pipeline,
    save_session, split_items, verbalize
)

ANSWER = r'ANSWERS: <answer>'
REFLECT = r'Current answers'


def europe_graph():
    return augment_inverse(build_graph([
        ('Paris', 'capital_of', 'France'),
        ('Lyon', 'located_in', 'France'),
        ('France', 'member_of', 'EU'),
        ('Berlin', 'capital_of', 'Germany'),
        ('Germany', 'member_of', 'EU'),
    ]))


def block(**fields):
    return 'Reasoning.\n```\n' + '\n'.join(f'{k}: {v}' for k, v in fields.items()) + '\n```'


class PipelineFixture:

    def setUp(self):
        self.graph = europe_graph()
        self.params = ModelParams.initialize(2, 8, 4, seed=0)
        self.provider = HashEmbeddingProvider(8)
        self.config = PipelineConfig(k=5, n=5, path_cap=3, max_steps=3, lam=float('inf'))
        self.paris = self.graph.entity_id('Paris')
        self.france = self.graph.entity_id('France')
        self.question = QuestionInstance(text='Which country is Paris the capital of?',
                                         topic_entities=(self.paris,), answers=frozenset({self.france}), qid='q1')

    def ask(self, rules, question=None, **overrides):
        config = PipelineConfig(**{**self.config.__dict__, **overrides})
        llm = ScriptedChatClient(rules)
        answers, session = run_pipeline(question or self.question, self.graph, self.params, self.provider,
                                        llm, config)
        return answers, session, llm


class PipelineTests(PipelineFixture, SimpleTestCase):

    def test_confirmed_in_one_step(self):
        answers, session, llm = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ])
        self.assertEqual([a.entity for a in answers], [self.france])
        self.assertEqual(session.status, 'confirmed')
        self.assertEqual(session.step, 1)
        self.assertEqual(session.llm_calls, 2)
        self.assertEqual(llm.calls, 2)
        self.assertEqual([t.kind for t in session.transcript], ['answer', 'reflect'])
        self.assertIn('Candidate entities:', session.transcript[0].prompt)
        self.assertIn('Facts:', session.transcript[0].prompt)

    def test_rewrite_retrieves_for_sub_question(self):
        _, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='rewrite', SUBQUESTIONS='Which union is France in?',
                                              TOPICS='France')},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ])
        self.assertEqual(session.status, 'confirmed')
        self.assertEqual(session.step, 2)
        self.assertEqual(session.sub_questions, ['Which union is France in?'])
        self.assertEqual(len(session.evidence), 2)
        self.assertEqual(session.evidence[1].topics, (self.france,))
        self.assertEqual(session.evidence[1].label, 'sub-question: Which union is France in?')
        self.assertIn('Sub-questions: Which union is France in?', session.transcript[2].prompt)

    def test_focus_inside_existing_subgraph(self):
        lyon = self.graph.entity_id('Lyon')
        _, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='focus', FOCUS='Lyon')},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ])
        self.assertEqual(session.focus_entities, [lyon])
        self.assertEqual(len(session.results), 1)
        focus = session.evidence[1]
        self.assertEqual(focus.label, 'focus: Lyon')
        self.assertEqual([e for e, _ in focus.candidates], [lyon])
        self.assertEqual(focus.topics, (self.paris,))

    def test_focus_outside_subgraph_anchors_new_propagation(self):
        berlin = self.graph.entity_id('Berlin')
        _, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='focus', FOCUS='Berlin | Nowhere')},
            {'match': REFLECT, 'reply': block(STATUS='give-best'), 'times': None},
        ])
        self.assertEqual(session.focus_entities, [berlin])
        self.assertEqual(len(session.results), 2)
        self.assertEqual(session.evidence[1].topics, (berlin,))
        self.assertEqual(session.status, 'exhausted')

    def test_unparseable_answer_is_asked_again(self):
        answers, session, _ = self.ask([
            {'match': ANSWER, 'reply': 'I believe it is France.'},
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ])
        self.assertEqual([t.kind for t in session.transcript], ['answer', 'answer-retry', 'reflect'])
        self.assertTrue(session.transcript[1].prompt.startswith('Your previous reply could not be parsed.'))
        self.assertEqual([a.text for a in answers], ['France'])

    def test_protocol_error_twice_gives_empty_answers(self):
        answers, session, _ = self.ask([
            {'match': ANSWER, 'reply': 'no idea', 'times': None},
            {'match': REFLECT, 'reply': 'STATUS: give-best', 'times': None},
        ])
        self.assertEqual(answers, [])
        self.assertTrue(session.rounds[0].protocol_error)
        self.assertEqual(session.status, 'exhausted')

    def test_non_kg_answers_and_candidate_numbers(self):
        answers, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='Atlantis | #1 | atlantis'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ])
        first_candidate = session.evidence[0].candidates[0][0]
        self.assertEqual(len(answers), 2)
        self.assertFalse(answers[0].in_kg)
        self.assertEqual(answers[0].text, 'Atlantis')
        self.assertEqual(answers[1].entity, first_candidate)

    def test_max_steps_exhausts(self):
        answers, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='rewrite', SUBQUESTIONS='What is France?'), 'times': None},
        ], max_steps=2)
        self.assertEqual(session.status, 'exhausted')
        self.assertEqual(session.step, 2)
        self.assertEqual(session.llm_calls, 4)
        self.assertEqual(len(session.evidence), 2)
        self.assertEqual([a.text for a in answers], ['France'])

    def test_without_retrieval(self):
        answers, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ], use_retrieval=False)
        self.assertEqual(session.evidence, [])
        self.assertNotIn('Facts:', session.transcript[0].prompt)
        self.assertEqual([a.entity for a in answers], [self.france])

    def test_multiple_choice_prompt(self):
        germany = self.graph.entity_id('Germany')
        question = QuestionInstance(text='Paris is the capital of which country?', topic_entities=(self.paris,),
                                    answers=frozenset({self.france}),
                                    candidates=frozenset({self.france, germany}), qid='mc')
        _, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='#1'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ], question=question)
        prompt = session.transcript[0].prompt
        self.assertIn('Options:', prompt)
        self.assertIn('#1 France (score', prompt)
        self.assertIn('#2 Germany (not reached in the knowledge graph)', prompt)
        self.assertIn('Choose the most likely option.', prompt)
        self.assertEqual([a.entity for a in session.final_answers()], [self.france])

    def test_disabled_retrieval_levels_leave_the_prompt(self):
        rules = [
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ]
        headings = {
            'use_nodes': 'Candidate entities:',
            'use_facts': 'Facts:',
            'use_paths': 'Paths from candidates to topic entities:',
        }
        _, session, _ = self.ask(rules)
        for heading in headings.values():
            self.assertIn(heading, session.transcript[0].prompt)
        for switch, heading in headings.items():
            _, session, _ = self.ask(rules, **{switch: False})
            prompt = session.transcript[0].prompt
            self.assertNotIn(heading, prompt)
            for other in headings.values():
                if other != heading:
                    self.assertIn(other, prompt)
            self.assertEqual(session.status, 'confirmed')

    def test_without_node_retrieval_options_are_still_listed(self):
        germany = self.graph.entity_id('Germany')
        question = QuestionInstance(text='Paris is the capital of which country?', topic_entities=(self.paris,),
                                    answers=frozenset({self.france}),
                                    candidates=frozenset({self.france, germany}), qid='mc')
        _, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='#1'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ], question=question, use_nodes=False)
        prompt = session.transcript[0].prompt
        self.assertIn('Options:\n#1 France\n#2 Germany\n', prompt)
        self.assertNotIn('score', prompt)
        self.assertEqual([a.entity for a in session.final_answers()], [self.france])

    def test_without_reflection_answers_once(self):
        answers, session, llm = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='rewrite', SUBQUESTIONS='What is France?'), 'times': None},
        ], use_reflection=False)
        self.assertEqual([t.kind for t in session.transcript], ['answer'])
        self.assertEqual(llm.calls, 1)
        self.assertFalse(any(REFLECT in prompt for prompt, _ in llm.transcript))
        self.assertEqual((session.step, len(session.rounds), len(session.evidence)), (1, 1, 1))
        self.assertEqual(session.status, 'exhausted')
        self.assertEqual([a.entity for a in answers], [self.france])

    def test_transcript_is_reproducible(self):
        rules = [
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='rewrite', SUBQUESTIONS='Where is Lyon?'), 'times': 1},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ]
        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for name in ('a.jsonl', 'b.jsonl'):
                _, session, _ = self.ask([dict(rule) for rule in rules])
                path = Path(tmp) / name
                session.export_transcript(path)
                paths.append(path)
            self.assertEqual(paths[0].read_bytes(), paths[1].read_bytes())

    def test_exhausted_script_raises_with_partial_session(self):
        with self.assertRaises(PipelineError) as ctx:
            self.ask([{'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None}])
        session = ctx.exception.session
        self.assertEqual(len(session.rounds), 1)
        self.assertEqual(session.transcript[-1].kind, 'reflect')
        self.assertIsNone(session.transcript[-1].reply)


class SessionStorageTests(PipelineFixture, TestCase):

    def test_save_session(self):
        _, session, _ = self.ask([
            {'match': ANSWER, 'reply': block(ANSWERS='France'), 'times': None},
            {'match': REFLECT, 'reply': block(STATUS='confirmed'), 'times': None},
        ])
        record = save_session(session, self.graph)
        self.assertEqual(ReasoningSession.objects.count(), 1)
        self.assertEqual(record.topics, ['Paris'])
        self.assertEqual(record.gold_answers, ['France'])
        self.assertEqual(record.predicted_answers, ['France'])
        self.assertEqual(record.status, 'confirmed')
        self.assertEqual(list(record.turns.values_list('kind', flat=True)), ['answer', 'reflect'])


class ReplyProtocolTests(SimpleTestCase):

    def test_last_fenced_block_wins(self):
        reply = "```\nANSWERS: A\n```\nOn second thought:\n```text\nANSWERS: B | none\nstatus: Confirmed\n```"
        fields = parse_reply_block(reply)
        self.assertEqual(split_items(fields['ANSWERS']), ['B'])
        self.assertEqual(fields['STATUS'], 'Confirmed')

    def test_unfenced_and_missing(self):
        self.assertEqual(parse_reply_block('so the answer is\nAnswers: X | Y'), {'ANSWERS': 'X | Y'})
        self.assertIsNone(parse_reply_block('nothing structured here'))

    def test_split_items(self):
        self.assertEqual(split_items(' a |  | N/A | b '), ['a', 'b'])
        self.assertEqual(split_items(''), [])


class TemplateTests(SimpleTestCase):

    def setUp(self):
        self.graph = europe_graph()
        self.fact = (self.graph.entity_id('Paris'), self.graph.relation_id('capital_of'),
                     self.graph.entity_id('France'))

    def test_generated_and_fallback_templates(self):
        llm = ScriptedChatClient([
            {'match': r'Relation: capital_of\n', 'reply': '{s} is the capital of {o}.'},
            {'match': r'Relation: located_in\n', 'reply': {'error': 'offline'}},
            {'match': '.', 'reply': 'missing placeholders', 'times': None},
        ])
        templates = build_templates(self.graph, llm)
        self.assertEqual(len(templates), self.graph.num_relations)
        self.assertEqual(verbalize(self.fact, templates, self.graph), 'Paris is the capital of France.')
        located = self.graph.relation_id('located_in')
        self.assertEqual(templates[located].provenance, Provenance.FALLBACK_NAME)
        lyon_fact = (self.graph.entity_id('Lyon'), located, self.graph.entity_id('France'))
        self.assertEqual(verbalize(lyon_fact, templates, self.graph), 'Lyon [located_in] France.')

    def test_raw_triples(self):
        templates = TemplateTable.fallback(self.graph)
        self.assertEqual(render_fact(self.fact, templates, self.graph, verbalized=False),
                         '(Paris, capital_of, France)')

    def test_tsv_round_trip(self):
        templates = TemplateTable.fallback(self.graph)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'templates.tsv'
            templates.save_tsv(self.graph, path)
            loaded = TemplateTable.load_tsv(self.graph, path)
            with self.assertRaises(GraphFormatError):
                TemplateTable.load_tsv(self.graph, Path(tmp) / 'absent.tsv')
        self.assertEqual(verbalize(self.fact, loaded, self.graph), verbalize(self.fact, templates, self.graph))
        self.assertEqual(loaded[0].provenance, Provenance.FILE_LOADED)


class ChatClientTests(SimpleTestCase):

    def test_remote_client_request(self):
        response = mock.Mock()
        response.choices = [mock.Mock()]
        response.choices[0].message.content = '<think>draft</think>\nFrance'
        response.usage.total_tokens = 7
        with mock.patch('kgfr.reasoning.llm.OpenAI') as openai_cls:
            openai_cls.return_value.chat.completions.create.return_value = response
            client = RemoteChatClient(api_key='test-key', model='test-model')
            reply = client.chat('Which country?', system='be brief')
        self.assertEqual(reply.text, 'France')
        self.assertEqual(reply.tokens, 7)
        self.assertEqual(client.usage(), (1, 7))
        kwargs = openai_cls.return_value.chat.completions.create.call_args.kwargs
        self.assertEqual(kwargs['model'], 'test-model')
        self.assertEqual([m['role'] for m in kwargs['messages']], ['system', 'user'])

    def test_empty_choices(self):
        response = mock.Mock()
        response.choices = []
        with mock.patch('kgfr.reasoning.llm.OpenAI') as openai_cls:
            openai_cls.return_value.chat.completions.create.return_value = response
            client = RemoteChatClient(api_key='test-key', model='test-model', retry_budget=3)
            with self.assertRaises(LlmTransportError):
                client.chat('Which country?')
        self.assertEqual(openai_cls.return_value.chat.completions.create.call_count, 1)
        self.assertEqual(client.usage(), (0, 0))

    def test_other_sdk_errors_are_wrapped(self):
        with mock.patch('kgfr.reasoning.llm.OpenAI') as openai_cls:
            openai_cls.return_value.chat.completions.create.side_effect = OpenAIError('invalid response body')
            client = RemoteChatClient(api_key='test-key', model='test-model')
            with self.assertRaises(LlmTransportError):
                client.chat('Which country?')

    def test_missing_api_key(self):
        with self.settings(OPENAI_API_KEY=''):
            with self.assertRaises(ConfigurationError):
                RemoteChatClient()

    def test_scripted_rules(self):
        llm = ScriptedChatClient([{'match': 'a', 'reply': 'one', 'times': 2}])
        self.assertEqual(llm.complete('a'), 'one')
        self.assertEqual(llm.complete('ba'), 'one')
        with self.assertRaises(LlmTransportError):
            llm.complete('a')
        with self.assertRaises(ConfigurationError):
            ScriptedChatClient([{'match': 'a'}])
        with self.assertRaises(ConfigurationError):
            ScriptedChatClient([{'match': 'a', 'reply': {'text': 'x'}}])

    def test_create_client_specs(self):
        with self.assertRaises(ConfigurationError):
            create_client('local')
        with self.assertRaises(ConfigurationError):
            create_client('scripted:/nonexistent/rules.jsonl')

    def test_clean_reply(self):
        self.assertEqual(clean_reply('<thinking>x\ny</thinking>\n\n\n\nAnswer'), 'Answer')

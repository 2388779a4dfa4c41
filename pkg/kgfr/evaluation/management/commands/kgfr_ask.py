from kgfr.evaluation.management.base import KGFRCommand, parse_label_list
from kgfr.evaluation.services import EngineSettings, load_resources
from kgfr.exceptions import PipelineError
from kgfr.graph_store.services import parse_question_record
from kgfr.reasoning.llm import create_client
from kgfr.reasoning.services import run_pipeline, save_session


class Command(KGFRCommand):
    help = '对单个问题运行检索与 LLM 推理'

    def add_arguments(self, parser):
        parser.add_argument('--graph', required=True, help='三元组 TSV 文件')
        parser.add_argument('--checkpoint', required=True, help='检查点文件')
        parser.add_argument('--embeddings', default='hash', help='hash、hash:<seed>、remote 或预计算嵌入文件')
        parser.add_argument('--descriptions', help='关系描述 TSV')
        parser.add_argument('--templates', help='转述模板 TSV')
        parser.add_argument('--llm', default='remote', help='remote 或 scripted:<path>')
        parser.add_argument('--question', required=True, help='问题文本')
        parser.add_argument('--topics', required=True, type=parse_label_list, help='主题实体，逗号分隔')
        parser.add_argument('--candidates', type=parse_label_list, help='候选答案，逗号分隔（多选题）')
        parser.add_argument('--no-verbalize', action='store_true', help='以原始三元组形式给出事实')
        parser.add_argument('--out', help='对话记录 JSONL 输出路径')
        parser.add_argument('--save', action='store_true', help='把会话保存到数据库')
        self.add_engine_arguments(parser)

    def handle(self, *args, **options):
        settings = EngineSettings.from_preset(options['preset'], **self.engine_overrides(options))
        res = load_resources(options['graph'], options['checkpoint'], options['embeddings'], settings,
                             options.get('descriptions'), options.get('templates'), self.explicit_dims(options))
        record = {'question': options['question'], 'topics': options['topics'], 'id': 'cli'}
        if options.get('candidates') is not None:
            record['candidates'] = options['candidates']
        question = parse_question_record(res.graph, record)
        llm = create_client(options['llm'])
        config = res.settings.pipeline_config(verbalize=not options['no_verbalize'])

        try:
            answers, session = run_pipeline(question, res.graph, res.params, res.provider, llm, config,
                                            res.descriptions, res.templates)
        except PipelineError as e:
            if options.get('out') and e.session is not None:
                e.session.export_transcript(options['out'])
            raise

        if options.get('out'):
            session.export_transcript(options['out'])
        if options['save']:
            saved = save_session(session, res.graph)
            self.stdout.write(f'会话已保存: #{saved.pk}')

        for answer in answers:
            marker = '' if answer.in_kg else ' (不在图中)'
            self.stdout.write(f'{answer.text}{marker}')
        style = self.style.SUCCESS if session.status == 'confirmed' else self.style.WARNING
        self.stdout.write(style(f'状态: {session.status}, 步数: {session.step}, LLM调用: {session.llm_calls}'))

import json

import pandas as pd

from kgfr.evaluation.management.base import KGFRCommand
from kgfr.evaluation.services import EngineSettings, evaluate_pipeline, evaluate_retriever, load_resources
from kgfr.graph_store.services import load_questions
from kgfr.reasoning.llm import create_client


class Command(KGFRCommand):
    help = '在问题集上评估 F1、Hit 与 H@1'

    def add_arguments(self, parser):
        parser.add_argument('--graph', required=True, help='三元组 TSV 文件')
        parser.add_argument('--questions', required=True, help='问题 JSONL')
        parser.add_argument('--checkpoint', required=True, help='检查点文件')
        parser.add_argument('--embeddings', default='hash', help='hash、hash:<seed>、remote 或预计算嵌入文件')
        parser.add_argument('--descriptions', help='关系描述 TSV')
        parser.add_argument('--templates', help='转述模板 TSV')
        parser.add_argument('--llm', default='remote', help='remote 或 scripted:<path>')
        parser.add_argument('--workers', type=int, default=1, help='并发处理的问题数')
        parser.add_argument('--retriever-only', action='store_true', help='不使用 LLM，只评估检索器')
        parser.add_argument('--out', help='逐题结果 JSONL 输出路径')
        parser.add_argument('--csv', help='汇总 CSV 输出路径')

        ablation = parser.add_argument_group('消融')
        ablation.add_argument('--no-descriptions', action='store_true', help='以原始关系名代替关系描述')
        ablation.add_argument('--no-verbalize', action='store_true', help='以原始三元组形式给出事实')
        ablation.add_argument('--no-retrieval', action='store_true', help='不给 LLM 任何图谱证据')
        ablation.add_argument('--no-node', action='store_true', help='提示词中不列出候选实体')
        ablation.add_argument('--no-edge', action='store_true', help='提示词中不列出重要事实')
        ablation.add_argument('--no-path', action='store_true', help='提示词中不列出连接路径')
        ablation.add_argument('--no-reflection', action='store_true', help='只作答一轮，不进行反思')
        self.add_engine_arguments(parser)

    def handle(self, *args, **options):
        descriptions = options.get('descriptions')
        if options['no_descriptions'] and descriptions:
            self.stdout.write(self.style.WARNING('已指定 --no-descriptions，忽略 --descriptions'))
            descriptions = None

        settings = EngineSettings.from_preset(options['preset'], **self.engine_overrides(options))
        res = load_resources(options['graph'], options['checkpoint'], options['embeddings'], settings,
                             descriptions, options.get('templates'), self.explicit_dims(options))
        questions = load_questions(options['questions'], res.graph, allow_unknown_answers=True)

        if options['retriever_only']:
            report = evaluate_retriever(questions, res.graph, res.params, res.provider, res.settings,
                                        res.descriptions)
            if options.get('out'):
                report.to_frame().to_json(options['out'], orient='records', lines=True, force_ascii=False)
        else:
            config = res.settings.pipeline_config(
                verbalize=not options['no_verbalize'],
                use_retrieval=not options['no_retrieval'],
                use_nodes=not options['no_node'],
                use_facts=not options['no_edge'],
                use_paths=not options['no_path'],
                use_reflection=not options['no_reflection'],
            )
            report = evaluate_pipeline(questions, res.graph, res.params, res.provider,
                                       create_client(options['llm']), config, res.descriptions,
                                       res.templates, workers=options['workers'])
            if options.get('out'):
                report.write_jsonl(options['out'])
            if report.failed:
                self.stdout.write(self.style.WARNING(f'{report.failed} 道问题因LLM调用失败未完成'))

        summary = report.summary()
        if options.get('csv'):
            pd.DataFrame([summary]).to_csv(options['csv'], index=False)
        self.stdout.write(self.style.SUCCESS(json.dumps(summary, ensure_ascii=False)))

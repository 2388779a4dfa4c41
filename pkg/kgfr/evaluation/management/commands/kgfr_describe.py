from configs.config_loader import default_config_loader
from kgfr.embeddings.services import describe_all_relations
from kgfr.evaluation.management.base import KGFRCommand
from kgfr.evaluation.services import load_graph
from kgfr.reasoning.llm import create_client
from kgfr.reasoning.services import build_templates


class Command(KGFRCommand):
    help = '用 LLM 为每个关系生成描述（以及可选的转述模板）'

    def add_arguments(self, parser):
        parser.add_argument('--graph', required=True, help='三元组 TSV 文件')
        parser.add_argument('--llm', default='remote', help='remote 或 scripted:<path>')
        parser.add_argument('--out', required=True, help='关系描述 TSV 输出路径')
        parser.add_argument('--templates', help='转述模板 TSV 输出路径')
        parser.add_argument('--samples', type=int, help='每个关系给出的示例三元组数')

    def handle(self, *args, **options):
        graph = load_graph(options['graph'])
        llm = create_client(options['llm'])
        samples = options.get('samples') or default_config_loader.get('kgfr.describe.samples_per_relation', 3)

        table = describe_all_relations(graph, llm, samples)
        table.save_tsv(graph, options['out'])
        fallbacks = sum(p.value == 'fallback-name' for p in table.provenance.values())
        self.stdout.write(self.style.SUCCESS(f'已写出 {len(table)} 条关系描述 -> {options["out"]}'))
        if fallbacks:
            self.stdout.write(self.style.WARNING(f'{fallbacks} 个关系使用关系名作为描述'))

        if options.get('templates'):
            templates = build_templates(graph, llm, table)
            templates.save_tsv(graph, options['templates'])
            self.stdout.write(self.style.SUCCESS(f'已写出 {len(templates)} 条转述模板 -> {options["templates"]}'))

from kgfr.evaluation.management.base import KGFRCommand
from kgfr.evaluation.services import bench_app, load_graph
from kgfr.exceptions import ConfigurationError
from kgfr.graph_store.services import load_questions

TOGGLES = {'on': (True,), 'off': (False,), 'both': (True, False)}


def parse_lambdas(value):
    try:
        return [float(item) for item in value.split(',') if item.strip()]
    except ValueError:
        raise ConfigurationError(f"无效的 λ 列表: {value}") from None


class Command(KGFRCommand):
    help = '比较渐进传播（PE）与非对称剪枝（AP）在不同 λ 下的子图规模'

    def add_arguments(self, parser):
        parser.add_argument('--graph', required=True, help='三元组 TSV 文件')
        parser.add_argument('--questions', required=True, help='问题 JSONL（只使用主题实体）')
        parser.add_argument('--lambdas', default='10,100,1000,inf', help='逗号分隔的 λ 值')
        parser.add_argument('--pe', choices=list(TOGGLES), default='both', help='渐进传播')
        parser.add_argument('--ap', choices=list(TOGGLES), default='both', help='非对称剪枝')
        parser.add_argument('--layers', type=int, default=2, help='传播层数 L')
        parser.add_argument('--edge-cap', type=int, help='单个子图的边数上限，超过记为 exceeded')
        parser.add_argument('--out', required=True, help='CSV 输出路径')

    def handle(self, *args, **options):
        lambdas = parse_lambdas(options['lambdas'])
        if options['layers'] < 1:
            raise ConfigurationError(f"layers 必须至少为 1: {options['layers']}")
        graph = load_graph(options['graph'])
        questions = load_questions(options['questions'], graph, allow_unknown_answers=True)
        frame = bench_app(graph, questions, lambdas, TOGGLES[options['pe']], TOGGLES[options['ap']],
                          layers=options['layers'], edge_cap=options.get('edge_cap'), out=options['out'])
        self.stdout.write(frame.to_string(index=False))
        exceeded = int((frame['status'] == 'exceeded').sum())
        if exceeded:
            self.stdout.write(self.style.WARNING(f'{exceeded} 种配置超过边数上限'))
        self.stdout.write(self.style.SUCCESS(f'基准结果已写入 {options["out"]}'))

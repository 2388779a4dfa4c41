from kgfr.embeddings.services import RelationDescriptionTable, create_provider
from kgfr.evaluation.management.base import KGFRCommand
from kgfr.evaluation.services import EngineSettings, load_graph
from kgfr.graph_store.services import load_questions
from kgfr.propagation.params import save_checkpoint
from kgfr.training.services import TrainConfig, train


class Command(KGFRCommand):
    help = '预训练传播模型并保存检查点'

    def add_arguments(self, parser):
        parser.add_argument('--graph', required=True, help='三元组 TSV 文件')
        parser.add_argument('--questions', required=True, help='训练问题 JSONL')
        parser.add_argument('--dev', help='验证问题 JSONL（缺省时用训练集）')
        parser.add_argument('--embeddings', default='hash', help='hash、hash:<seed>、remote 或预计算嵌入文件')
        parser.add_argument('--descriptions', help='关系描述 TSV')
        parser.add_argument('--checkpoint', required=True, help='检查点输出路径')
        parser.add_argument('--lr', type=float, help='学习率')
        parser.add_argument('--max-epochs', type=int, help='最大轮数')
        parser.add_argument('--patience', type=int, help='早停耐心')
        parser.add_argument('--log', help='训练日志 JSONL 输出路径')
        self.add_engine_arguments(parser)

    def handle(self, *args, **options):
        engine = EngineSettings.from_preset(options['preset'], **self.engine_overrides(options))
        config = TrainConfig.from_defaults(
            learning_rate=options.get('lr'), max_epochs=options.get('max_epochs'),
            patience=options.get('patience'), lam=engine.lam, seed=engine.seed,
            layers=engine.layers, dim=engine.dim, dim_attn=engine.dim_attn,
        )
        graph = load_graph(options['graph'])
        questions = load_questions(options['questions'], graph)
        dev = load_questions(options['dev'], graph) if options.get('dev') else []
        provider = create_provider(options['embeddings'], config.dim, seed=engine.seed)
        descriptions = RelationDescriptionTable.load_tsv(graph, options['descriptions']) \
            if options.get('descriptions') else None

        params, log = train(questions, dev, graph, provider, config, descriptions, log_path=options.get('log'))
        save_checkpoint(params, options['checkpoint'])

        self.stdout.write(self.style.SUCCESS(
            f'训练完成: 最优轮次 {log.best_epoch}, 验证集 H@1 {log.best_dev_h1:.4f}, '
            f'共 {len(log.epochs)} 轮{"（提前停止）" if log.stopped_early else ""}'))
        self.stdout.write(f'检查点已保存到 {options["checkpoint"]}')

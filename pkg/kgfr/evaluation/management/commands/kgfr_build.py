from kgfr.evaluation.management.base import KGFRCommand
from kgfr.graph_store.services import augment_inverse, forward_label_triples, load_triples, write_triples


class Command(KGFRCommand):
    help = '校验三元组文件，统计逆关系增强后的图并可选写出规范化的三元组'

    def add_arguments(self, parser):
        parser.add_argument('--graph', required=True, help='三元组 TSV 文件')
        parser.add_argument('--out', help='规范化（去重、按编号排序）的正向三元组输出路径')

    def handle(self, *args, **options):
        forward = load_triples(options['graph'])
        graph = augment_inverse(forward)

        self.stdout.write(f'实体数: {graph.num_entities}')
        self.stdout.write(f'正向关系数: {graph.num_forward_relations}')
        self.stdout.write(f'正向三元组: {len(forward)}')
        self.stdout.write(f'增强后三元组: {len(graph)}')
        self.stdout.write(f'最大关系组: {graph.max_group_size()}')

        if options.get('out'):
            write_triples(forward_label_triples(graph), options['out'])
            self.stdout.write(self.style.SUCCESS(f'已写出 {options["out"]}'))

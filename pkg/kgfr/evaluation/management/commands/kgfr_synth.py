import json
from pathlib import Path

from kgfr.evaluation.management.base import KGFRCommand
from kgfr.exceptions import ConfigurationError
from kgfr.graph_store.services import write_triples
from kgfr.graph_store.synthetic import hub_graph, one_hop_task, random_graph


class Command(KGFRCommand):
    help = '生成合成知识图谱（以及单跳问题集）'

    def add_arguments(self, parser):
        parser.add_argument('--kind', choices=['random', 'hub', 'one-hop'], default='one-hop', help='图的类型')
        parser.add_argument('--entities', type=int, default=200, help='实体数')
        parser.add_argument('--relations', type=int, default=8, help='关系数')
        parser.add_argument('--triples', type=int, default=600, help='随机三元组数（random/hub）')
        parser.add_argument('--questions', type=int, default=150, help='问题数（one-hop）')
        parser.add_argument('--hubs', type=int, default=3, help='枢纽实体数（hub）')
        parser.add_argument('--hub-degree', type=int, default=200, help='枢纽实体的出度（hub）')
        parser.add_argument('--seed', type=int, default=0, help='随机种子')
        parser.add_argument('--out', required=True, help='输出目录')

    def handle(self, *args, **options):
        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)
        kind = options['kind']

        if kind == 'one-hop':
            try:
                triples, records = one_hop_task(options['entities'], options['relations'],
                                                 options['questions'], seed=options['seed'])
            except ValueError as e:
                raise ConfigurationError(str(e)) from e
            with open(out / 'questions.jsonl', 'w', encoding='utf-8') as f:
                for record in records:
                    f.write(json.dumps(record, ensure_ascii=False) + '\n')
        elif kind == 'hub':
            triples = hub_graph(options['entities'], options['relations'], options['triples'],
                                num_hubs=options['hubs'], hub_degree=options['hub_degree'], seed=options['seed'])
        else:
            triples = random_graph(options['entities'], options['relations'], options['triples'], seed=options['seed'])

        write_triples(triples, out / 'graph.tsv')
        self.stdout.write(self.style.SUCCESS(f'已生成 {kind} 图: {len(triples)} 个三元组 -> {out}'))

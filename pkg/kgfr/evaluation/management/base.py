"""管理命令的公共参数与错误处理"""
import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from kgfr.exceptions import KGFRError

logger = logging.getLogger(__name__)

ENGINE_FLAGS = ('layers', 'dim', 'dim_attn', 'lam', 'k', 'n', 'max_steps', 'seed')


def parse_label_list(value):
    """逗号分隔的标签列表"""
    return [item.strip() for item in value.split(',') if item.strip()]


class KGFRCommand(BaseCommand):
    """把 KGFRError 转成带退出码的 CommandError"""

    def add_engine_arguments(self, parser):
        parser.add_argument('--preset', default=settings.KGFR_PRESET, help='引擎预设（desk 或 full）')
        parser.add_argument('--layers', type=int, help='传播层数 L')
        parser.add_argument('--dim', type=int, help='嵌入维度 d')
        parser.add_argument('--dim-attn', type=int, help='注意力隐层维度')
        parser.add_argument('--lambda', dest='lam', type=float, help='剪枝阈值 λ（可写 inf）')
        parser.add_argument('--k', type=int, help='候选实体数')
        parser.add_argument('--n', type=int, help='每个实体的事实数')
        parser.add_argument('--max-steps', type=int, help='最大推理步数')
        parser.add_argument('--seed', type=int, default=0, help='随机种子')

    def engine_overrides(self, options) -> dict:
        return {name: options.get(name) for name in ENGINE_FLAGS}

    def explicit_dims(self, options):
        return [name for name in ('layers', 'dim', 'dim_attn') if options.get(name) is not None]

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except KGFRError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise CommandError(f"{type(e).__name__}: {e}", returncode=e.exit_code) from e

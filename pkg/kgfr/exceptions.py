"""KGFR 统一异常定义"""
from typing import Optional


class KGFRError(Exception):
    """所有KGFR异常的基类"""
    exit_code = 1


class ConfigurationError(KGFRError):
    """配置错误：维度不符、参数越界、命令参数不合法"""
    exit_code = 2


class PreconditionError(KGFRError, ValueError):
    """调用前置条件不满足"""
    exit_code = 2


class GraphFormatError(KGFRError):
    """三元组或问题文件格式错误"""
    exit_code = 3

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"第 {line_no} 行: {message}"
        super().__init__(message)


class GraphStateError(KGFRError):
    """图状态不允许该操作（例如重复添加逆关系）"""
    exit_code = 3


class UnknownIdError(KGFRError, KeyError):
    """未知的实体、关系、键或模板"""
    exit_code = 3

    def __str__(self):
        # KeyError 默认会给消息加引号
        return str(self.args[0]) if self.args else ''


class NumericError(KGFRError, ArithmeticError):
    """出现非有限数值"""
    exit_code = 6


class CheckpointError(KGFRError):
    """检查点或嵌入文件损坏"""
    exit_code = 4


class ProviderError(KGFRError):
    """嵌入后端调用失败"""
    exit_code = 5

    def __init__(self, message: str, retryable: bool = False):
        self.retryable = retryable
        super().__init__(message)


class LlmError(KGFRError):
    """LLM 调用相关错误"""
    exit_code = 5


class LlmTransportError(LlmError):
    """LLM 传输失败（重试后仍失败、脚本耗尽）"""


class LlmProtocolError(LlmError):
    """LLM 回复无法按约定格式解析"""


class TrainingError(KGFRError):
    """训练无法进行"""
    exit_code = 6


class PipelineError(KGFRError):
    """推理流水线中断，携带已完成的部分会话"""
    exit_code = 5

    def __init__(self, message: str, session=None):
        self.session = session
        super().__init__(message)


class CapacityError(KGFRError):
    """检索子图的边数超过上限"""
    exit_code = 6

    def __init__(self, message: str, edges: int = 0):
        self.edges = edges
        super().__init__(message)

"""LLM 客户端：远程对话接口与脚本化客户端"""
import json
import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

from django.conf import settings
from openai import APIConnectionError, APIStatusError, APITimeoutError, OpenAI, OpenAIError
from tenacity import retry, retry_if_exception, stop_after_attempt, wait_fixed

from configs.config_loader import get_model_config
from kgfr.exceptions import ConfigurationError, LlmTransportError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_THINK_TAGS = ('think', 'thinking', 'thought', 'thoughts', 'reasoning', 'analysis', 'internal')


def clean_reply(content: str) -> str:
    """删除回复中的思考过程标签"""
    for tag in _THINK_TAGS:
        content = re.sub(rf'<{tag}>.*?</{tag}>', '', content, flags=re.DOTALL)
    content = re.sub(r'\n\s*\n\s*\n', '\n\n', content)
    return content.strip()


@dataclass(frozen=True)
class ChatReply:
    text: str
    tokens: int = 0


class LlmClient:
    """LLM 客户端接口；记录调用次数和令牌用量"""
    name = 'base'

    def __init__(self):
        self._stats_lock = threading.Lock()
        self.calls = 0
        self.tokens = 0

    def _record(self, tokens: int) -> None:
        with self._stats_lock:
            self.calls += 1
            self.tokens += tokens

    def chat(self, prompt: str, system: Optional[str] = None) -> ChatReply:
        raise NotImplementedError

    def complete(self, prompt: str, system: Optional[str] = None) -> str:
        return self.chat(prompt, system).text

    def usage(self):
        with self._stats_lock:
            return self.calls, self.tokens


class _RetryableError(Exception):
    pass


class RemoteChatClient(LlmClient):
    """兼容 chat-completions 协议的远程对话服务"""
    name = 'remote'
    # 所有实例共享的并发上限
    _semaphore: Optional[threading.BoundedSemaphore] = None
    _semaphore_lock = threading.Lock()

    def __init__(self, api_key: Optional[str] = None, base_url: Optional[str] = None,
                 model: Optional[str] = None, timeout: Optional[float] = None,
                 retry_budget: Optional[int] = None, temperature: Optional[float] = None,
                 max_tokens: Optional[int] = None, max_in_flight: Optional[int] = None):
        super().__init__()
        try:
            cfg = get_model_config('llm')
        except KeyError:
            cfg = {}
        self.api_key = api_key if api_key is not None else getattr(settings, 'OPENAI_API_KEY', '')
        self.base_url = base_url or getattr(settings, 'OPENAI_BASE_URL', 'https://api.openai.com/v1')
        self.model = model or getattr(settings, 'OPENAI_MODEL', '')
        self.timeout = timeout or cfg.get('timeout', 60)
        self.retry_budget = retry_budget or cfg.get('retry_budget', 3)
        self.temperature = cfg.get('temperature', 0.0) if temperature is None else temperature
        self.max_tokens = max_tokens or cfg.get('max_tokens', 1024)
        if not self.api_key or not self.api_key.strip():
            raise ConfigurationError("API密钥未配置，请设置环境变量 OPENAI_API_KEY")

        with RemoteChatClient._semaphore_lock:
            if RemoteChatClient._semaphore is None:
                RemoteChatClient._semaphore = threading.BoundedSemaphore(max_in_flight or cfg.get('max_in_flight', 4))
        self.client = OpenAI(api_key=self.api_key, base_url=self.base_url, timeout=self.timeout, max_retries=0)
        logger.info(f"远程LLM客户端: {self.base_url} - {self.model}")

    @staticmethod
    def _friendly_status(status: int, detail: str) -> str:
        if status == 401:
            return "API密钥无效或已过期，请检查 OPENAI_API_KEY"
        if status == 429:
            return "API请求频率过高，请稍后重试"
        if status >= 500:
            return "LLM服务暂时不可用，请稍后重试"
        return f"LLM服务请求失败: HTTP {status}: {detail[:200]}"

    def _request(self, messages: List[dict]) -> ChatReply:
        try:
            with RemoteChatClient._semaphore:
                response = self.client.chat.completions.create(
                    model=self.model,
                    messages=messages,
                    temperature=self.temperature,
                    max_tokens=self.max_tokens,
                )
        except APITimeoutError as e:
            logger.error(f"LLM请求超时（{self.timeout}秒）")
            raise _RetryableError(f"请求超时（{self.timeout}秒）") from e
        except APIConnectionError as e:
            logger.error(f"无法连接到LLM服务: {self.base_url}")
            raise _RetryableError(f"无法连接到LLM服务: {self.base_url}") from e
        except APIStatusError as e:
            message = self._friendly_status(e.status_code, str(e))
            logger.error(f"LLM请求失败: HTTP {e.status_code}")
            if e.status_code == 429 or e.status_code >= 500:
                raise _RetryableError(message) from e
            raise LlmTransportError(message) from e
        except OpenAIError as e:
            logger.error(f"LLM请求失败: {type(e).__name__}: {e}")
            raise LlmTransportError(f"LLM服务响应无效: {e}") from e

        if not response.choices:
            logger.error("LLM响应中没有候选回复")
            raise LlmTransportError("LLM服务返回了空的候选回复")
        content = response.choices[0].message.content
        tokens = response.usage.total_tokens if response.usage else 0
        self._record(tokens)
        return ChatReply(clean_reply(content or ''), tokens)

    def chat(self, prompt: str, system: Optional[str] = None) -> ChatReply:
        messages = [{'role': 'system', 'content': system}] if system else []
        messages.append({'role': 'user', 'content': prompt})
        call = retry(
            stop=stop_after_attempt(self.retry_budget),
            wait=wait_fixed(1),
            retry=retry_if_exception(lambda e: isinstance(e, _RetryableError)),
            reraise=True,
        )(self._request)
        try:
            return call(messages)
        except _RetryableError as e:
            raise LlmTransportError(f"{e}（已重试 {self.retry_budget} 次）") from e


@dataclass
class ScriptRule:
    pattern: re.Pattern
    reply: Optional[str]
    error: Optional[str]
    remaining: Optional[int]


class ScriptedChatClient(LlmClient):
    """
    脚本化客户端。对每个提示词，取第一条正则匹配且剩余次数大于 0 的规则并消耗一次；
    没有可用规则时抛出 LlmTransportError。
    """
    name = 'scripted'

    def __init__(self, rules: Sequence[dict]):
        super().__init__()
        self._lock = threading.Lock()
        self.rules: List[ScriptRule] = []
        self.transcript: List[tuple] = []
        for n, rule in enumerate(rules, start=1):
            if 'match' not in rule or 'reply' not in rule:
                raise ConfigurationError(f"脚本第 {n} 条规则缺少 match 或 reply 字段")
            reply = rule['reply']
            error = reply.get('error') if isinstance(reply, dict) else None
            if isinstance(reply, dict) and error is None:
                raise ConfigurationError(f"脚本第 {n} 条规则的 reply 对象必须包含 error 字段")
            times = rule.get('times', 1)
            try:
                pattern = re.compile(rule['match'], re.DOTALL)
            except re.error as e:
                raise ConfigurationError(f"脚本第 {n} 条规则的正则无效: {e}") from e
            self.rules.append(ScriptRule(pattern, None if error is not None else str(reply), error, times))

    @classmethod
    def from_file(cls, path: PathLike) -> 'ScriptedChatClient':
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"脚本文件不存在: {path}")
        rules = []
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith('#'):
                    continue
                try:
                    rules.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ConfigurationError(f"脚本文件第 {line_no} 行不是有效的JSON: {e.msg}") from e
        return cls(rules)

    def chat(self, prompt: str, system: Optional[str] = None) -> ChatReply:
        with self._lock:
            for rule in self.rules:
                if rule.remaining is not None and rule.remaining <= 0:
                    continue
                if not rule.pattern.search(prompt):
                    continue
                if rule.remaining is not None:
                    rule.remaining -= 1
                self._record(0)
                if rule.error is not None:
                    self.transcript.append((prompt, None))
                    raise LlmTransportError(rule.error)
                self.transcript.append((prompt, rule.reply))
                return ChatReply(rule.reply)
        raise LlmTransportError(f"脚本已耗尽，没有匹配的规则: {prompt[:80]!r}")


def create_client(spec: str) -> LlmClient:
    """按命令行写法创建客户端：'remote' 或 'scripted:<path>'"""
    spec = (spec or '').strip()
    if spec == 'remote':
        return RemoteChatClient()
    if spec.startswith('scripted:'):
        return ScriptedChatClient.from_file(spec.split(':', 1)[1])
    raise ConfigurationError(f"无效的 --llm 参数: {spec!r}，应为 remote 或 scripted:<path>")

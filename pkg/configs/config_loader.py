# -*- coding: utf-8 -*-
import os
import threading
from functools import lru_cache
from typing import Any, Dict, List, Optional

import yaml
from decouple import config


def get_env_type() -> str:
    """当前环境名，对应 configs.yaml 中的顶层块"""
    return config('KGFR_ENV', default='DEV')


class ConfigLoader:
    """
    配置加载类，从 YAML 文件中读取不同环境下的模型客户端配置和引擎预设。
    支持配置层级覆盖。
    """
    _lock = threading.RLock()

    def __init__(self,
                 filepath: Optional[str] = None,
                 environment: Optional[str] = None,
                 override_configs: Optional[List[Dict[str, Any]]] = None):
        """
        初始化配置加载器。
        :param filepath: YAML 配置文件路径，默认同目录下的 configs.yaml
        :param environment: 环境名称，例如 'DEV'、'TEST'，默认从 KGFR_ENV 环境变量读取
        :param override_configs: 覆盖配置列表，按顺序应用，优先级高于文件配置
        """
        self.environment = environment or get_env_type()
        if filepath:
            self.filepath = os.path.abspath(filepath)
        else:
            self.filepath = os.path.join(
                os.path.dirname(os.path.abspath(__file__)),
                'configs.yaml'
            )

        self.override_configs = override_configs or []
        self._config_layers = []
        self._merged_config = {}
        self.load()

    def load(self) -> None:
        """
        从 YAML 文件加载配置到内存，然后应用所有覆盖配置。
        如果文件不存在或环境未定义，将抛出异常。
        """
        self._config_layers = []

        if not os.path.isfile(self.filepath):
            raise FileNotFoundError(f"配置文件未找到: {self.filepath}")

        with open(self.filepath, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f) or {}

        if self.environment not in data:
            raise KeyError(f"环境 '{self.environment}' 未在配置文件中定义")

        self._config_layers.append(data[self.environment])
        self._config_layers.extend(self.override_configs)
        self._merge_config_layers()

    def _merge_config_layers(self) -> None:
        """合并所有配置层，后添加的层覆盖先前的层"""
        def deep_merge(source: Dict, destination: Dict) -> Dict:
            for key, value in source.items():
                if isinstance(value, dict) and isinstance(destination.get(key), dict):
                    deep_merge(value, destination[key])
                elif isinstance(value, dict):
                    destination[key] = deep_merge(value, {})
                else:
                    destination[key] = value
            return destination

        result = {}
        for layer in self._config_layers:
            deep_merge(layer, result)
        self._merged_config = result

    def get(self, key: str, default: Optional[Any] = None) -> Any:
        """
        获取指定键的配置值，支持嵌套键，通过点号分割。
        :param key: 配置键，例如 'kgfr.presets.desk.dim'
        :param default: 如果未找到键，则返回默认值
        """
        value = self._merged_config
        for part in key.split('.'):
            if not isinstance(value, dict) or part not in value:
                return default
            value = value[part]
        return value

    def set_override(self, config: Dict[str, Any]) -> None:
        """添加为最高优先级的覆盖层"""
        with ConfigLoader._lock:
            self._config_layers.append(config)
            self._merge_config_layers()

    def export_config(self) -> Dict[str, Any]:
        return self._merged_config.copy()


default_config_loader = ConfigLoader()


@lru_cache(maxsize=32)
def get_model_config(model_type: str, config_loader: Optional[ConfigLoader] = None) -> Dict[str, Any]:
    """
    获取指定客户端类型的非敏感配置（超时、重试次数、并发上限等）

    :param model_type: 'llm' 或 'embedding'
    :param config_loader: 配置加载器实例，默认使用全局配置加载器
    """
    loader = config_loader or default_config_loader
    section = loader.get(model_type)
    if not section:
        raise KeyError(f"模型类型 '{model_type}' 在当前环境 '{loader.environment}' 的配置中不存在")
    return dict(section)


def get_engine_preset(name: str = 'desk', config_loader: Optional[ConfigLoader] = None) -> Dict[str, Any]:
    """
    获取引擎超参数预设（层数、维度、剪枝阈值、检索规模、推理步数）

    :param name: 'desk' 或 'full'
    """
    loader = config_loader or default_config_loader
    preset = loader.get(f'kgfr.presets.{name}')
    if not preset:
        raise KeyError(f"引擎预设 '{name}' 在当前环境 '{loader.environment}' 的配置中不存在")
    return dict(preset)


def get_training_defaults(config_loader: Optional[ConfigLoader] = None) -> Dict[str, Any]:
    loader = config_loader or default_config_loader
    return dict(loader.get('kgfr.training', {}))

import copy
import os
import yaml
from typing import Dict, Any

from errors import ConfigurationError
from logging_manager import get_logger

DEFAULT_SETTINGS: Dict[str, Any] = {
    'logging': {
        'level': 'INFO',
        'console_level': 'WARNING',
        'main_log': None,
        'error_log': None,
        'max_file_size': 10485760,
        'backup_count': 5,
    },
    'detect': {
        'conf_threshold': 0.25,
        'nms_iou_threshold': 0.45,
        'min_area': None,
        'max_area': None,
    },
    'eval': {
        'iou_match_threshold': 0.5,
        'workers': 1,
    },
    'bench': {
        'warmup': 2,
        'runs': 10,
        'threads': 1,
        'seed': 42,
    },
    'train': {
        'steps': 2000,
        'learning_rate': 0.05,
        'lambda_coord': 5.0,
        'lambda_noobj': 0.5,
        'lambda_obj': 1.0,
        'lambda_class': 1.0,
        'log_interval': 100,
    },
    'init': {
        'scale': 0.05,
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfigManager:
    def __init__(self, config_path: str = "config/config.yaml"):
        self.config_path = config_path
        self.config: Dict[str, Any] = {}
        self._load_config()

    def _load_config(self):
        """Load settings from the YAML file on top of the built-in defaults."""
        logger = get_logger('config')
        loaded: Dict[str, Any] = {}
        if self.config_path and os.path.exists(self.config_path):
            try:
                with open(self.config_path, 'r', encoding='utf-8') as file:
                    loaded = yaml.safe_load(file) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"Invalid settings file {self.config_path}: {e}")
            if not isinstance(loaded, dict):
                raise ConfigurationError(f"Settings file {self.config_path} must contain a mapping")
        else:
            logger.warning(f"Settings file not found: {self.config_path}; using defaults")

        self.config = _merge(DEFAULT_SETTINGS, loaded)
        self._validate_config()

    def _validate_config(self):
        """Validate required sections and value ranges."""
        for section in DEFAULT_SETTINGS:
            if not isinstance(self.config.get(section), dict):
                raise ConfigurationError(f"Missing required configuration section: {section}")

        for key in ('conf_threshold', 'nms_iou_threshold'):
            value = self.config['detect'][key]
            if not 0.0 < float(value) < 1.0:
                raise ConfigurationError(f"detect.{key} must lie in (0, 1), got {value}")

        threshold = float(self.config['eval']['iou_match_threshold'])
        if not 0.0 < threshold <= 1.0:
            raise ConfigurationError(f"eval.iou_match_threshold must lie in (0, 1], got {threshold}")

        if int(self.config['bench']['runs']) < 3:
            raise ConfigurationError("bench.runs must be at least 3")

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by key (supports dot notation)."""
        keys = key.split('.')
        value = self.config

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def get_logging_config(self) -> Dict[str, Any]:
        """Get logging configuration."""
        return self.config.get('logging', {})

    def get_detect_config(self) -> Dict[str, Any]:
        """Get detection thresholds."""
        return self.config.get('detect', {})

    def get_eval_config(self) -> Dict[str, Any]:
        """Get evaluation configuration."""
        return self.config.get('eval', {})

    def get_bench_config(self) -> Dict[str, Any]:
        """Get benchmark configuration."""
        return self.config.get('bench', {})

    def get_train_config(self) -> Dict[str, Any]:
        """Get toy-training configuration."""
        return self.config.get('train', {})

    def get_init_config(self) -> Dict[str, Any]:
        """Get random weight initialisation configuration."""
        return self.config.get('init', {})

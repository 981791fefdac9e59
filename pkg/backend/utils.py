"""
Utility functions for pdediscover
"""

import os
import yaml
import logging
import json
import hashlib
from typing import Dict, Any, Optional
from datetime import datetime
from dotenv import load_dotenv


def load_config(config_path: str) -> Dict[str, Any]:
    """Load application configuration from YAML file"""
    # Load environment variables
    load_dotenv("config/.env")

    try:
        with open(config_path, 'r', encoding='utf-8') as file:
            config = yaml.safe_load(file) or {}
    except FileNotFoundError:
        logging.warning(f"Config file {config_path} not found, using defaults")
        config = _get_default_config()
    except yaml.YAMLError as e:
        logging.error(f"Error parsing config {config_path}: {e}")
        config = _get_default_config()

    # Override with environment variables where available
    _override_with_env_vars(config)
    return config


def _override_with_env_vars(config: Dict[str, Any]) -> None:
    """Override config values with environment variables"""
    env_mappings = {
        "PDE_LOG_LEVEL": ["logging", "level"],
        "PDE_THREADS": ["app", "threads"],
        "PDE_OUT_DIR": ["app", "out_dir"],
        "PDE_CACHE_DIR": ["app", "cache_dir"],
        "PDE_PROGRESS": ["app", "progress"],
    }

    for env_var, config_path in env_mappings.items():
        value = os.getenv(env_var)
        if value:
            # Navigate to nested config
            current = config
            for key in config_path[:-1]:
                current = current.setdefault(key, {})

            # Convert value to appropriate type
            if env_var in ["PDE_PROGRESS"]:
                value = value.lower() in ["true", "1", "yes"]
            elif env_var in ["PDE_THREADS"]:
                value = int(value)

            current[config_path[-1]] = value


def _get_default_config() -> Dict[str, Any]:
    """Get default configuration"""
    return {
        "app": {
            "name": "pdediscover",
            "out_dir": "data/runs",
            "threads": 1,
            "cache_dir": "data/cache",
            "cache_enabled": True,
            "progress": False
        },
        "logging": {
            "level": "INFO",
            "file_path": "data/logs/pdediscover.log",
            "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        }
    }


def setup_logging(logging_config: Dict[str, Any]) -> logging.Logger:
    """Set up logging configuration"""
    level = getattr(logging, str(logging_config.get("level", "INFO")).upper(), logging.INFO)
    fmt = logging.Formatter(
        logging_config.get("format", "%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    )

    # Create logs directory if it doesn't exist
    log_file = logging_config.get("file_path", "data/logs/pdediscover.log")
    handlers = []
    if log_file:
        os.makedirs(os.path.dirname(log_file) or ".", exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(level)
        file_handler.setFormatter(fmt)
        handlers.append(file_handler)

    stream_handler = logging.StreamHandler()
    stream_handler.setLevel(level)
    stream_handler.setFormatter(fmt)
    handlers.append(stream_handler)

    # force: the CLI may be invoked repeatedly in one process (tests)
    logging.basicConfig(level=level, handlers=handlers, force=True)

    return logging.getLogger("pdediscover")


def canonical_json(data: Any) -> str:
    """Stable JSON text used for hashing"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def content_hash(data: Any) -> str:
    """sha256 of the canonical JSON form of data"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def save_json_file(data: Any, file_path: str) -> None:
    """Save data to JSON file"""
    os.makedirs(os.path.dirname(file_path) or ".", exist_ok=True)

    with open(file_path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, default=str, ensure_ascii=False)


def load_json_file(file_path: str) -> Any:
    """Load data from JSON file"""
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        return None
    except json.JSONDecodeError as e:
        logging.error(f"Error loading JSON file {file_path}: {e}")
        return None


def ensure_directory_exists(directory_path: str) -> None:
    """Ensure directory exists, create if not"""
    os.makedirs(directory_path, exist_ok=True)


def parse_float_list(text: str) -> list:
    """Parse "0.1,0.2, 0.5" into floats"""
    return [float(v) for v in text.split(",") if v.strip()]


class StageTimer:
    """Context manager for timing a pipeline stage"""

    def __init__(self, stage_name: str):
        self.stage_name = stage_name
        self.start_time = None
        self.end_time = None

    def __enter__(self):
        self.start_time = datetime.now()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.end_time = datetime.now()
        logging.getLogger("pdediscover").info(f"Stage '{self.stage_name}' completed in {self.duration:.2f} seconds")

    @property
    def duration(self) -> Optional[float]:
        if self.start_time and self.end_time:
            return (self.end_time - self.start_time).total_seconds()
        return None

"""Deterministic simulator of a precisely timed cache eviction attack."""

from .cache_model import CacheGeometry, HierarchyState, Level, LevelGeometry
from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .machine import Machine

__version__ = "0.1.0"

__all__ = [
    "CacheGeometry",
    "ConfigError",
    "HierarchyState",
    "Level",
    "LevelGeometry",
    "Machine",
    "ScenarioConfig",
    "load_config",
    "parse_config",
]

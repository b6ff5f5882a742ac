from .config import CONFIG_SCHEMA, ConfigError, RunConfig
from .main import main
from .pipeline import Workspace

__all__ = ["CONFIG_SCHEMA", "ConfigError", "RunConfig", "Workspace", "main"]

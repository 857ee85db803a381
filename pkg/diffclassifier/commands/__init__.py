from .config import RunConfig, parse_config, load_config, apply_overrides
from .checkpoint import save_checkpoint, load_checkpoint
from .main import register_commands, build_parser, run, EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC

__all__ = [
    "RunConfig",
    "parse_config",
    "load_config",
    "apply_overrides",
    "save_checkpoint",
    "load_checkpoint",
    "register_commands",
    "build_parser",
    "run",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_NUMERIC",
]

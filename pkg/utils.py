# utils.py
import logging
import os
from functools import wraps

from rich.console import Console
from rich.logging import RichHandler

from errors import MpscopeError, InvalidConfigError, EXIT_OK

logger = logging.getLogger(__name__)

THREADS_ENV = "MPSCOPE_THREADS"
LOG_LEVEL_ENV = "MPSCOPE_LOG_LEVEL"
DEFAULT_LOG_LEVEL = "INFO"

# stdout carries the config echo and results; logs go to stderr
console = Console()
error_console = Console(stderr=True)


def configure_logging(level=None):
    """
    Install a RichHandler on the root logger.

    Args:
        level: level name; falls back to MPSCOPE_LOG_LEVEL, then INFO
    """
    name = (level or os.environ.get(LOG_LEVEL_ENV) or DEFAULT_LOG_LEVEL).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise InvalidConfigError(f"Unknown log level '{name}'")
    logging.basicConfig(
        level=numeric,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=error_console, show_path=False)],
        force=True,
    )


def get_worker_count():
    """
    Worker cap for layer/trial fan-out.

    MPSCOPE_THREADS unset or 0 means one worker per CPU.
    """
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise InvalidConfigError(f"{THREADS_ENV} must be a non-negative integer, got '{raw}'")
    if value < 0:
        raise InvalidConfigError(f"{THREADS_ENV} must be a non-negative integer, got {value}")
    return value or (os.cpu_count() or 1)


def exit_on_error(fn):
    """
    Decorator for command functions: returns the exit code of any
    MpscopeError (after logging it) instead of raising.
    """
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            result = fn(*args, **kwargs)
        except MpscopeError as e:
            logger.error(f"{type(e).__name__}: {e}")
            return e.exit_code
        except OSError as e:
            logger.error(f"I/O error: {e}")
            return 1
        return EXIT_OK if result is None else result
    return wrapper


def echo_config(config):
    """Print the fully-resolved configuration as JSON on stdout"""
    console.print_json(data=config, sort_keys=True)

import logging
import sys
import os

LOGGER_NAME = 'SpeechDPM'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(level='INFO', stream=None):
    """
    Configure the ``SpeechDPM`` logger and return it.

    The root logger stays at WARNING so only this project logs at ``level``.
    Repeated calls change the level; the handler is installed once.
    """
    logging.basicConfig(level=logging.WARNING, format=LOG_FORMAT, stream=stream or sys.stderr)
    logger = logging.getLogger(LOGGER_NAME)
    resolved = logging.getLevelName(level.upper()) if isinstance(level, str) else level
    if not isinstance(resolved, int):
        raise ValueError(f"unknown log level {level!r}")
    logger.setLevel(resolved)
    logger.debug(f"Logger level set to {logging.getLevelName(resolved)}")
    return logger


# Add the project root to sys.path
project_root = os.path.dirname(os.path.abspath(__file__))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

import logging
import os

from dotenv import load_dotenv

logger = logging.getLogger(__name__)


def _parse_optional_int(name: str):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return None
    return int(raw)


class Settings:
    """Process-level settings loaded from environment variables"""

    # The .env file lives at the repository root (parent of config/)
    _config_dir = os.path.dirname(__file__)
    _root_dir = os.path.dirname(_config_dir)
    _env_path = os.path.join(_root_dir, '.env')
    load_dotenv(_env_path)
    logger.debug("[CONFIG]  Environment variables loaded from %s", _env_path)

    # Where run directories are created
    OUTPUT_ROOT = os.getenv('BORT2_OUTPUT_ROOT', 'runs')

    # Overrides the seed of any loaded experiment config when set
    try:
        SEED = _parse_optional_int('BORT2_SEED')
    except ValueError as e:
        SEED = None
        logger.warning("[CONFIG]  Failed to parse BORT2_SEED, ignoring it - Error: %s", e)

    LOG_LEVEL = os.getenv('BORT2_LOG_LEVEL', 'INFO')
    LOG_DIR = os.getenv('BORT2_LOG_DIR', 'logs')

    try:
        SWEEP_WORKERS = int(os.getenv('BORT2_SWEEP_WORKERS', 1))
    except ValueError as e:
        SWEEP_WORKERS = 1
        logger.warning("[CONFIG]  Failed to parse BORT2_SWEEP_WORKERS, using 1 - Error: %s", e)

    logger.debug("[CONFIG]  Output root: %s, seed override: %s", OUTPUT_ROOT, SEED)

    @classmethod
    def validate(cls):
        """Validate the current settings, raising ValueError with every problem found"""
        problems = []

        if not cls.OUTPUT_ROOT:
            problems.append("BORT2_OUTPUT_ROOT is empty")

        if cls.SEED is not None and cls.SEED < 0:
            problems.append(f"BORT2_SEED must be non-negative, got {cls.SEED}")

        if cls.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            problems.append(f"BORT2_LOG_LEVEL is not a logging level: {cls.LOG_LEVEL}")

        if cls.SWEEP_WORKERS < 1:
            problems.append(f"BORT2_SWEEP_WORKERS must be >= 1, got {cls.SWEEP_WORKERS}")

        if problems:
            logger.error("[CONFIG]  Validation failed: %s", '; '.join(problems))
            raise ValueError(f"Invalid settings: {'; '.join(problems)}")

        logger.debug("[CONFIG]  All settings are valid")
        return True

    @classmethod
    def reload_config(cls):
        """Reload settings from the environment and the .env file"""
        load_dotenv(cls._env_path, override=True)

        old = cls.get_current_config()
        cls.OUTPUT_ROOT = os.getenv('BORT2_OUTPUT_ROOT', 'runs')
        try:
            cls.SEED = _parse_optional_int('BORT2_SEED')
        except ValueError as e:
            logger.warning("[CONFIG]  Failed to reload BORT2_SEED, keeping %s - Error: %s", cls.SEED, e)
        cls.LOG_LEVEL = os.getenv('BORT2_LOG_LEVEL', 'INFO')
        cls.LOG_DIR = os.getenv('BORT2_LOG_DIR', 'logs')
        try:
            cls.SWEEP_WORKERS = int(os.getenv('BORT2_SWEEP_WORKERS', 1))
        except ValueError as e:
            logger.warning("[CONFIG]  Failed to reload BORT2_SWEEP_WORKERS, keeping %s - Error: %s",
                           cls.SWEEP_WORKERS, e)

        for key, value in cls.get_current_config().items():
            if old[key] != value:
                logger.info("[CONFIG]  %s changed: %s → %s", key, old[key], value)
        return True

    @classmethod
    def get_current_config(cls):
        """Get current settings values"""
        return {
            'BORT2_OUTPUT_ROOT': cls.OUTPUT_ROOT,
            'BORT2_SEED': cls.SEED,
            'BORT2_LOG_LEVEL': cls.LOG_LEVEL,
            'BORT2_LOG_DIR': cls.LOG_DIR,
            'BORT2_SWEEP_WORKERS': cls.SWEEP_WORKERS,
        }

    @classmethod
    def print_current_config(cls):
        """Print current settings for debugging"""
        print("=" * 60)
        print("[CONFIG]  CURRENT SETTINGS")
        print("=" * 60)
        for key, value in cls.get_current_config().items():
            print(f"[CONFIG]  {key}: {value}")
        print("=" * 60)

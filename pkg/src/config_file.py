"""
Reading and writing flat ``KEY=value`` experiment config files
"""

import hashlib
import json
import logging
import os
from typing import Dict, Iterable, Optional, Sequence

from dotenv import dotenv_values
from pydantic import ValidationError

from config.settings import Settings
from src.errors import ConfigurationError
from src.models import ExperimentConfig

logger = logging.getLogger(__name__)

INCLUDE_KEY = "include"
# Keys that locate a run but do not change its outcome
HASH_EXCLUDED_FIELDS = ("output_dir",)


class ConfigFileManager:
    """Reads flat config files, following ``include=`` lines relative to the including file"""

    def __init__(self, config_file_path: str):
        self.config_file_path = config_file_path

    def read_config_file(self) -> Dict[str, str]:
        """Read all keys, included files first so the including file wins"""
        return self._read(os.path.abspath(self.config_file_path), ())

    def _read(self, path: str, chain: Iterable[str]) -> Dict[str, str]:
        chain = tuple(chain)
        if path in chain:
            cycle = " -> ".join(list(chain) + [path])
            raise ConfigurationError(f"include cycle: {cycle}")
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")

        raw = dotenv_values(path)
        values: Dict[str, str] = {}
        include = raw.pop(INCLUDE_KEY, None)
        if include:
            for item in include.split(","):
                included = os.path.join(os.path.dirname(path), item.strip())
                values.update(self._read(os.path.abspath(included), chain + (path,)))
        for key, value in raw.items():
            if value is None:
                raise ConfigurationError(f"{path}: key '{key}' has no value")
            values[key.strip().lower()] = value.strip()
        return values

    @staticmethod
    def _format_line(key: str, value: object) -> Optional[str]:
        if value is None:
            return None
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        return f"{key}={value}\n"

    def write_config_file(self, values: Dict[str, object], header: Sequence[str] = ()) -> bool:
        """Write every key on its own line, sorted, after optional ``#`` header lines"""
        return self.write_sections({"": values}, header)

    def write_sections(self, sections: Dict[str, Dict[str, object]], header: Sequence[str] = (),
                       notes: Optional[Dict[str, str]] = None) -> bool:
        """Write groups of keys, each under a ``# title`` comment (untitled groups get none).

        A key with an entry in ``notes`` is preceded by that note as a comment line.
        """
        notes = notes or {}
        directory = os.path.dirname(os.path.abspath(self.config_file_path))
        os.makedirs(directory, exist_ok=True)
        lines = [f"# {line}\n" for line in header]
        for title, values in sections.items():
            body = []
            for key in sorted(values):
                line = self._format_line(key, values[key])
                if not line:
                    continue
                if key in notes:
                    body.append(f"# {notes[key]}\n")
                body.append(line)
            if not body:
                continue
            if title:
                lines.append(f"\n# {title}\n" if lines else f"# {title}\n")
            lines.extend(body)
        with open(self.config_file_path, "w", encoding="utf-8") as f:
            f.writelines(lines)
        return True


def load_experiment_config(path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """Parse a config file into an ExperimentConfig.

    Precedence, lowest first: the file (and its includes), the BORT2_SEED /
    BORT2_OUTPUT_ROOT environment settings, then explicit ``overrides``. Without a
    file the model defaults are the base.
    """
    values: Dict[str, object] = dict(ConfigFileManager(path).read_config_file()) if path else {}
    source = path or "<defaults>"

    if Settings.SEED is not None:
        values["seed"] = Settings.SEED
    if "output_dir" not in values and Settings.OUTPUT_ROOT:
        values["output_dir"] = Settings.OUTPUT_ROOT
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key.lower()] = value

    unknown = sorted(set(values) - set(ExperimentConfig.model_fields))
    if unknown:
        raise ConfigurationError(f"{source}: unknown keys {unknown}")
    try:
        config = ExperimentConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: {e}") from e
    logger.debug("Loaded experiment config '%s' from %s", config.name, source)
    return config


def save_experiment_config(config: ExperimentConfig, path: str) -> bool:
    """Write the resolved config, explicitly set keys apart from model defaults"""
    values = config.model_dump(mode="json")
    defaults = ExperimentConfig().model_dump(mode="json")
    explicit = {k: v for k, v in values.items() if v != defaults.get(k)}
    inherited = {k: v for k, v in values.items() if k not in explicit}
    header = [f"experiment {config.name}, config hash {config_hash(config)}"]
    return ConfigFileManager(path).write_sections(
        {"set explicitly": explicit, "model defaults": inherited}, header, notes=default_sources())


def default_sources() -> Dict[str, str]:
    """Where each documented default comes from, keyed by config key"""
    return {key: field.description for key, field in ExperimentConfig.model_fields.items() if field.description}


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON of every outcome-relevant field"""
    payload = config.model_dump(mode="json", exclude=set(HASH_EXCLUDED_FIELDS))
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

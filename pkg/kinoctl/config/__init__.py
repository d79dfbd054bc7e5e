"""Configuration Management Utilities

One global configuration file (YAML or JSON) plus environment overrides,
mapped onto the typed settings dataclass each module owns.
"""

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union

import yaml
from dotenv import load_dotenv

from kinoctl.control_runtime import RuntimeConfig
from kinoctl.evaluation import EvalConfig
from kinoctl.exceptions import ConfigError
from kinoctl.fkd_model import TrainingConfig
from kinoctl.logging import get_logger
from kinoctl.nlls_opt import LMConfig
from kinoctl.traj_data import DataConfig, WindowSpec
from kinoctl.vehicle_sim import SimParams

logger = get_logger(__name__)

T = TypeVar("T")

SECTIONS: Dict[str, Optional[type]] = {
    "sim": SimParams,
    "data": DataConfig,
    "model": WindowSpec,
    "train": TrainingConfig,
    "solver": LMConfig,
    "runtime": RuntimeConfig,
    "eval": EvalConfig,
    "logging": None,
}
LOGGING_KEYS = ("level", "file", "structured", "json_logs")


class ConfigManager:
    """Manager for the global configuration file and environment overrides."""

    def __init__(self, config_file: Optional[Union[str, Path]] = None, env_file: Optional[Union[str, Path]] = None):
        """
        Initialize configuration manager.

        Args:
            config_file: Optional path to a YAML/JSON config file
            env_file: Optional path to a .env file

        Raises:
            ConfigError: the file is missing, unreadable or has unknown sections
        """
        self.config: Dict[str, Any] = {}

        if env_file and os.path.exists(env_file):
            load_dotenv(env_file)
            logger.info("Loaded environment", path=str(env_file))
        else:
            load_dotenv()

        if config_file is not None:
            if not os.path.exists(config_file):
                raise ConfigError(f"config file not found: {config_file}")
            self.config = self._load_config_file(str(config_file))
            logger.info("Loaded configuration", path=str(config_file))

        unknown = sorted(set(self.config) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; expected {sorted(SECTIONS)}")

    def _load_config_file(self, config_file: str) -> Dict[str, Any]:
        try:
            with open(config_file, "r") as f:
                if config_file.endswith((".yml", ".yaml")):
                    data = yaml.safe_load(f) or {}
                elif config_file.endswith(".json"):
                    data = json.load(f) or {}
                else:
                    raise ConfigError(f"Unsupported config file format: {config_file}")
        except (OSError, yaml.YAMLError, json.JSONDecodeError) as e:
            logger.error("Failed to load config file", path=config_file, error=str(e))
            raise ConfigError(f"cannot read {config_file}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{config_file}: top level must be a mapping of sections")
        return data

    def get(self, key: str, default: Any = None, required: bool = False) -> Any:
        """
        Get a configuration value.

        Checks the environment first (``sim.T_v`` -> ``SIM_T_V``, parsed as a
        YAML scalar), then the config file.

        Args:
            key: Dot-notation key
            default: Value when the key is absent
            required: Raise instead of returning ``default``

        Raises:
            ConfigError: required key not found
        """
        env_value = os.getenv(_env_name(key))
        if env_value is not None:
            return _coerce(env_value)

        value = self._get_nested(self.config, key.split("."))
        if value is None:
            if required:
                raise ConfigError(f"Required configuration key not found: {key}")
            return default
        return value

    def _get_nested(self, data: Any, keys: list) -> Any:
        if not keys:
            return data
        key = keys[0]
        if not isinstance(data, dict) or key not in data:
            return None
        if len(keys) == 1:
            return data[key]
        return self._get_nested(data[key], keys[1:])

    def set(self, key: str, value: Any) -> None:
        keys = key.split(".")
        data = self.config
        for k in keys[:-1]:
            data = data.setdefault(k, {})
        data[keys[-1]] = value
        logger.debug("Set config", key=key, value=value)

    def section(self, name: str) -> Dict[str, Any]:
        """
        The effective key/value pairs of a section, environment overrides applied.

        Raises:
            ConfigError: unknown section or unknown keys within it
        """
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        raw = self.config.get(name) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        known = _section_keys(name)
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
        values = dict(raw)
        for key in known:
            env_value = os.getenv(_env_name(f"{name}.{key}"))
            if env_value is not None:
                values[key] = _coerce(env_value)
        return values

    def build(self, name: str, cls: Type[T]) -> T:
        values = self.section(name)
        try:
            return cls(**values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid section {name!r}: {e}") from e

    def get_sim_params(self) -> SimParams:
        return self.build("sim", SimParams)

    def get_window_spec(self) -> WindowSpec:
        return self.build("model", WindowSpec)

    def get_data_config(self) -> DataConfig:
        return self.build("data", DataConfig)

    def get_train_config(self) -> TrainingConfig:
        return self.build("train", TrainingConfig)

    def get_lm_config(self) -> LMConfig:
        return self.build("solver", LMConfig)

    def get_runtime_config(self) -> RuntimeConfig:
        return self.build("runtime", RuntimeConfig)

    def get_eval_config(self) -> EvalConfig:
        return self.build("eval", EvalConfig)

    def get_logging_section(self) -> Dict[str, Any]:
        return self.section("logging")

    def effective_config(self) -> Dict[str, Any]:
        """Every section with defaults filled in, as plain data."""
        out: Dict[str, Any] = {}
        for name, cls in SECTIONS.items():
            if cls is None:
                out[name] = self.section(name)
                continue
            out[name] = _plain(dataclasses.asdict(self.build(name, cls)))
        return out

    def save_config(self, output_file: Union[str, Path], effective: bool = True) -> None:
        """
        Write the configuration to ``output_file`` (YAML or JSON by extension).

        Args:
            output_file: Destination path
            effective: Write every section with defaults filled in rather than the raw file contents
        """
        output_file = str(output_file)
        data = self.effective_config() if effective else self.config
        try:
            Path(output_file).parent.mkdir(parents=True, exist_ok=True)
            with open(output_file, "w") as f:
                if output_file.endswith((".yml", ".yaml")):
                    yaml.safe_dump(data, f, default_flow_style=False, sort_keys=False)
                elif output_file.endswith(".json"):
                    json.dump(data, f, indent=2)
                    f.write("\n")
                else:
                    raise ConfigError(f"Unsupported output file format: {output_file}")
            logger.info("Saved configuration", path=output_file)
        except OSError as e:
            logger.error("Failed to save config", path=output_file, error=str(e))
            raise


def _env_name(key: str) -> str:
    return key.upper().replace(".", "_")


def _coerce(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _section_keys(name: str) -> tuple:
    cls = SECTIONS[name]
    if cls is None:
        return LOGGING_KEYS
    return tuple(f.name for f in dataclasses.fields(cls) if f.init)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


_config_manager: Optional[ConfigManager] = None


def get_config_manager(config_file: Optional[Union[str, Path]] = None,
                       env_file: Optional[Union[str, Path]] = None) -> ConfigManager:
    """
    Get or create the global ConfigManager instance.

    Args:
        config_file: Optional path to config file (only used on first call)
        env_file: Optional path to .env file (only used on first call)
    """
    global _config_manager
    if _config_manager is None:
        _config_manager = ConfigManager(config_file=config_file, env_file=env_file)
    return _config_manager


def reset_config_manager() -> None:
    global _config_manager
    _config_manager = None


__all__ = [
    "ConfigManager",
    "SECTIONS",
    "get_config_manager",
    "reset_config_manager",
]

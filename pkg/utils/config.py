"""
Harness Configuration
Resolves CliConfig from command-line overrides, BENCH_SENTRY_* environment variables
(``.env`` supported), and an optional TOML file, in that order of precedence.
"""

from __future__ import annotations

import logging
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, FrozenSet, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError
from .regression import RegressionPolicy
from .workloads import DEFAULT_TIMEOUT_S, Device

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG_FILE = "bench_sentry.toml"
ENV_PREFIX = "BENCH_SENTRY_"

_ENV_KEYS = {
    "registry": "REGISTRY",
    "baseline_store": "BASELINE",
    "output_dir": "OUTPUT_DIR",
    "batch_size_cache": "BATCH_SIZE_CACHE",
    "webhook_url": "WEBHOOK_URL",
    "webhook_token_env": "WEBHOOK_TOKEN_ENV",
    "available_devices": "DEVICES",
    "build_command": "BUILD_COMMAND",
    "timeout_s": "TIMEOUT_S",
    "repeats": "REPEATS",
}


class CliConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    registry: Path = PROJECT_ROOT / "workloads"
    baseline_store: Path = Path("bench-baseline")
    output_dir: Path = Path("bench-reports")
    batch_size_cache: Optional[Path] = Path(".bench_sentry") / "batch_sizes"
    policy: RegressionPolicy = Field(default_factory=RegressionPolicy)
    webhook_url: Optional[str] = None
    webhook_token_env: str = "BENCH_SENTRY_WEBHOOK_TOKEN"
    available_devices: FrozenSet[Device] = frozenset({"cpu", "gpu"})
    build_command: Optional[str] = None
    timeout_s: float = Field(default=DEFAULT_TIMEOUT_S, gt=0)
    repeats: int = Field(default=10, ge=1)

    def webhook_token(self) -> Optional[str]:
        return os.getenv(self.webhook_token_env) or None

    def require_paths(self, registry: bool = True, baseline_store: bool = False) -> None:
        """Fail before any measurement when required locations are missing"""
        if registry and not self.registry.is_dir():
            raise ConfigError(f"Workload registry not found: {self.registry}")
        if baseline_store and not self.baseline_store.parent.exists():
            raise ConfigError(f"Baseline store parent directory not found: {self.baseline_store.parent}")


def _read_toml(path: Path) -> Dict[str, Any]:
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"Could not read config file {path}: {exc}") from exc
    section = data.get("bench_sentry", data)
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: [bench_sentry] must be a table")
    return dict(section)


def _from_environment(environ: Mapping[str, str]) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for field, suffix in _ENV_KEYS.items():
        raw = environ.get(ENV_PREFIX + suffix)
        if raw:
            values[field] = raw
    return values


def _normalize(values: Dict[str, Any]) -> Dict[str, Any]:
    devices = values.get("available_devices")
    if isinstance(devices, str):
        values["available_devices"] = frozenset(d.strip() for d in devices.split(",") if d.strip())
    return values


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> CliConfig:
    if environ is None:
        load_dotenv()
        environ = os.environ

    values: Dict[str, Any] = {}

    config_path = Path(path) if path else Path(DEFAULT_CONFIG_FILE)
    if path and not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    if config_path.exists():
        values.update(_read_toml(config_path))
        logger.info("Loaded configuration from %s", config_path)

    values.update(_from_environment(environ))

    policy = dict(values.pop("policy", {}) or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in RegressionPolicy.model_fields:
            policy[key] = value
        else:
            values[key] = value
    if policy:
        values["policy"] = policy

    try:
        return CliConfig(**_normalize(values))
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc

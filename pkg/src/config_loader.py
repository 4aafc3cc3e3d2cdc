"""
Scenario file parsing, canonical serialization and seed resolution.
"""
import os
import json
import hashlib
import logging
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

from pydantic import ValidationError

from .errors import ConfigError
from .models import SimConfig

logger = logging.getLogger("muvis")

SEED_ENV_VAR = "MUVIS_SEED"


def _format_path(loc: Sequence[Union[str, int]]) -> str:
    """('users', 0, 'speed_mps') -> 'users[0].speed_mps'"""
    path = ""
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path += f".{part}" if path else str(part)
    return path


def _reason(error: Mapping[str, Any]) -> str:
    kind = error.get("type", "")
    if kind == "extra_forbidden":
        return "unknown key"
    if kind == "missing":
        return "is required"
    return str(error.get("msg", "invalid value"))


def parse_config(text: str) -> SimConfig:
    """
    Parse a JSON scenario into a validated SimConfig

    Unknown keys are rejected, omitted optional blocks take their defaults.

    Raises:
        ConfigError: naming the offending field, e.g. "rl.alpha out of (0,1]"
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON: {e.msg} at line {e.lineno} column {e.colno}") from e
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a JSON object")

    try:
        return SimConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_reason(first), _format_path(first.get("loc", ()))) from e


def load_config(path: Union[str, Path]) -> SimConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario file: {e.strerror or e}", str(path)) from e
    config = parse_config(text)
    logger.info(f"Loaded scenario {path}: {len(config.users)} users, policy={config.policy.value}")
    return config


def serialize_config(config: SimConfig) -> str:
    """Canonical JSON form: every field present, keys sorted"""
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def config_digest(config: SimConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode("utf-8")).hexdigest()


def resolve_seed(
    cli_seed: Optional[int],
    config: SimConfig,
    environ: Optional[Mapping[str, str]] = None,
) -> int:
    """--seed, then the scenario's seed, then MUVIS_SEED, then 0"""
    if cli_seed is not None:
        return cli_seed
    if config.seed is not None:
        return config.seed
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV_VAR, "").strip()
    if not raw:
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"must be a non-negative integer, got {raw!r}", SEED_ENV_VAR)
    if seed < 0:
        raise ConfigError(f"must be a non-negative integer, got {raw!r}", SEED_ENV_VAR)
    return seed

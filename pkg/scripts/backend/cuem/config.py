import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from .errors import ConfigError
from .models import PipelineConfig

PACKAGE_DIR = Path(__file__).resolve().parent
DEFAULT_FIXTURES_DIR = PACKAGE_DIR / "fixtures"
DEFAULT_TEMPLATES_DIR = PACKAGE_DIR / "templates"
DEFAULT_DATA_DIR = Path(os.getenv("CUEM_DATA_DIR", ".cuem"))

CONFIG_ENV = "CUEM_CONFIG"
LOG_LEVEL_ENV = "CUEM_LOG_LEVEL"

BACKEND_MODES = ("mock", "http")


@dataclass(frozen=True)
class Settings:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    backend_mode: str = "mock"
    endpoints: dict = field(default_factory=dict)
    backend_timeout_s: float = 10.0
    fixtures_dir: Path = DEFAULT_FIXTURES_DIR
    templates_dir: Path = DEFAULT_TEMPLATES_DIR
    api_registry: Optional[Path] = DEFAULT_FIXTURES_DIR / "apis.json"
    instance_db: Path = DEFAULT_DATA_DIR / "instance_db.jsonl"
    trace_store: Path = DEFAULT_DATA_DIR / "traces.jsonl"
    interaction_log: Optional[Path] = DEFAULT_FIXTURES_DIR / "interactions.jsonl"
    image_store: Optional[Path] = DEFAULT_FIXTURES_DIR / "images.json"
    domain_filter: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 8000
    log_level: str = "INFO"
    source: Optional[Path] = None


_PATH_KEYS = ("templates_dir", "api_registry", "instance_db", "trace_store", "interaction_log", "image_store")


def _resolve(base, value):
    if value is None or value == "":
        return None
    p = Path(os.path.expanduser(str(value)))
    return p if p.is_absolute() else (base / p)


def settings_from_dict(raw, base_dir=None):
    """Settings from a parsed TOML document; relative paths resolve against `base_dir`."""
    base = Path(base_dir) if base_dir else Path.cwd()

    pipeline_raw = dict(raw.get("pipeline", {}))
    known = {f.name for f in fields(PipelineConfig)}
    for key in pipeline_raw:
        if key not in known:
            raise ConfigError(f"unknown key pipeline.{key}")
    try:
        pipeline = PipelineConfig(**pipeline_raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [pipeline] section: {e}") from e

    backends = raw.get("backends", {})
    mode = backends.get("mode", "mock")
    if mode not in BACKEND_MODES:
        raise ConfigError(f"backends.mode must be one of {BACKEND_MODES}, got {mode!r}")
    endpoints = dict(backends.get("endpoints", {}))
    if mode == "http" and not endpoints:
        raise ConfigError("backends.endpoints is required when backends.mode = 'http'")

    kwargs = dict(
        pipeline=pipeline,
        backend_mode=mode,
        endpoints=endpoints,
        backend_timeout_s=float(backends.get("timeout_s", 10.0)),
    )
    if "fixtures_dir" in backends:
        kwargs["fixtures_dir"] = _resolve(base, backends["fixtures_dir"])

    paths = raw.get("paths", {})
    for key in paths:
        if key not in _PATH_KEYS:
            raise ConfigError(f"unknown key paths.{key}")
        kwargs[key] = _resolve(base, paths[key])
    if "domain_filter" in raw.get("search", {}):
        kwargs["domain_filter"] = raw["search"]["domain_filter"] or None

    service = raw.get("service", {})
    try:
        if "host" in service:
            kwargs["host"] = str(service["host"])
        if "port" in service:
            kwargs["port"] = int(service["port"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [service] section: {e}") from e

    kwargs["log_level"] = str(raw.get("logging", {}).get("level") or os.getenv(LOG_LEVEL_ENV, "INFO")).upper()
    return Settings(**kwargs)


def load_settings(path=None):
    """Settings from `path`, else $CUEM_CONFIG, else the bundled fixture defaults."""
    load_dotenv()
    path = path or os.getenv(CONFIG_ENV)
    if not path:
        return Settings(log_level=os.getenv(LOG_LEVEL_ENV, "INFO").upper())
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    settings = settings_from_dict(raw, path.resolve().parent)
    return replace(settings, source=path.resolve())

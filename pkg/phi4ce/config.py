"""
Run configuration for the phi4ce command line.

Values are resolved in four layers, later layers winning:
1. Defaults in the CONFIGURATION block below
2. A plain-text KEY=value file (--config), read with python-dotenv
3. Environment variables with the PHI4CE_ prefix (a local .env is loaded first);
   PHI4CE_CONFIG_FILE stands in for --config
4. Command-line flags
"""

import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

from dotenv import dotenv_values, load_dotenv

from phi4ce.errors import ConfigError

# =============================================================================
# CONFIGURATION
# =============================================================================

ENV_PREFIX = "PHI4CE_"
CONFIG_FILE_ENV = "PHI4CE_CONFIG_FILE"  # names the KEY=value file when --config is absent

DEFAULT_LAMBDA = 0.02        # coupling used by the acceptance runs
DEFAULT_H = 1.0              # lattice spacing
DEFAULT_WINDOW = (0.0, 4.0)  # Λ, closed interval
DEFAULT_SEED = 0
DEFAULT_THREADS = 1          # 1 keeps reductions in a single fixed order
DEFAULT_FORMAT = "json"
DEFAULT_NMAX = 3             # configuration-length truncation
DEFAULT_MMAX = 3             # chain-length truncation in the KS sums
DEFAULT_TOL = 1e-12          # Picard residual tolerance
DEFAULT_METHOD = "tensor"    # tensor | mc
DEFAULT_ORDER = 40           # Gauss-Hermite order per site before the node budget
DEFAULT_LEMMA3_N = 10

# flag name -> (RunConfig field, parser)
_KEYS = {
    "LAMBDA": "coupling",
    "H": "h",
    "WINDOW": "window",
    "SEED": "seed",
    "THREADS": "threads",
    "OUT": "out",
    "FORMAT": "fmt",
    "NMAX": "n_max",
    "MMAX": "m_max",
    "TOL": "tol",
    "METHOD": "method",
    "ORDER": "order",
    "N": "n",
    "CHECKPOINT": "checkpoint",
}


@dataclass(frozen=True)
class RunConfig:
    subcommand: str = "full-suite"
    coupling: float = DEFAULT_LAMBDA
    h: float = DEFAULT_H
    window: tuple = DEFAULT_WINDOW
    seed: int = DEFAULT_SEED
    threads: int = DEFAULT_THREADS
    out: str = None
    fmt: str = DEFAULT_FORMAT
    n_max: int = DEFAULT_NMAX
    m_max: int = DEFAULT_MMAX
    tol: float = DEFAULT_TOL
    method: str = DEFAULT_METHOD
    order: int = DEFAULT_ORDER
    n: int = DEFAULT_LEMMA3_N
    checkpoint: str = None
    resume: bool = False
    quiet: bool = False
    sources: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not (self.coupling >= 0 and math.isfinite(self.coupling)):
            raise ConfigError(f"lambda must be a finite number >= 0, got {self.coupling}")
        if not self.h > 0:
            raise ConfigError(f"h must be > 0, got {self.h}")
        lo, hi = self.window
        if not hi >= lo:
            raise ConfigError(f"window must satisfy lo <= hi, got {self.window}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.fmt not in ("json", "csv"):
            raise ConfigError(f"format must be json or csv, got {self.fmt!r}")
        if self.method not in ("tensor", "mc"):
            raise ConfigError(f"method must be tensor or mc, got {self.method!r}")

    def to_dict(self):
        """Resolved values as embedded in every report (provenance excluded)."""
        data = asdict(self)
        data.pop("sources")
        data["window"] = list(self.window)
        return data


def parse_window(text):
    """Parse 'lo,hi' (or 'lo:hi') into a float pair."""
    parts = str(text).replace(":", ",").split(",")
    if len(parts) != 2:
        raise ConfigError(f"window must look like 'lo,hi', got {text!r}")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError:
        raise ConfigError(f"window must look like 'lo,hi', got {text!r}")


def _coerce(name, raw):
    """Convert a string value to the type of RunConfig.<name>."""
    if name == "window":
        return raw if isinstance(raw, tuple) else parse_window(raw)
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[name]
    try:
        if kind is float or kind == "float":
            return float(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is bool or kind == "bool":
            if isinstance(raw, bool):
                return raw
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
    except (TypeError, ValueError):
        raise ConfigError(f"{ENV_PREFIX}{name.upper()} has malformed value {raw!r}")
    return raw


def _layer(values, origin):
    """Map a PHI4CE_* dictionary onto RunConfig field overrides."""
    overrides = {}
    for key, raw in values.items():
        if key == CONFIG_FILE_ENV or not key.startswith(ENV_PREFIX) or raw is None or raw == "":
            continue
        flag = key[len(ENV_PREFIX):]
        if flag not in _KEYS:
            raise ConfigError(f"{key} in {origin} is not a known setting")
        overrides[_KEYS[flag]] = _coerce(_KEYS[flag], raw)
    return overrides


def resolve_config(subcommand, flags=None, config_file=None, environ=None, load_env_file=True):
    """
    Build a RunConfig from defaults, file, environment and flags.

    `flags` holds command-line values keyed by RunConfig field name; None
    means "not given". `environ` defaults to os.environ.
    """
    if load_env_file and environ is None:
        load_dotenv(override=False)
    environ = os.environ if environ is None else environ
    if not config_file:
        config_file = environ.get(CONFIG_FILE_ENV) or None

    merged = {}
    sources = []
    if config_file:
        if not os.path.exists(config_file):
            raise ConfigError(f"config file {config_file} not found")
        merged.update(_layer(dotenv_values(config_file), config_file))
        sources.append(f"file:{config_file}")

    env_overrides = _layer(environ, "environment")
    if env_overrides:
        sources.append("env:" + ",".join(sorted(env_overrides)))
    merged.update(env_overrides)

    for name, value in (flags or {}).items():
        if value is not None:
            merged[name] = _coerce(name, value)

    try:
        return replace(RunConfig(subcommand=subcommand), **merged, sources=tuple(sources))
    except TypeError as e:
        raise ConfigError(str(e))

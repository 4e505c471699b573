"""INI configuration files for the command-line tools.

Every command reads one section (named after the command) plus the shared
``[common]`` section. Values are coerced to the type of the built-in
default, and unknown keys are rejected so typos do not pass silently.
Precedence is flags > config file > defaults.
"""

from __future__ import annotations

import configparser
from typing import Any, Dict, Mapping, Optional


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"field '{field_name}': {message}")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(field_name: str, raw: str, default: Any) -> Any:
    """Parse ``raw`` into the type of ``default``."""
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(field_name, f"cannot parse {raw!r} as {type(default).__name__}") from None
    if default is None and text.lower() in ("", "none"):
        return None
    return text


def read_config(path, section: str, defaults: Mapping[str, Any]) -> Dict[str, Any]:
    """Values from ``[common]`` and ``[section]`` of an INI file; the command
    section wins over ``[common]``. Keys not present in ``defaults`` raise."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("<config>", str(exc).splitlines()[0]) from None
    values: Dict[str, Any] = {}
    for name in ("common", section):
        if not parser.has_section(name):
            continue
        for key, raw in parser.items(name):
            if key not in defaults:
                if name == "common":
                    continue
                raise ConfigError(f"{section}.{key}", "unknown option")
            values[key] = coerce(f"{name}.{key}", raw, defaults[key])
    return values


def resolve(
    defaults: Mapping[str, Any], from_file: Mapping[str, Any], flags: Mapping[str, Any]
) -> Dict[str, Any]:
    """Merge the three layers. ``None`` in ``flags`` means the flag was not given."""
    out = dict(defaults)
    out.update(from_file)
    out.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return out


def load(
    section: str,
    defaults: Mapping[str, Any],
    flags: Mapping[str, Any],
    path: Optional[str] = None,
) -> Dict[str, Any]:
    from_file = read_config(path, section, defaults) if path else {}
    return resolve(defaults, from_file, flags)

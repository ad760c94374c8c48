"""Plain-text `key = value` configuration files.

Blank lines and lines starting with '#' are ignored.  Values keep their
raw string form; the consuming module converts and validates them.
"""

from __future__ import annotations

from .errors import FormatError


def read_kv_config(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise FormatError(f"{path}:{lineno}: empty key")
            if key in out:
                raise FormatError(f"{path}:{lineno}: duplicate key '{key}'")
            out[key] = value
    return out


def check_keys(cfg: dict, allowed, what: str) -> None:
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise FormatError(f"unknown {what} key(s): {', '.join(unknown)}")


def parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise FormatError(f"cannot parse boolean from '{s}'")

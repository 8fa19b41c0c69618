"""Server configuration file (TOML)."""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .auth.verify import SCHEMES

KNOWN_KEYS = {
    "listen", "cert", "key", "url_path", "identity_store", "schemes", "max_channels",
    "oidc_audience", "mode", "initial_window", "forwarding",
}
REQUIRED_KEYS = ("listen", "cert", "key", "url_path", "identity_store")
MODES = ("single-user", "privileged")


class ConfigError(ValueError):
    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ":".join(str(p) for p in (self.path, line) if p is not None)
        super().__init__(f"{where}: {message}" if where else message)


def parse_listen(value: str) -> tuple[str, int]:
    m = re.fullmatch(r"(?:\[([^\]]+)\]|([^:\[\]]*)):(\d{1,5})", value)
    if not m or not 0 <= int(m.group(3)) <= 65535:
        raise ValueError(f"listen must look like host:port, got {value!r}")
    return m.group(1) or m.group(2) or "0.0.0.0", int(m.group(3))


@dataclass
class ServerConfig:
    listen: str
    cert: Path
    key: Path
    url_path: str
    identity_store: Path
    schemes: tuple = ("password", "pubkey")
    max_channels: int = 64
    oidc_audience: Optional[str] = None
    mode: str = "single-user"
    initial_window: Optional[int] = None
    forwarding: bool = True
    source: Optional[Path] = field(default=None, repr=False)

    @property
    def address(self) -> tuple[str, int]:
        return parse_listen(self.listen)

    @property
    def privileged(self) -> bool:
        return self.mode == "privileged"


def _key_lines(text: str) -> dict:
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*([A-Za-z0-9_-]+)\s*=", raw)
        if m:
            lines.setdefault(m.group(1), lineno)
    return lines


def parse_server_config(text: str, source=None) -> ServerConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", source, int(m.group(1)) if m else None) from None
    lines = _key_lines(text)
    base = Path(source).parent if source is not None else Path.cwd()

    def fail(key, message):
        raise ConfigError(f"{key}: {message}", source, lines.get(key))

    for key in raw:
        if key not in KNOWN_KEYS:
            fail(key, "unknown key")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}", source)

    def string(key):
        value = raw[key]
        if not isinstance(value, str) or not value:
            fail(key, "expected a non-empty string")
        return value

    def path(key):
        p = Path(string(key)).expanduser()
        return p if p.is_absolute() else base / p

    listen = string("listen")
    try:
        parse_listen(listen)
    except ValueError as exc:
        fail("listen", str(exc))
    url_path = string("url_path")
    if not url_path.startswith("/"):
        fail("url_path", "must begin with '/'")

    schemes = raw.get("schemes", ["password", "pubkey"])
    if not isinstance(schemes, list) or not schemes or not all(isinstance(s, str) for s in schemes):
        fail("schemes", "expected a non-empty list of strings")
    unknown = [s for s in schemes if s not in SCHEMES]
    if unknown:
        fail("schemes", f"unknown scheme(s) {', '.join(unknown)}; choose from {', '.join(SCHEMES)}")

    max_channels = raw.get("max_channels", 64)
    if not isinstance(max_channels, int) or isinstance(max_channels, bool) or max_channels < 1:
        fail("max_channels", "must be an integer >= 1")

    audience = raw.get("oidc_audience")
    if audience is not None and not isinstance(audience, str):
        fail("oidc_audience", "expected a string")
    if "oidc" in schemes and not audience:
        fail("schemes", "the oidc scheme needs oidc_audience")

    mode = raw.get("mode", "single-user")
    if mode not in MODES:
        fail("mode", f"must be one of {', '.join(MODES)}")

    window = raw.get("initial_window")
    if window is not None and (not isinstance(window, int) or isinstance(window, bool) or window < 2):
        fail("initial_window", "must be an integer >= 2 (packets)")

    forwarding = raw.get("forwarding", True)
    if not isinstance(forwarding, bool):
        fail("forwarding", "expected true or false")

    return ServerConfig(listen=listen, cert=path("cert"), key=path("key"), url_path=url_path,
                        identity_store=path("identity_store"), schemes=tuple(schemes), max_channels=max_channels,
                        oidc_audience=audience, mode=mode, initial_window=window, forwarding=forwarding,
                        source=Path(source) if source is not None else None)


def load_server_config(path) -> ServerConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_server_config(text, path)

"""Number parsing with SPICE-style SI suffixes and ``key = value`` files."""
from __future__ import annotations

import hashlib
import math
import re
from pathlib import Path

_SUFFIX = {
    "f": 1e-15,
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "meg": 1e6,
    "g": 1e9,
    "t": 1e12,
}

_NUM_RE = re.compile(
    r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(meg|[fpnumkgt])?([a-z]*)$",
    re.IGNORECASE,
)


def parse_si(token: str) -> float:
    """Parse ``'100k'``, ``'1p'``, ``'2.5meg'``, ``'1e-9'`` into a float.

    Trailing unit letters after the multiplier are ignored as in SPICE
    (``'10pF'`` is 1e-11), but a bare unit like ``'F'`` is not a number.
    """
    m = _NUM_RE.match(token.strip())
    if m is None:
        raise ValueError(f"malformed number {token!r}")
    value = float(m.group(1))
    suffix = m.group(2)
    if suffix:
        value *= _SUFFIX[suffix.lower()]
    if not math.isfinite(value):
        raise ValueError(f"non-finite number {token!r}")
    return value


def read_kv_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ValueError(f"{path}:{lineno}: empty key or value")
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(items: dict[str, object], header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key, value in items.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def digest(text: str) -> str:
    """Stable short hash of normalized text (whitespace-collapsed lines)."""
    norm = "\n".join(" ".join(line.split()) for line in text.strip().splitlines())
    return hashlib.sha256(norm.encode()).hexdigest()[:16]

"""Flat ``key = value`` text files used for configs, manifests and checkpoints.

Lists are written comma-separated; floats use ``repr`` so they round-trip
exactly. Lines starting with ``#`` are comments.
"""

from pathlib import Path

__all__ = ["dump", "dumps", "load", "loads", "as_float", "as_int", "as_floats"]


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if hasattr(value, "tolist"):
        return _fmt(value.tolist())
    s = str(value)
    if "\n" in s:
        raise ValueError("values must be single-line")
    return s


def dumps(d, header=None):
    lines = [f"# {header}"] if header else []
    for key, value in d.items():
        if "=" in key or not key.strip():
            raise ValueError(f"invalid key {key!r}")
        lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def dump(path, d, header=None):
    Path(path).write_text(dumps(d, header))


def loads(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load(path):
    return loads(Path(path).read_text())


def as_float(v):
    return float(v)


def as_int(v):
    return int(v)


def as_floats(v):
    if hasattr(v, "tolist"):
        v = v.tolist()
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    v = str(v).strip()
    if not v:
        return []
    return [float(x) for x in v.split(",")]

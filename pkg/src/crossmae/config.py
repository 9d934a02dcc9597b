"""Flat key=value configuration and manifest parsing.

One syntax everywhere: `key=value`, one per line, `#` starts a comment,
sections are expressed with dotted key prefixes (optim.lr=5e-4). No nesting,
no quoting. Parse errors always carry the source name and line number.
"""


class ManifestError(ValueError):
    """Raised for malformed manifests, configs, or checkpoints."""


def parse_kv_lines(text: str, source: str = "<config>") -> dict:
    """Parse key=value lines into an ordered dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"{source}: line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ManifestError(f"{source}: line {lineno}: empty key")
        if key in out:
            raise ManifestError(f"{source}: line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv_lines(values: dict) -> str:
    """Serialize a flat dict, sorted by key, floats in full round-trip form."""
    lines = []
    for key in sorted(values):
        val = values[key]
        if isinstance(val, bool):
            rendered = "true" if val else "false"
        elif isinstance(val, float):
            rendered = repr(val)
        else:
            rendered = str(val)
        lines.append(f"{key}={rendered}")
    return "\n".join(lines) + "\n"


def _parse_bool(raw: str, key: str, source: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ManifestError(f"{source}: key {key}: expected boolean, got {raw!r}")


def resolve(defaults: dict, overrides: dict, source: str = "<config>") -> dict:
    """Merge string overrides onto typed defaults.

    Unknown keys are rejected; every override is coerced to the type of its
    default value.
    """
    out = dict(defaults)
    for key, raw in overrides.items():
        if key not in defaults:
            known = ", ".join(sorted(defaults))
            raise ManifestError(f"{source}: unknown key {key!r} (known: {known})")
        ref = defaults[key]
        try:
            if isinstance(ref, bool):
                out[key] = _parse_bool(raw, key, source)
            elif isinstance(ref, int):
                out[key] = int(raw)
            elif isinstance(ref, float):
                out[key] = float(raw)
            else:
                out[key] = raw
        except ValueError:
            raise ManifestError(
                f"{source}: key {key}: cannot parse {raw!r} as {type(ref).__name__}") from None
    return out


def load_config(path, defaults: dict) -> dict:
    with open(path) as fh:
        overrides = parse_kv_lines(fh.read(), source=str(path))
    return resolve(defaults, overrides, source=str(path))

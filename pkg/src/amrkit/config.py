"""Run configuration: dotted-key/value text files plus command-line overrides.

Format, one entry per line::

    # comment
    amr.max_level = 2
    amr.ref_ratio = 2
    particles.tile_size = 8 8

Later lines override earlier ones within a file; ``--key=value`` overrides
passed on the command line take precedence over every file entry.  Values
stay strings until a typed getter is called, so unknown keys survive a
round trip untouched.
"""

from __future__ import annotations


class Config:
    def __init__(self, entries=None):
        self._entries: dict[str, str] = dict(entries or {})

    @staticmethod
    def parse(text):
        cfg = Config()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            cfg._entries[key.strip()] = value.strip()
        return cfg

    @staticmethod
    def load(path, overrides=()):
        """Read a config file, then apply --key=value override strings."""
        with open(path, encoding="ascii") as f:
            cfg = Config.parse(f.read())
        cfg.apply_overrides(overrides)
        return cfg

    def apply_overrides(self, overrides):
        for item in overrides:
            opt = item[2:] if item.startswith("--") else item
            if "=" not in opt:
                raise ValueError(f"override must look like key=value, got {item!r}")
            key, value = opt.split("=", 1)
            self._entries[key.strip()] = value.strip()

    def __contains__(self, key):
        return key in self._entries

    def keys(self):
        return self._entries.keys()

    def get_str(self, key, default=None):
        return self._entries.get(key, default)

    def get_int(self, key, default=None):
        v = self._entries.get(key)
        return default if v is None else int(v)

    def get_float(self, key, default=None):
        v = self._entries.get(key)
        return default if v is None else float(v)

    def get_bool(self, key, default=None):
        v = self._entries.get(key)
        if v is None:
            return default
        lv = v.lower()
        if lv in ("1", "true", "yes", "on"):
            return True
        if lv in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: cannot read {v!r} as a boolean")

    def get_int_list(self, key, default=None):
        v = self._entries.get(key)
        if v is None:
            return default
        return [int(tok) for tok in v.replace(",", " ").split()]

    def get_float_list(self, key, default=None):
        v = self._entries.get(key)
        if v is None:
            return default
        return [float(tok) for tok in v.replace(",", " ").split()]

    def dump(self):
        return "".join(f"{k} = {v}\n" for k, v in sorted(self._entries.items()))

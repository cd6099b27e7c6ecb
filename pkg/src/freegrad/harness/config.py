"""Experiment configuration in a line-oriented ``section.key = value`` format.

Blank lines and lines starting with ``#`` are ignored. Values are booleans
(``true``/``false``), integers, floats, strings (bare, or double-quoted when
they would otherwise read as another type) or comma-separated lists of those.
A one-element list is written with a trailing comma (``seeds = 3,``).

Recognised keys::

    experiment.name        registered experiment (see ``freegrad list``)
    experiment.algorithm   algorithm selector inside the experiment (optional)
    experiment.seeds       list of integer seeds
    experiment.out_dir     output directory
    data.dataset           dataset selector (``mnist``, ``synthetic`` ...)
    data.root              dataset directory (must exist when given)
    data.train_subset      training examples to use
    data.test_subset       test examples to use
    data.batch_size        minibatch size
    train.epochs           passes over the training subset

Any other ``section.key`` is kept in :attr:`ExperimentConfig.options` and
handed to the experiment (``pc.inference_rate``, ``ar.weight_rate``,
``kalman.inner_steps`` ...).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from ..numcore import FreegradError

_KEY = re.compile(r"^([A-Za-z_][\w-]*)\.([A-Za-z_][\w-]*)$")
_INT = re.compile(r"^[+-]?\d+$")
_FLOAT = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$|^[+-]?(inf|nan)$")


class ConfigError(FreegradError, ValueError):
    """Malformed config text or an invalid configuration."""


def _parse_scalar(tok: str) -> Any:
    tok = tok.strip()
    if len(tok) >= 2 and tok[0] == tok[-1] == '"':
        return tok[1:-1]
    if tok in ("true", "false"):
        return tok == "true"
    if _INT.match(tok):
        return int(tok)
    if _FLOAT.match(tok):
        return float(tok)
    return tok


def _split_unquoted(text: str) -> list[str] | None:
    """Split on commas outside double quotes; None when there is no such comma."""
    parts, cur, quoted, found = [], [], False, False
    for ch in text:
        if ch == '"':
            quoted = not quoted
        if ch == "," and not quoted:
            parts.append("".join(cur))
            cur, found = [], True
        else:
            cur.append(ch)
    if quoted:
        raise ConfigError(f"unterminated quote in {text!r}")
    parts.append("".join(cur))
    return parts if found else None


def parse_value(text: str) -> Any:
    items = _split_unquoted(text.strip())
    if items is None:
        return _parse_scalar(text)
    if items[-1].strip() == "":
        items = items[:-1]
    return [_parse_scalar(t) for t in items]


def _render_scalar(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    if not isinstance(_parse_scalar(s), str) or s != s.strip() or "," in s or s.startswith("#") or s == "":
        if '"' in s:
            raise ConfigError(f"string value {s!r} cannot contain a double quote")
        return f'"{s}"'
    return s


def render_value(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        if not v:
            raise ConfigError("empty lists cannot be written")
        body = ", ".join(_render_scalar(x) for x in v)
        return body + "," if len(v) == 1 else body
    return _render_scalar(v)


@dataclass
class ExperimentConfig:
    name: str
    seeds: list[int] = field(default_factory=lambda: [0])
    algorithm: str = ""
    dataset: str = ""
    data_root: str = ""
    train_subset: int = 0  # 0 means "the experiment's default"
    test_subset: int = 0
    batch_size: int = 64
    epochs: int = 10
    out_dir: str = "runs"
    options: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def option(self, section: str, key: str, default: Any = None) -> Any:
        return self.options.get(section, {}).get(key, default)

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.options.get(name, {}))

    def with_overrides(self, **kw: Any) -> "ExperimentConfig":
        return replace(self, **kw)


_FIELDS = {
    ("experiment", "name"): "name",
    ("experiment", "algorithm"): "algorithm",
    ("experiment", "seeds"): "seeds",
    ("experiment", "out_dir"): "out_dir",
    ("data", "dataset"): "dataset",
    ("data", "root"): "data_root",
    ("data", "train_subset"): "train_subset",
    ("data", "test_subset"): "test_subset",
    ("data", "batch_size"): "batch_size",
    ("train", "epochs"): "epochs",
}


def parse_config(text: str, check_paths: bool = True) -> ExperimentConfig:
    values: dict[str, Any] = {}
    options: dict[str, dict[str, Any]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, raw = stripped.partition("=")
        m = _KEY.match(key.strip())
        if not m:
            raise ConfigError(f"line {lineno}: bad key {key.strip()!r}")
        section, name = m.groups()
        value = parse_value(raw)
        target = _FIELDS.get((section, name))
        if target is None:
            options.setdefault(section, {})[name] = value
        else:
            values[target] = value
    if "name" not in values:
        raise ConfigError("experiment.name is required")
    if "seeds" in values:
        seeds = values["seeds"] if isinstance(values["seeds"], list) else [values["seeds"]]
        if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("experiment.seeds must be integers")
        values["seeds"] = seeds
    for f in ("train_subset", "test_subset", "batch_size", "epochs"):
        if f in values and (not isinstance(values[f], int) or isinstance(values[f], bool)):
            raise ConfigError(f"{f} must be an integer")
    for f in ("name", "algorithm", "dataset", "data_root", "out_dir"):
        if f in values:
            values[f] = str(values[f])
    cfg = ExperimentConfig(options=options, **values)
    if check_paths and cfg.data_root and not Path(cfg.data_root).exists():
        raise ConfigError(f"data.root {cfg.data_root!r} does not exist")
    return cfg


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for (section, key), attr in _FIELDS.items():
        lines.append(f"{section}.{key} = {render_value(getattr(cfg, attr))}")
    for section in sorted(cfg.options):
        for key in sorted(cfg.options[section]):
            lines.append(f"{section}.{key} = {render_value(cfg.options[section][key])}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"))

"""Structured config files, `--set key=value` overrides and path resolution."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Iterable

import yaml

from .errors import ConfigError

PACKAGED = Path(__file__).parent / "configs"


def resolve_config_path(name: str | Path) -> Path:
    """A filesystem path, or the stem of a packaged config such as ``synth_tiny``."""
    p = Path(name)
    if p.exists():
        return p
    packaged = PACKAGED / f"{name}.yaml"
    if packaged.exists():
        return packaged
    raise ConfigError(f"config not found: {name}")


def load_config(name: str | Path) -> tuple[dict, Path]:
    path = resolve_config_path(name)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data, path


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars or lists.

    Integer path components index into lists (``model.modalities.0.scales=[1,5]``).
    """
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"empty override key in {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}") from exc
        node: Any = out
        for part in parts[:-1]:
            node = _child(node, part, create=True)
        _assign(node, parts[-1], value)
    return out


def _child(node: Any, part: str, create: bool) -> Any:
    if isinstance(node, list):
        try:
            return node[int(part)]
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"bad list index {part!r}") from exc
    if not isinstance(node, dict):
        raise ConfigError(f"cannot descend into {part!r}")
    if part not in node and create:
        node[part] = {}
    return node[part]


def _assign(node: Any, part: str, value: Any) -> None:
    if isinstance(node, list):
        try:
            node[int(part)] = value
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"bad list index {part!r}") from exc
    elif isinstance(node, dict):
        node[part] = value
    else:
        raise ConfigError(f"cannot set {part!r} on a scalar")


def resolve_data(data: dict, base_dir: Path) -> dict:
    """Normalize a ``data`` section into absolute file paths.

    ``dir`` supplies defaults for the dataset layout written by ``synth``;
    explicit ``rasters``/``species``/``po``/``pa`` entries win.
    """
    data = dict(data or {})
    root = data.get("dir")
    root_path = _abs(root, base_dir) if root is not None else None
    rasters = dict(data.get("rasters") or {})
    if root_path is not None:
        for key in ("coarse", "fine"):
            if key not in rasters and (root_path / f"{key}.grb").exists():
                rasters[key] = root_path / f"{key}.grb"
        for key, fname in (("species", "species.csv"), ("po", "po.csv"), ("pa", "pa.csv"), ("truth", "truth.json")):
            data.setdefault(key, root_path / fname)
    resolved = {"rasters": {k: str(_abs(v, base_dir)) for k, v in sorted(rasters.items())}}
    for key in ("species", "po", "pa", "truth"):
        if data.get(key) is not None:
            resolved[key] = str(_abs(data[key], base_dir))
    return resolved


def _abs(p: str | Path, base_dir: Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else (base_dir / p).resolve()


def require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"missing config section(s): {', '.join(missing)}")

"""Engine configuration: ``aixel.toml`` < ``AIXEL_*`` environment < explicit flags."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import UserError
from .fusion_index import IndexParams
from .search import RankWeights

CONFIG_FILE = "aixel.toml"
ENV_PREFIX = "AIXEL_"


@dataclass(frozen=True)
class EngineConfig:
    data_dir: str = ".aixel"
    index_metric: str = "cosine"
    index_max_degree: int = 16
    index_ef_construction: int = 128
    search_weights: str = "0.7,0.15,0.15"
    search_ef: int = 64
    selection_dedup_threshold: float = 0.95
    selection_seed: int = 0
    drift_window: int = 200
    drift_theta_up: float = 1.0
    drift_theta_down: float = 0.7
    gateway_backend: str = "mock"
    gateway_endpoint: str = ""
    workers: int = 4

    def __post_init__(self):
        self.index_params().validate()
        self.rank_weights()
        if self.search_ef < 1 or self.workers < 1:
            raise UserError("search_ef and workers must be positive")
        if not 0 <= self.selection_dedup_threshold <= 1:
            raise UserError("selection.dedup_threshold must lie in [0, 1]")
        if not self.drift_theta_up > self.drift_theta_down > 0:
            raise UserError("drift thresholds need theta_up > theta_down > 0")
        if self.gateway_backend not in ("mock", "http"):
            raise UserError(f"gateway.backend must be mock or http, got {self.gateway_backend!r}")

    @staticmethod
    def key_of(attr: str) -> str:
        """Dotted file key for a field: ``index_max_degree`` -> ``index.max_degree``."""
        head, _, rest = attr.partition("_")
        return f"{head}.{rest}" if head in ("index", "search", "selection", "drift", "gateway") and rest else attr

    def index_params(self) -> IndexParams:
        return IndexParams(self.index_metric, self.index_max_degree, self.index_ef_construction)

    def rank_weights(self) -> RankWeights:
        return RankWeights.parse(self.search_weights)

    def path(self, *parts: str) -> Path:
        return Path(self.data_dir).joinpath(*parts)

    def to_dict(self) -> dict:
        return {self.key_of(f.name): getattr(self, f.name) for f in fields(self)}


def _coerce(name: str, typ: type, raw: Any) -> Any:
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    try:
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, str):
            return typ(raw)
    except ValueError:
        pass
    raise UserError(f"config {EngineConfig.key_of(name)}: expected {typ.__name__}, got {raw!r}")


def _flatten(doc: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                overrides: Mapping[str, Any] | None = None) -> EngineConfig:
    """Layer the config file, then environment, then ``overrides`` (field name -> value, None skipped)."""
    env = os.environ if env is None else env
    types = {f.name: type(f.default) for f in fields(EngineConfig)}
    by_key = {EngineConfig.key_of(n): n for n in types}
    values: dict[str, Any] = {}

    p = Path(path) if path is not None else Path(env.get(ENV_PREFIX + "CONFIG", CONFIG_FILE))
    if p.exists():
        try:
            doc = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise UserError(f"{p}: {exc}") from None
        for k, v in _flatten(doc).items():
            if k not in by_key:
                raise UserError(f"{p}: unknown key {k!r}")
            values[by_key[k]] = _coerce(by_key[k], types[by_key[k]], v)
    elif path is not None:
        raise UserError(f"config file not found: {p}")

    for name, typ in types.items():
        raw = env.get(ENV_PREFIX + name.upper())
        if raw is not None:
            values[name] = _coerce(name, typ, raw)

    for name, v in (overrides or {}).items():
        if v is None:
            continue
        if name not in types:
            raise UserError(f"unknown config field {name!r}")
        values[name] = _coerce(name, types[name], v)
    return replace(EngineConfig(), **values) if values else EngineConfig()

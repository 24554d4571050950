"""Model configuration and the flat key/value config-file format.

Config files are plain text: one ``key = value`` pair per line, ``#``
starts a comment, blank lines are ignored.  Keys for the model section
match :class:`ModelConfig` field names exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Shape and behaviour of the miniature grouped-query transformer.

    ``exact_layer_prefix`` counts leading layers that always run exact
    attention regardless of any selection plan.  ``skew_temperature``
    divides pre-softmax attention scores: values below 1 concentrate
    attention mass, values above 1 flatten it.
    """

    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    vocab_size: int
    block_size: int
    exact_layer_prefix: int = 1
    skew_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_query_heads", "num_kv_heads",
                     "head_dim", "vocab_size", "block_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive count, got {getattr(self, name)}")
        if self.num_query_heads % self.num_kv_heads != 0:
            raise ConfigError(
                f"num_query_heads ({self.num_query_heads}) must be an integer "
                f"multiple of num_kv_heads ({self.num_kv_heads})")
        if not (1 <= self.exact_layer_prefix <= self.num_layers):
            raise ConfigError(
                f"exact_layer_prefix must lie in [1, num_layers], got {self.exact_layer_prefix}")
        if self.skew_temperature <= 0:
            raise ConfigError(f"skew_temperature must be positive, got {self.skew_temperature}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must leave room for the reserved mask token")

    @property
    def group_size(self) -> int:
        return self.num_query_heads // self.num_kv_heads

    @property
    def model_dim(self) -> int:
        return self.num_query_heads * self.head_dim

    @property
    def mask_token_id(self) -> int:
        # Highest vocab id is reserved for the mask token.
        return self.vocab_size - 1


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat key/value config file into a string mapping.

    Later occurrences of a key override earlier ones, so a base file can
    be extended by appending.
    """
    mapping: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        mapping[key] = value
    return mapping


def get_int(mapping: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in mapping:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return int(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} must be an integer, got {mapping[key]!r}") from exc


def get_float(mapping: dict[str, str], key: str, default: float | None = None) -> float:
    if key not in mapping:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return float(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} must be a number, got {mapping[key]!r}") from exc


def get_str(mapping: dict[str, str], key: str, default: str | None = None) -> str:
    if key not in mapping:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    return mapping[key]


def model_config_from_mapping(mapping: dict[str, str]) -> ModelConfig:
    """Build a ModelConfig from parsed config-file keys."""
    import dataclasses

    kwargs = {}
    for f in fields(ModelConfig):
        default = None if f.default is dataclasses.MISSING else f.default
        if f.type in ("float", float) or f.name == "skew_temperature":
            kwargs[f.name] = get_float(mapping, f.name, default)
        else:
            kwargs[f.name] = get_int(mapping, f.name, default)
    return ModelConfig(**kwargs)

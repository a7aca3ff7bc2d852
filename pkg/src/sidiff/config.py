"""Flat ``key=value`` run configuration.

Defaults follow the published Sports hyperparameters; desk-scale runs
override them from a config file or ``--set key=value`` flags.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable

from sidiff.errors import ConfigError
from sidiff.network import ModelConfig

STRATEGIES = ("ocn-ls", "ocn-lr", "ocn-ms", "ocn-mr", "ocn-stochastic", "random", "coherent-k")
TOKENIZERS = ("pse", "rq", "random")
DECODERS = ("cpd", "fixed")

ABLATIONS: dict[str, dict[str, Any]] = {
    "full": {},
    "pse-to-rq": {"tokenizer": "rq"},
    "pse-to-random": {"tokenizer": "random"},
    "no-ocn": {"strategy": "random"},
    "no-on-policy": {"strategy": "coherent-k", "coherent_k": 1},
    "no-cpd": {"decoder": "fixed"},
    "ocn-ls": {"strategy": "ocn-ls"},
    "ocn-lr": {"strategy": "ocn-lr"},
    "ocn-ms": {"strategy": "ocn-ms"},
    "ocn-mr": {"strategy": "ocn-mr"},
}


@dataclass(frozen=True)
class RunConfig:
    # model
    d_m: int = 256
    d_ff: int = 1024
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 4
    n: int = 4
    M: int = 256
    L_input: int = 50
    dropout: float = 0.1
    # tokenizer
    tokenizer: str = "pse"
    tok_iters: int = 10
    tok_seed: int = 0
    # noising
    strategy: str = "ocn-ls"
    schedule: str = ""  # comma-separated mask counts; empty means 1..n
    views: int = 0  # view count for the random strategy; 0 means n
    coherent_k: int = 1
    # optimization
    alpha: float = 0.1
    lr: float = 0.003
    weight_decay: float = 0.01
    warmup: int = 10000
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    # decoding / evaluation
    B_act: int = 128
    K: int = 10
    decoder: str = "cpd"
    order_seed: int = 0
    catalog_filter: bool = True
    # paths
    log_path: str = "data/interactions.tsv"
    log_format: str = "tsv"
    embeddings_path: str = "data/items.side"
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        if self.tokenizer not in TOKENIZERS:
            raise ConfigError(f"tokenizer must be one of {TOKENIZERS}, got {self.tokenizer!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.log_format not in ("tsv", "jsonl"):
            raise ConfigError(f"log_format must be tsv or jsonl, got {self.log_format!r}")
        for name in ("tok_iters", "coherent_k", "batch_size", "max_epochs", "patience", "B_act", "K", "warmup"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.views < 0:
            raise ConfigError(f"views must be >= 0, got {self.views}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        self.model_config()  # validates model fields
        from sidiff.noising import check_schedule

        check_schedule(self.mask_schedule, self.n)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{f.name: getattr(self, f.name) for f in fields(ModelConfig)})

    @property
    def mask_schedule(self) -> list[int]:
        if not self.schedule.strip():
            return list(range(1, self.n + 1))
        try:
            return [int(v) for v in self.schedule.split(",")]
        except ValueError:
            raise ConfigError(f"schedule must be comma-separated integers, got {self.schedule!r}") from None

    @property
    def random_views(self) -> int:
        return self.views or self.n

    @property
    def views_per_sample(self) -> int:
        if self.strategy == "random":
            return self.random_views
        if self.strategy == "coherent-k":
            return len(self.mask_schedule) * self.coherent_k
        return len(self.mask_schedule)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        return replace(self, **_coerce(overrides))

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(**_coerce(parse_pairs(text.splitlines())))

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "RunConfig":
        pairs = parse_pairs(Path(path).read_text(encoding="utf-8").splitlines())
        pairs.update(overrides or {})
        return cls(**_coerce(pairs))


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_pairs(lines: Iterable[str]) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(pairs: dict[str, str]) -> dict[str, Any]:
    types = {f.name: f.type for f in fields(RunConfig)}
    out: dict[str, Any] = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind == "bool":
                low = str(raw).lower()
                if low not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                out[key] = low in ("true", "1")
            elif kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            else:
                out[key] = str(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return out

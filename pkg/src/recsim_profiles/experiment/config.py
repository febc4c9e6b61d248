"""Experiment configuration: one versioned YAML/JSON file per experiment.

Relative paths are resolved against the config file's directory. API
credentials are never read from the file; the live backend takes the name
of an environment variable instead.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from ..errors import ConfigError
from ..profiles.types import GENERATORS, TASK_FAMILIES
from ..sampling import DEFAULT_MASKS, SamplerSpec
from ..seeds import digest_json
from ..tasks import ATTRIBUTES

CONFIG_VERSION = 1
DEFAULT_RUNS = 5
DEFAULT_HISTORY_GRID = (5, 10, 15, 20, 25)
SECRET_KEYS = {"api_key", "apikey", "token", "secret", "password"}


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # movielens | amazon | synthetic
    name: str = ""
    ratings: Optional[str] = None
    movies: Optional[str] = None
    reviews: Optional[str] = None
    metadata: Optional[str] = None
    strict: bool = True
    split_ratio: float = 0.8
    min_interactions: int = 2


@dataclass
class BackendSpec:
    kind: str = "scripted"  # live | scripted | replay
    model_id: str = "gpt-4o-mini"
    temperature: float = 0.1
    max_tokens: int = 1024
    max_in_flight: int = 1
    transport_attempts: int = 3
    parse_attempts: int = 3
    base_url: str = "https://api.openai.com"
    api_key_env: str = "OPENAI_API_KEY"
    # replay only
    cache_path: Optional[str] = None
    mode: str = "record"  # record | replay | strict
    inner: str = "live"  # backend behind the cache: live | scripted
    # scripted only
    scripted_table: Optional[str] = None
    responder: Optional[str] = "heuristic"  # heuristic | null


@dataclass
class GeneratorSpec:
    generators: list[str] = field(default_factory=lambda: ["apg4recsim"])
    history_window: int = 15
    n_init: int = 3
    delta: float = 0.5
    path_mode: str = "heuristic"
    perturb_mode: str = "negate"
    diversify: str = "seed"
    probes_per_step: int = 1
    skip_stage3: bool = False  # turns apg4recsim into semantic_merge
    failure_ceiling: float = 0.2


@dataclass
class TaskSpec:
    families: list[str] = field(default_factory=lambda: list(TASK_FAMILIES))
    discrimination_p: list[int] = field(default_factory=lambda: [1, 3, 5])
    candidates: int = 10
    rating_items: int = 10
    instances_per_user: int = 1
    max_users: Optional[int] = None
    sampler: dict = field(default_factory=lambda: {"kind": "uniform"})
    mask: list[str] = field(default_factory=lambda: list(ATTRIBUTES))
    jsd_mode: str = "per_group"
    popularity_mode: str = "count"
    strict_decisions: bool = False


@dataclass
class ProbeSpec:
    positions: list[int] = field(default_factory=lambda: list(range(1, 11)))
    popularity_strategies: list[dict] = field(
        default_factory=lambda: [
            {"kind": "uniform"},
            {"kind": "debias"},
            {"kind": "popularity_stratified", "stratum": "head"},
            {"kind": "popularity_stratified", "stratum": "tail"},
        ]
    )
    popularity_p: int = 3
    history_grid: list[int] = field(default_factory=lambda: list(DEFAULT_HISTORY_GRID))
    history_generators: list[str] = field(default_factory=lambda: ["recent_interaction", "apg4recsim"])
    history_p: int = 3
    attribute_masks: Optional[list[list[str]]] = None
    attribute_sampling: list[str] = field(default_factory=lambda: ["random", "debias"])


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backend: BackendSpec = field(default_factory=BackendSpec)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    probes: ProbeSpec = field(default_factory=ProbeSpec)
    runs: int = DEFAULT_RUNS
    seed: int = 0
    output_dir: str = "out"
    version: int = CONFIG_VERSION
    base_dir: str = "."

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.dataset.kind not in ("movielens", "amazon", "synthetic"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if not 0 < self.dataset.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.backend.kind not in ("live", "scripted", "replay"):
            raise ConfigError(f"unknown backend kind {self.backend.kind!r}")
        if self.backend.kind == "replay":
            if not self.backend.cache_path:
                raise ConfigError("replay backend needs cache_path")
            if self.backend.mode not in ("record", "replay", "strict"):
                raise ConfigError(f"unknown replay mode {self.backend.mode!r}")
        if self.backend.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        for g in self.generator.generators + self.probes.history_generators:
            if g not in GENERATORS:
                raise ConfigError(f"unknown generator {g!r}")
        for fam in self.task.families:
            if fam not in TASK_FAMILIES:
                raise ConfigError(f"unknown task family {fam!r}")
        c = self.task.candidates
        if any(not 0 < p < c for p in self.task.discrimination_p):
            raise ConfigError(f"discrimination P values must lie in (0, {c})")
        if not set(self.task.mask) <= set(ATTRIBUTES):
            raise ConfigError(f"unknown attributes in mask {self.task.mask}")
        if self.task.jsd_mode not in ("per_group", "global"):
            raise ConfigError("jsd_mode must be 'per_group' or 'global'")
        if not 0 <= self.generator.failure_ceiling <= 1:
            raise ConfigError("failure_ceiling must lie in [0, 1]")
        self.sampler_spec()
        self.strategy_specs()

    def check_paths(self) -> None:
        ds = self.dataset
        needed = {"movielens": ("ratings", "movies"), "amazon": ("reviews", "metadata")}.get(ds.kind, ())
        for key in needed:
            value = getattr(ds, key)
            if not value:
                raise ConfigError(f"dataset.{key} is required for kind {ds.kind!r}")
            if not self.resolve(value).exists():
                raise ConfigError(f"dataset.{key} not found: {self.resolve(value)}")
        if self.backend.scripted_table and not self.resolve(self.backend.scripted_table).exists():
            raise ConfigError(f"scripted table not found: {self.backend.scripted_table}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_path(self) -> Path:
        return self.resolve(self.output_dir)

    @property
    def dataset_name(self) -> str:
        return self.dataset.name or {"movielens": "ml-1m", "amazon": "amazon", "synthetic": "synthetic"}[self.dataset.kind]

    def sampler_spec(self) -> SamplerSpec:
        try:
            return SamplerSpec(**self.task.sampler)
        except TypeError as exc:
            raise ConfigError(f"bad task.sampler: {exc}") from None

    def strategy_specs(self) -> list[SamplerSpec]:
        try:
            return [SamplerSpec(**s) for s in self.probes.popularity_strategies]
        except TypeError as exc:
            raise ConfigError(f"bad probes.popularity_strategies: {exc}") from None

    def attribute_masks(self) -> list[frozenset[str]]:
        if self.probes.attribute_masks is None:
            return list(DEFAULT_MASKS)
        return [frozenset(m) for m in self.probes.attribute_masks]

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """Digest over everything that can change results.

        Output location and the cache plumbing (backend kind, replay mode,
        cache path, endpoint) are excluded, so a recorded run and its strict
        replay carry the same digest.
        """
        d = self.to_dict()
        d.pop("output_dir")
        for key in ("kind", "mode", "cache_path", "inner", "base_url", "api_key_env", "max_in_flight"):
            d["backend"].pop(key)
        return digest_json(d)[:16]

    def profile_digest(self) -> str:
        """Narrower digest for profile stores: dataset, model knobs, generator spec, seed."""
        d = self.to_dict()
        backend = {k: d["backend"][k] for k in ("model_id", "temperature", "max_tokens", "parse_attempts")}
        gen = dict(d["generator"])
        gen.pop("generators")
        gen.pop("failure_ceiling")
        return digest_json([d["dataset"], backend, gen, d["seed"]])[:16]

    def with_overrides(self, *, out: str | None = None, backend: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        if out is not None:
            cfg.output_dir = str(Path(out).resolve())
        if backend is not None:
            cfg.backend = replace(cfg.backend, kind=backend)
        if seed is not None:
            cfg.seed = int(seed)
        cfg.validate()
        return cfg


_SECTIONS = {
    "dataset": DatasetSpec,
    "backend": BackendSpec,
    "generator": GeneratorSpec,
    "task": TaskSpec,
    "probes": ProbeSpec,
}


def _reject_secrets(data: Any, where: str = "") -> None:
    if isinstance(data, dict):
        for k, v in data.items():
            if str(k).casefold() in SECRET_KEYS:
                raise ConfigError(f"credentials must come from the environment, not the config ({where}{k})")
            _reject_secrets(v, f"{where}{k}.")


def config_from_dict(data: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    _reject_secrets(data)
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            allowed = {f.name for f in fields(cls)}
            unknown = set(value or {}) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
            kwargs[key] = cls(**(value or {}))
        elif key in ("runs", "seed", "output_dir", "version"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return ExperimentConfig(**kwargs, base_dir=str(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    cfg = config_from_dict(data or {}, base_dir=path.resolve().parent)
    cfg.check_paths()
    return cfg

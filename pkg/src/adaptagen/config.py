"""Run configuration: YAML parsing, defaulting, and strict validation.

Unknown keys are errors (anti-typo), reported with their full key path.
A minimal config needs only ``dataset.root``; everything else defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .lora import SCALE_MODES
from .transform import TemperatureSpec


@dataclass
class DatasetSection:
    root: str = ""
    k: int = 16


@dataclass
class CaptionSection:
    backend: str = "mock"
    # Optional replacement templates: list of {template_id, perspective,
    # instruction_text} mappings. None keeps the shipped defaults.
    templates: list | None = None


@dataclass
class SelectSection:
    backend: str = "mock"


@dataclass
class LoraSection:
    backend: str = "mock"
    rank: int = 4
    alpha: float = 4.0
    scale_mode: str = "paper"
    target_selectors: list = field(
        default_factory=lambda: ["to_q", "to_k", "to_v", "to_out"]
    )
    learning_rate: float = 1e-4
    max_steps: int = 500
    log_interval: int = 10
    checkpoint_interval: int = 100


@dataclass
class TransformSection:
    backend: str = "mock"
    tau_base: float = 0.8
    delta_tau: float = 0.2
    disable_transform: bool = False
    disable_fusion: bool = False


@dataclass
class GenerateSection:
    backend: str = "mock"
    steps: int = 30
    guidance: float = 7.5
    lora_scale: float = 1.0
    size: list = field(default_factory=lambda: [512, 512])
    per_category_count: int = 16
    parallelism: int = 1


@dataclass
class EvaluateSection:
    features_backend: str = "mock"
    classifier_backend: str = "mock"
    clip_backend: str = "mock"
    splits: int = 10


@dataclass
class OutputSection:
    out_dir: str = "runs/latest"


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    caption: CaptionSection = field(default_factory=CaptionSection)
    select: SelectSection = field(default_factory=SelectSection)
    lora: LoraSection = field(default_factory=LoraSection)
    transform: TransformSection = field(default_factory=TransformSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def out_dir(self) -> Path:
        return Path(self.output.out_dir)


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "caption": CaptionSection,
    "select": SelectSection,
    "lora": LoraSection,
    "transform": TransformSection,
    "generate": GenerateSection,
    "evaluate": EvaluateSection,
    "output": OutputSection,
}

_SCALARS = {"seed"}


def _fill_section(section_name: str, section_type, data) -> object:
    if data is None:
        return section_type()
    if not isinstance(data, dict):
        raise ConfigError(f"section {section_name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(section_type)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key: {section_name}.{unknown[0]}")
    return section_type(**data)


def _parse(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_SECTION_TYPES) - _SCALARS)
    if unknown:
        raise ConfigError(f"unknown key: {unknown[0]}")

    kwargs = {}
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    for name, typ in _SECTION_TYPES.items():
        kwargs[name] = _fill_section(name, typ, raw.get(name))
    return RunConfig(**kwargs)


def _check_invariants(cfg: RunConfig) -> None:
    from .backends import registry  # deferred: registry imports backends

    if not cfg.dataset.root:
        raise ConfigError("dataset.root is required")
    if cfg.dataset.k < 1:
        raise ConfigError(f"dataset.k must be >= 1, got {cfg.dataset.k}")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {cfg.seed}")

    try:
        TemperatureSpec(tau_base=cfg.transform.tau_base, delta_tau=cfg.transform.delta_tau)
    except ValueError as exc:
        raise ConfigError(f"transform: {exc}") from exc

    if cfg.lora.rank < 1:
        raise ConfigError(f"lora.rank must be >= 1, got {cfg.lora.rank}")
    if cfg.lora.alpha <= 0:
        raise ConfigError(f"lora.alpha must be > 0, got {cfg.lora.alpha}")
    if cfg.lora.scale_mode not in SCALE_MODES:
        raise ConfigError(
            f"lora.scale_mode must be one of {list(SCALE_MODES)}, "
            f"got {cfg.lora.scale_mode!r}"
        )
    if cfg.lora.learning_rate <= 0:
        raise ConfigError("lora.learning_rate must be > 0")
    if cfg.lora.max_steps < 1:
        raise ConfigError("lora.max_steps must be >= 1")
    if not cfg.lora.target_selectors:
        raise ConfigError("lora.target_selectors must be non-empty")

    if cfg.generate.per_category_count < 1:
        raise ConfigError(
            f"generate.per_category_count must be >= 1, "
            f"got {cfg.generate.per_category_count}"
        )
    if cfg.generate.parallelism < 1:
        raise ConfigError("generate.parallelism must be >= 1")
    size = cfg.generate.size
    if (
        not isinstance(size, (list, tuple))
        or len(size) != 2
        or any(int(v) < 64 or int(v) % 2 for v in size)
    ):
        raise ConfigError(
            f"generate.size must be [width, height], even integers >= 64, got {size}"
        )
    cfg.generate.size = [int(size[0]), int(size[1])]
    if cfg.generate.steps < 1:
        raise ConfigError("generate.steps must be >= 1")
    if cfg.generate.guidance < 0:
        raise ConfigError("generate.guidance must be >= 0")
    if cfg.generate.lora_scale < 0:
        raise ConfigError("generate.lora_scale must be >= 0")

    if cfg.evaluate.splits < 1:
        raise ConfigError("evaluate.splits must be >= 1")

    for kind, key, name in (
        ("captioner", "caption.backend", cfg.caption.backend),
        ("embedder", "select.backend", cfg.select.backend),
        ("model", "lora.backend", cfg.lora.backend),
        ("paraphraser", "transform.backend", cfg.transform.backend),
        ("generator", "generate.backend", cfg.generate.backend),
        ("features", "evaluate.features_backend", cfg.evaluate.features_backend),
        ("classifier", "evaluate.classifier_backend", cfg.evaluate.classifier_backend),
        ("embedder", "evaluate.clip_backend", cfg.evaluate.clip_backend),
    ):
        if not registry.has(kind, name):
            raise ConfigError(
                f"unknown backend {name!r} for {key}; "
                f"registered {kind} backends: {registry.names(kind)}"
            )

    if cfg.caption.templates is not None:
        if not isinstance(cfg.caption.templates, list) or not cfg.caption.templates:
            raise ConfigError("caption.templates must be a non-empty list")
        for i, entry in enumerate(cfg.caption.templates):
            if not isinstance(entry, dict):
                raise ConfigError(f"caption.templates[{i}] must be a mapping")
            missing = {"template_id", "perspective", "instruction_text"} - set(entry)
            if missing:
                raise ConfigError(
                    f"caption.templates[{i}] missing keys: {sorted(missing)}"
                )


def validate_config(raw: str | dict) -> RunConfig:
    """Parse, default, and validate a config from YAML text or a dict."""
    if isinstance(raw, str):
        try:
            data = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
    else:
        data = raw
    if data is None:
        data = {}
    cfg = _parse(data)
    _check_invariants(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return validate_config(path.read_text(encoding="utf-8"))

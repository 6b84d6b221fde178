"""Run configuration: one JSON document, flat dotted-key overrides.

Every knob a command reads lives here with a default equal to the owning
module's default, so an empty config file (or none at all) reproduces the
stock behavior. Overrides arrive as "section.key=value" strings; values are
parsed as JSON with a fallback to the raw string, then coerced to the type
of the field they replace. Unknown keys are hard errors naming the full
dotted path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .diffusion import ModelConfig


@dataclass
class ModelSection:
    depth: int = 4
    dim: int = 128
    n_heads: int = 8
    n_classes: int = 4
    clip_len: int = 9
    image_size: int = 64
    rope_base: float = 100.0
    pe_factors: tuple = (1, 2)
    time_feat: int = 64


@dataclass
class CodecSection:
    patch: int = 8
    stride_t: int = 1
    seed: int = 0


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 3
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 1e-4
    cfg_drop: float = 0.1
    m_probs: tuple = (0.25, 0.4, 0.35)
    ckpt_every: int = 0
    log_every: int = 50


@dataclass
class SamplerSection:
    steps: int = 50
    cfg_scale: float = 2.0
    n_memories: int = 4
    iou_samples: int = 1000


@dataclass
class CurationSection:
    n_scenes: int = 4
    clips_per_scene: int = 2
    frames_per_clip: int = 33
    image_size: int = 64
    curation_per_clip: int = 8


@dataclass
class RetrievalSection:
    top_m: int = 4
    samples: int = 4096
    near: float = 0.1
    far: float = 20.0


@dataclass
class EvalSection:
    protocol: str = "cycle"
    generator: str = "model"
    scene: int = 0
    clip: int = 0
    cycle_length: int = 17
    history_frac: float = 0.6


_SECTIONS = {
    "model": ModelSection,
    "codec": CodecSection,
    "train": TrainSection,
    "sampler": SamplerSection,
    "curation": CurationSection,
    "retrieval": RetrievalSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str = "data/toy"
    out: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    codec: CodecSection = field(default_factory=CodecSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    curation: CurationSection = field(default_factory=CurationSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_model_config(self) -> ModelConfig:
        m, c = self.model, self.codec
        return ModelConfig(
            depth=m.depth, dim=m.dim, n_heads=m.n_heads, n_classes=m.n_classes,
            clip_len=m.clip_len, image_size=m.image_size, patch=c.patch,
            stride_t=c.stride_t, codec_seed=c.seed, rope_base=m.rope_base,
            pe_factors=tuple(m.pe_factors), time_feat=m.time_feat,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        """Cheap invariants; path existence is checked by each command."""
        if not (0 <= self.seed < 2**64):
            raise ValueError(f"seed must be an unsigned 64-bit value, got {self.seed}")
        self.to_model_config()  # model/codec cross-checks live in ModelConfig
        for key in ("train.steps", "train.batch_size", "sampler.steps",
                    "curation.n_scenes", "curation.clips_per_scene",
                    "curation.frames_per_clip", "retrieval.top_m",
                    "retrieval.samples", "eval.cycle_length"):
            if get_key(self, key) < 1:
                raise ValueError(f"config key {key} must be >= 1")
        if abs(sum(self.train.m_probs) - 1.0) > 1e-9:
            raise ValueError("train.m_probs must sum to 1")
        if not 0.0 < self.eval.history_frac < 1.0:
            raise ValueError("eval.history_frac must lie in (0, 1)")
        if self.eval.protocol not in ("cycle", "memory-init"):
            raise ValueError(f"unknown eval.protocol {self.eval.protocol!r}")
        if self.eval.generator not in ("model", "oracle"):
            raise ValueError(f"unknown eval.generator {self.eval.generator!r}")


def _field_map(obj) -> dict:
    return {f.name: f for f in fields(obj)}


def _coerce(key: str, value, current):
    """Fit a parsed override onto the field's existing type."""
    want = type(current)
    if want is bool:
        if isinstance(value, bool):
            return value
    elif want is int:
        if isinstance(value, bool):
            pass  # bool is an int subclass; reject it explicitly
        elif isinstance(value, int):
            return value
        elif isinstance(value, float) and value == int(value):
            return int(value)
    elif want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif want is str:
        if isinstance(value, str):
            return value
    elif want is tuple:
        if isinstance(value, (list, tuple)):
            return tuple(value)
    raise ValueError(
        f"config key {key}: expected {want.__name__}, got {value!r}"
    )


def get_key(cfg: RunConfig, key: str):
    obj = cfg
    for part in key.split("."):
        if not dataclasses.is_dataclass(obj) or part not in _field_map(obj):
            raise ValueError(f"unknown config key: {key}")
        obj = getattr(obj, part)
    return obj


def set_key(cfg: RunConfig, key: str, value) -> None:
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in _field_map(obj):
            raise ValueError(f"unknown config key: {key}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in _field_map(obj):
        raise ValueError(f"unknown config key: {key}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise ValueError(f"config key {key} is a section, not a value")
    setattr(obj, leaf, _coerce(key, value, current))


def parse_override(text: str):
    """Split one --set argument into (dotted key, parsed value)."""
    if "=" not in text:
        raise ValueError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ValueError(f"--set expects KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # unquoted strings (paths, names) pass through
    return key, value


def from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key} must be an object")
            for sub, sv in value.items():
                set_key(cfg, f"{key}.{sub}", sv)
        else:
            set_key(cfg, key, value)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"config file not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"config file {path} is not valid JSON: {e}") from e
    return from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")

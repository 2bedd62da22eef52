"""Run configuration: presets, JSON round-trip, validation and fingerprint."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .knowledge import KnowledgeBase
from .model import ModelConfig
from .reports import ReportGrammar
from .training import TrainConfig
from .world import WorldSpec, paper_world

CONFIG_FORMAT = "entalign-config/1"
PRESETS = ("desk", "paper")


@dataclass
class EvalConfig:
    split: str = "test"
    include_names: bool = True
    batch_size: int = 64

    def validate(self) -> None:
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.batch_size < 1:
            raise ValueError("evaluation batch size must be positive")


@dataclass
class RunConfig:
    """Everything a run depends on.

    ``kb_path`` and ``grammar_path`` are optional overrides; by default both
    are derived from the world spec.  ``out_dir`` only says where files go and
    is left out of the fingerprint.
    """
    world: WorldSpec = field(default_factory=WorldSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    n_samples: int = 2000
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    kb_path: str | None = None
    grammar_path: str | None = None
    out_dir: str = "runs/desk"
    preset: str = "desk"

    def __post_init__(self):
        self.fractions = tuple(self.fractions)

    def knowledge_base(self) -> KnowledgeBase:
        if self.kb_path:
            return KnowledgeBase.load(self.kb_path)
        return self.world.knowledge_base()

    def grammar(self, kb: KnowledgeBase | None = None) -> ReportGrammar:
        if self.grammar_path:
            return ReportGrammar.load(self.grammar_path)
        return ReportGrammar.for_knowledge_base(kb or self.knowledge_base())

    def validate(self) -> None:
        self.world.validate()
        self.model.validate()
        self.eval.validate()
        kb = self.knowledge_base()
        self.train.validate(kb.num_positions)
        if self.model.image_size != self.world.canvas:
            raise ValueError(f"model image size {self.model.image_size} differs from canvas "
                             f"{self.world.canvas}")
        if self.model.channels != self.world.channels:
            raise ValueError("model and world disagree on image channels")
        if len(kb.names) != len(self.world.entities):
            raise ValueError("knowledge base and world disagree on the entity list")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) or \
                abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must be three non-negative numbers summing to 1")

    def to_dict(self) -> dict:
        return {"format": CONFIG_FORMAT, **asdict(self)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        fmt = data.pop("format", CONFIG_FORMAT)
        if fmt != CONFIG_FORMAT:
            raise ValueError(f"unsupported config format {fmt!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        sub = {"world": WorldSpec, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
        for key, typ in sub.items():
            if key in data:
                data[key] = _build(typ, data[key])
        return cls(**data)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def portable_dict(self) -> dict:
        """Everything that shapes a run; the output location is left out."""
        data = self.to_dict()
        data.pop("out_dir")
        return data

    def fingerprint(self) -> str:
        data = self.portable_dict()
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(typ, value):
    if isinstance(value, typ):
        return value
    known = {f.name for f in fields(typ)}
    unknown = set(value) - known
    if unknown:
        raise ValueError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    return typ(**value)


def preset(name: str) -> RunConfig:
    """``desk``: minutes on one CPU core.  ``paper``: full-size model and optimizer settings."""
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(
            world=paper_world(),
            model=ModelConfig(image_size=224, channels=3, conv_channels=(32, 64, 128, 256), d=256,
                              d_text=768, layers=4, heads=4, ffn=1024),
            train=TrainConfig(negatives=7, lr=1e-4, warmup_lr=1e-5, warmup_epochs=5, epochs=60,
                              batch_size=32),
            n_samples=20000, out_dir="runs/paper", preset="paper")
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


def merge(base: RunConfig, overrides: dict) -> RunConfig:
    """Deep-merge a partial dict (as found in a config file) over ``base``."""
    data = base.to_dict()
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return RunConfig.from_dict(data)


def summary_lines(cfg: RunConfig) -> list[str]:
    kb = cfg.knowledge_base()
    m, t = cfg.model, cfg.train
    return [
        f"preset={cfg.preset} fingerprint={cfg.fingerprint()[:16]}",
        f"|Q|={kb.num_queries} |P|={kb.num_positions} M={t.negatives}",
        f"d={m.d} d'={m.d_text} layers={m.layers} heads={m.heads} stride={m.stride} grid={m.grid}x{m.grid}",
        f"lr={t.lr:g} warmup_lr={t.warmup_lr:g} warmup_epochs={t.warmup_epochs} epochs={t.epochs} "
        f"batch={t.batch_size}",
        f"alpha_loc={t.alpha_loc:g} alpha_cls={t.alpha_cls:g} loc_variant={t.loc_variant} "
        f"entity_translation={t.entity_translation}",
    ]

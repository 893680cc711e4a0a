"""Run configuration.

A run config is a JSON object with three sections. Every key is optional and
falls back to the defaults below; unknown keys are rejected.

``data``
    n_train (800), n_eval (200), seed (0), T (20), D (16),
    image_width / image_height (224), feature_width / feature_height (28),
    n_distractors (2), noise (0.1), goal_classes, cause_classes
    (the planted desk-scale classes, background excluded).
``train``
    batch_size (8), iterations_stage1 / iterations_stage2 (2000),
    lr_stage1 (0.001), lr_stage2 (0.0002), seed (0), fusion ("max"),
    mu_thing (3.0), mu_stuff (0.8), K (20), grid (7), dtype ("float32"),
    use_thing_graph / use_stuff_graph / use_spatial_gate (true).
``paths``
    data_dir ("data"), out_dir ("runs").
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .geometry import MU_STUFF, MU_THING
from .synthetic import DEFAULT_CAUSES, DEFAULT_GOALS, SceneSpec
from .temporal import FUSION_MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training stage needs, including the model layout."""

    stage: int = 1
    lr: float = 0.001
    batch_size: int = 8
    iterations: int = 2000
    seed: int = 0
    fusion: str = "max"
    mu_thing: float = MU_THING
    mu_stuff: float = MU_STUFF
    K: int = 20
    D: int = 16
    T: int = 20
    grid: int = 7
    goal_classes: tuple[str, ...] = DEFAULT_GOALS
    cause_classes: tuple[str, ...] = DEFAULT_CAUSES
    use_thing_graph: bool = True
    use_stuff_graph: bool = True
    use_spatial_gate: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.batch_size < 1 or self.iterations < 0 or self.K < 1 or self.grid < 1:
            raise ConfigError("batch_size, K and grid must be >= 1; iterations >= 0")

    @property
    def heads(self) -> dict[str, tuple[str, ...]]:
        out = {"goal": ("background",) + tuple(self.goal_classes)}
        if self.cause_classes:
            out["cause"] = ("background",) + tuple(self.cause_classes)
        return out

    def model_dict(self) -> dict:
        """Fields that fix parameter shapes and forward semantics."""
        keys = ("fusion", "mu_thing", "mu_stuff", "K", "D", "T", "grid", "goal_classes", "cause_classes",
                "use_thing_graph", "use_stuff_graph", "use_spatial_gate")
        return {k: _plain(getattr(self, k)) for k in keys}

    def to_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("goal_classes", "cause_classes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _check_type(section: str, key: str, value, default) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


@dataclass
class DataSection:
    n_train: int = 800
    n_eval: int = 200
    seed: int = 0
    T: int = 20
    D: int = 16
    image_width: int = 224
    image_height: int = 224
    feature_width: int = 28
    feature_height: int = 28
    n_distractors: int = 2
    noise: float = 0.1
    goal_classes: list[str] = field(default_factory=lambda: list(DEFAULT_GOALS))
    cause_classes: list[str] = field(default_factory=lambda: list(DEFAULT_CAUSES))


@dataclass
class TrainSection:
    batch_size: int = 8
    iterations_stage1: int = 2000
    iterations_stage2: int = 2000
    lr_stage1: float = 0.001
    lr_stage2: float = 0.0002
    seed: int = 0
    fusion: str = "max"
    mu_thing: float = MU_THING
    mu_stuff: float = MU_STUFF
    K: int = 20
    grid: int = 7
    dtype: str = "float32"
    use_thing_graph: bool = True
    use_stuff_graph: bool = True
    use_spatial_gate: bool = True


@dataclass
class PathSection:
    data_dir: str = "data"
    out_dir: str = "runs"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathSection = field(default_factory=PathSection)

    def scene_template(self) -> SceneSpec:
        d = self.data
        return SceneSpec(
            T=d.T, D=d.D, image_width=d.image_width, image_height=d.image_height,
            feature_width=d.feature_width, feature_height=d.feature_height,
            goal_classes=tuple(d.goal_classes), cause_classes=tuple(d.cause_classes),
            n_distractors=d.n_distractors, noise=d.noise,
            mu_thing=self.train.mu_thing, mu_stuff=self.train.mu_stuff,
        )

    def train_config(self, stage: int) -> TrainConfig:
        t, d = self.train, self.data
        return TrainConfig(
            stage=stage,
            lr=t.lr_stage1 if stage == 1 else t.lr_stage2,
            batch_size=t.batch_size,
            iterations=t.iterations_stage1 if stage == 1 else t.iterations_stage2,
            seed=t.seed, fusion=t.fusion, mu_thing=t.mu_thing, mu_stuff=t.mu_stuff, K=t.K,
            D=d.D, T=d.T, grid=t.grid,
            goal_classes=tuple(d.goal_classes), cause_classes=tuple(d.cause_classes),
            use_thing_graph=t.use_thing_graph, use_stuff_graph=t.use_stuff_graph,
            use_spatial_gate=t.use_spatial_gate, dtype=t.dtype,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"data": DataSection, "train": TrainSection, "paths": PathSection}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        built = {}
        for name, klass in sections.items():
            body = raw.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {sorted(bad)}")
            for key, value in body.items():
                _check_type(name, key, value, getattr(klass(), key))
            built[name] = klass(**body)
        cfg = cls(**built)
        cfg.train_config(1)  # validates the train section
        cfg.scene_template().validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
        return cls.from_dict(raw)

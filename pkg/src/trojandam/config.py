"""Declarative experiment configuration (TOML) with field-path validation."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import tomli

PRESETS = ("figure2-neurotoxin-k", "figure3-activation", "figure4-kernels", "table1-desk",
           "table11-adaptive", "table12-ncd-ablation")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n  " + "\n  ".join(self.problems))


@dataclass
class DataSection:
    kind: str = "synthetic"  # "synthetic" | "idx"
    classes: int = 10
    per_class: int = 500
    image_size: int = 8
    channels: int = 3
    noise: float = 0.25
    seed: int = 0
    test_fraction: float = 0.2
    alpha: float = 0.9
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class OODSection:
    kind: str = "synthetic"  # "synthetic" | "idx"
    classes: int = 10
    per_class: int = 60
    seed: int = 1000
    noise: float = 0.25
    label_offset: int = 100
    images: str = ""
    labels: str = ""


@dataclass
class ModelSection:
    widths: list = field(default_factory=lambda: [8, 16])


@dataclass
class RoundSection:
    total_clients: int = 100
    per_round: int = 10
    clip: str = "mean"
    clip_bound: float = 0.0


@dataclass
class TrainSection:
    lr: float = 0.05
    epochs: int = 2
    batch_size: int = 32
    weight_decay: float = 0.0


@dataclass
class AttackSection:
    enabled: bool = False
    algorithm: str = "sgd"
    trigger: str = "blended"  # pixel-pattern | blended | subpopulation | tact
    target: int = 3
    blend_alpha: float = 0.2
    stamp_size: int = 3
    source_class: int = 8
    subpopulation: list = field(default_factory=lambda: [1, 1])
    plr: float = 0.05
    poison_fraction: float = 0.5
    epochs: int = 2
    batch_size: int = 32
    start: int = 0
    end: int = 10 ** 9
    colluders: int = 1
    dba_parts: int = 1
    pgd_radius: float = 1.0
    neurotoxin_k: float = 50.0
    mask_per_step: bool = False
    scale: float = 1.0
    avoid_key_kernels: bool = False
    avoid_ratio: float = 0.15


@dataclass
class DefenseSection:
    name: str = "nodefense"  # nodefense | trojandam | multikrum | foolsgold
    clip: str = "mean"
    # trojandam
    flood_size: int = 200
    shadow_size: int = 60
    shadow_pool: int = 0
    ratio: float = 0.15
    prox_lambda: float = 0.8
    epochs: int = 2
    lr: float = 0.05
    batch_size: int = 64
    start_round: int = 0
    score_mode: str = "abs"
    # multikrum
    krum_f: int = 1
    krum_m: int = 0
    # foolsgold
    fg_floor: float = 0.01


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: Optional[int] = None
    rounds: int = 100
    eval_every: int = 1
    output: str = "runs"
    workers: int = 1
    data: DataSection = field(default_factory=DataSection)
    ood: OODSection = field(default_factory=OODSection)
    model: ModelSection = field(default_factory=ModelSection)
    fl: RoundSection = field(default_factory=RoundSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    study: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"defense.name": "trojandam"})``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(d)


_SECTIONS = {"data": DataSection, "ood": OODSection, "model": ModelSection, "fl": RoundSection,
             "train": TrainSection, "attack": AttackSection, "defense": DefenseSection}


def _fill(cls, raw: dict, path: str, problems: list):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{path}{key}: unknown field")
            continue
        default = getattr(cls(), key) if key not in _SECTIONS else None
        if isinstance(default, bool) and not isinstance(value, bool):
            problems.append(f"{path}{key}: expected a boolean")
            continue
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{path}{key}: expected a number")
                continue
            if isinstance(default, int) and not isinstance(value, int) and key != "end":
                problems.append(f"{path}{key}: expected an integer")
                continue
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    problems = []
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.pop(name, {})
        if not isinstance(sub, dict):
            problems.append(f"{name}: expected a table")
            sub = {}
        sections[name] = _fill(cls, sub, f"{name}.", problems)
    study = raw.pop("study", {})
    top = _fill(ExperimentConfig, raw, "", problems)
    cfg = dataclasses.replace(top, study=study, **sections)
    problems += validate(cfg, base_dir)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: ExperimentConfig, base_dir: Optional[Path] = None) -> list:
    p = []
    if cfg.seed is None:
        p.append("seed: required")
    if cfg.rounds < 1:
        p.append("rounds: must be >= 1")
    if cfg.eval_every < 1:
        p.append("eval_every: must be >= 1")
    d = cfg.data
    if d.kind not in ("synthetic", "idx"):
        p.append("data.kind: must be 'synthetic' or 'idx'")
    if d.kind == "synthetic" and (d.classes < 2 or d.per_class < 1):
        p.append("data.classes/per_class: degenerate synthetic dataset")
    if d.alpha <= 0:
        p.append("data.alpha: must be > 0")
    if not 0 < d.test_fraction < 1:
        p.append("data.test_fraction: must lie in (0, 1)")
    for sec, keys in (("data", ("images", "labels", "test_images", "test_labels")), ("ood", ("images", "labels"))):
        section = getattr(cfg, sec)
        if section.kind == "idx":
            for k in keys:
                val = getattr(section, k)
                if not val and k.startswith("test"):
                    continue
                path = Path(val) if base_dir is None else base_dir / val
                if not val or not path.exists():
                    p.append(f"{sec}.{k}: file not found: {val!r}")
    if cfg.ood.kind == "synthetic" and cfg.data.kind == "synthetic":
        main = set(range(cfg.data.classes))
        ood = set(range(cfg.ood.label_offset, cfg.ood.label_offset + cfg.ood.classes))
        if main & ood:
            p.append("ood.label_offset: OOD labels overlap the main-task label space")
    f = cfg.fl
    if not 1 <= f.per_round <= f.total_clients:
        p.append("fl.per_round: must lie in [1, total_clients]")
    if f.clip not in ("mean", "median", "fixed", "off"):
        p.append("fl.clip: must be mean|median|fixed|off")
    if cfg.train.lr < 0 or cfg.train.epochs < 1 or cfg.train.batch_size < 1:
        p.append("train: lr >= 0, epochs >= 1, batch_size >= 1 required")
    a = cfg.attack
    if a.enabled:
        if a.algorithm not in ("sgd", "pgd", "neurotoxin", "scaled"):
            p.append("attack.algorithm: must be sgd|pgd|neurotoxin|scaled")
        if a.trigger not in ("pixel-pattern", "blended", "subpopulation", "tact"):
            p.append("attack.trigger: must be pixel-pattern|blended|subpopulation|tact")
        if not 0 <= a.target < cfg.data.classes:
            p.append("attack.target: not in the main-task label space")
        if not 0 <= a.neurotoxin_k < 100:
            p.append("attack.neurotoxin_k: must lie in [0, 100)")
        if a.end <= a.start:
            p.append("attack.end: attack window is empty")
        if 2 * a.colluders > f.per_round:
            p.append("attack.colluders: more than half of the selected clients")
        if not 0 <= a.poison_fraction <= 1:
            p.append("attack.poison_fraction: must lie in [0, 1]")
    df = cfg.defense
    if df.name not in ("nodefense", "trojandam", "multikrum", "foolsgold"):
        p.append("defense.name: must be nodefense|trojandam|multikrum|foolsgold")
    if df.clip not in ("mean", "median", "fixed", "off"):
        p.append("defense.clip: must be mean|median|fixed|off")
    if not 0 < df.ratio <= 1:
        p.append("defense.ratio: must lie in (0, 1]")
    if df.prox_lambda < 0:
        p.append("defense.prox_lambda: must be >= 0")
    if df.score_mode not in ("abs", "signed"):
        p.append("defense.score_mode: must be abs|signed")
    return p


def load(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    return from_dict(raw, path.parent)


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    text = resources.files("trojandam.presets").joinpath(f"{name}.toml").read_text()
    return from_dict(tomli.loads(text))


def load_any(spec: str) -> ExperimentConfig:
    """A preset name or a path to a TOML file."""
    if spec in PRESETS:
        return load_preset(spec)
    return load(spec)

"""Run configuration: one JSON document covering data, model, training and evaluation.

Configs serialise canonically (sorted keys, two-space indent, trailing
newline) so that ``load -> save`` is byte-identical and the SHA-256 of that
text identifies a run.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class DatasetConfig:
    height: int = 32
    width: int = 32
    coils: int = 2
    R: int = 4
    acs: int = 4
    mask: str = "gro"
    noise_sd: float = 0.0
    n_samples: int = 200
    seed: int = 0
    normalize: bool = True


@dataclass
class ModelSection:
    levels: int = 3
    steps: int = 4
    hidden: int = 64
    s_max: float = 2.0
    cond_widths: list = field(default_factory=lambda: [32, 32, 32])
    unet_base: int = 32
    unet_depth: int = 2
    seed: int = 0


@dataclass
class TrainSection:
    pretrain_epochs: int = 10
    joint_epochs: int = 30
    batch_size: int = 8
    pretrain_lr: float = 3e-3
    joint_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    val_fraction: float = 0.1
    target_noise: float = 0.03  # phantoms are noiseless; jitter keeps the target density proper
    seed: int = 0


@dataclass
class EvalSection:
    n_posterior: int = 8
    map_iters: int = 500
    map_lr: float = 1e-4
    combine: str = "sense"
    gain_P: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    gain_trials: int = 200
    seed: int = 0


@dataclass
class AblationSection:
    nullspace_learning: bool = True
    data_consistency: bool = True
    skip_pretrain: bool = False


SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "ablation": AblationSection,
}


@dataclass
class RunConfig:
    preset: str = "desk"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        d, t = self.dataset, self.train
        for name in ("height", "width", "coils", "R", "acs", "n_samples"):
            if getattr(d, name) <= 0:
                raise ValueError(f"dataset.{name} must be positive")
        if d.noise_sd < 0:
            raise ValueError("dataset.noise_sd must be >= 0")
        for name in ("batch_size", "pretrain_lr", "joint_lr"):
            if getattr(t, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if t.pretrain_epochs < 0 or t.joint_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if t.target_noise < 0:
            raise ValueError("train.target_noise must be >= 0")
        if not 0 <= t.val_fraction < 1:
            raise ValueError("train.val_fraction must be in [0, 1)")
        if len(self.model.cond_widths) != self.model.levels:
            raise ValueError("model.cond_widths needs one entry per level")
        if self.eval.combine not in ("sense", "rss"):
            raise ValueError("eval.combine must be 'sense' or 'rss'")
        if self.eval.map_iters < 0:
            raise ValueError("eval.map_iters must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - {"preset", *SECTIONS}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {"preset": doc.get("preset", "desk")}
        base = preset(kwargs["preset"])
        for name, klass in SECTIONS.items():
            section = dict(asdict(getattr(base, name)))
            given = doc.get(name, {})
            allowed = {f.name for f in fields(klass)}
            bad = set(given) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            section.update(given)
            kwargs[name] = klass(**section)
        return cls(**kwargs)

    def dumps(self):
        return canonical_json(self.to_dict())

    def hash(self):
        return config_hash(self.to_dict())

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_config(self):
        from flownull.flow import ModelConfig

        m = self.model
        return ModelConfig(channels=2 * self.dataset.coils, height=self.dataset.height,
                           width=self.dataset.width, levels=m.levels, steps=m.steps,
                           hidden=m.hidden, s_max=m.s_max, cond_widths=list(m.cond_widths),
                           unet_base=m.unet_base, unet_depth=m.unet_depth, seed=m.seed)


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def config_hash(doc):
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:16]


def preset(name):
    """``desk`` runs on a laptop CPU; ``paper`` mirrors the published schedule."""
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(
            preset="paper",
            dataset=DatasetConfig(height=256, width=256, coils=8, R=4, acs=32, n_samples=10_000),
            model=ModelSection(levels=3, steps=20, hidden=128, cond_widths=[64, 64, 64],
                               unet_base=64, unet_depth=4),
            train=TrainSection(pretrain_epochs=50, joint_epochs=100, batch_size=16,
                               pretrain_lr=3e-3, joint_lr=5e-4, target_noise=0.0),
            eval=EvalSection(map_iters=5000, map_lr=1e-8),
        )
    raise ValueError(f"unknown preset {name!r}; expected 'desk' or 'paper'")

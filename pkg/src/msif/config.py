"""Run configuration: an INI document with fixed sections and typed keys.

Every key has a default; unknown sections or keys are rejected so that typos
cannot silently fall back to defaults. The resolved configuration is hashed
and the hash is embedded in every output file.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .influence import InfluenceConfig
from .models import Architecture
from .solvers import SolverConfig
from .trainer import TrainConfig


def _ints(text):
    text = str(text).strip()
    return tuple(int(t) for t in text.replace(",", " ").split()) if text else ()


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"
    num_classes: int = 8
    dim: int = 10
    class_means_seed: int = 1
    noise_sigma: float = 1.0
    mean_scale: float = 1.0
    pretrain_classes: str = "0,1,2,3"
    finetune_classes: str = "4,5,6,7"
    pretrain_per_class: int = 50
    finetune_per_class: int = 20
    test_per_class: int = 25
    sample_seed: int = 0
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    pretrain_limit: int = 0
    finetune_limit: int = 5000
    test_limit: int = 0


@dataclass(frozen=True)
class ModelSection:
    embed_dims: str = "8"
    activation: str = "tanh"
    pretrain_head: str = "linear"
    l2: float = 1e-2


@dataclass(frozen=True)
class StageSection:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 512
    max_steps: int = 2000
    grad_tol: float = 1e-4
    seed: int = 0
    check_every: int = 10


@dataclass(frozen=True)
class FinetuneSection(StageSection):
    mode: str = "fixed_W"
    proximal_alpha: float = 0.01


@dataclass(frozen=True)
class SolverSection:
    pretrain_damping: float = 1e-2
    finetune_damping: float = 1e-8
    cg_tol: float = 1e-6
    cg_max_iters: int = 200
    hessian_subsample: int = 0
    subsample_seed: int = 0


@dataclass(frozen=True)
class InfluenceSection:
    identity_hessian: bool = False
    aggregation: str = "sum"
    retrain_steps: int = 100
    epsilon: float = 1e-3
    jobs: int = 1


@dataclass(frozen=True)
class ScenarioSection:
    count: int = 0
    per_pair: bool = True
    top_fraction: float = 0.1
    seeds: str = "0,1,2,3,4"
    datasize_factor: int = 3


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "pretrain": StageSection,
    "finetune": FinetuneSection,
    "solver": SolverSection,
    "influence": InfluenceSection,
    "scenario": ScenarioSection,
}


def _coerce(kind, raw, where):
    try:
        if kind is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(str(raw).strip()) if kind is not str else str(raw).strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from exc


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: StageSection = field(default_factory=StageSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    solver: SolverSection = field(default_factory=SolverSection)
    influence: InfluenceSection = field(default_factory=InfluenceSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_mapping(cls, mapping, base=None):
        cfg = base or cls()
        updates = {}
        for section, values in mapping.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            current = getattr(cfg, section)
            kinds = {f.name: type(f.default) for f in fields(current)}
            changes = {}
            for key, raw in values.items():
                if key not in kinds:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                changes[key] = _coerce(kinds[key], raw, f"[{section}] {key}")
            updates[section] = replace(current, **changes)
        out = replace(cfg, **updates)
        out.validate()
        return out

    @classmethod
    def parse(cls, text, base=None):
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                           comment_prefixes=("#", ";"), inline_comment_prefixes=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config parse failure: {exc}") from exc
        if parser.defaults():
            raise ConfigError("keys outside a [section] are not allowed")
        return cls.from_mapping({s: dict(parser.items(s)) for s in parser.sections()}, base)

    @classmethod
    def load(cls, path, base=None):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text, base)

    @classmethod
    def preset(cls, name):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
        return cls.from_mapping(PRESETS[name])

    def override(self, **sections):
        return RunConfig.from_mapping(sections, self)

    def validate(self):
        d = self.dataset
        if d.source not in ("synthetic", "idx"):
            raise ConfigError("[dataset] source must be synthetic or idx")
        if not _ints(d.pretrain_classes) or not _ints(d.finetune_classes):
            raise ConfigError("[dataset] class lists must be non-empty")
        if self.finetune.mode not in ("fixed_W", "update_W"):
            raise ConfigError("[finetune] mode must be fixed_W or update_W")
        if self.influence.aggregation not in ("sum", "mean_abs"):
            raise ConfigError("[influence] aggregation must be sum or mean_abs")
        if not 0.0 <= self.scenario.top_fraction <= 1.0:
            raise ConfigError("[scenario] top_fraction must lie in [0, 1]")
        try:
            self.architecture(d.dim if d.source == "synthetic" else 1)
            self.train_config("pretrain")
            self.train_config("finetune")
            self.influence_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- rendering -------------------------------------------------------------

    def to_dict(self):
        return asdict(self)

    def digest(self):
        # worker count changes scheduling only, never results
        content = self.to_dict()
        del content["influence"]["jobs"]
        blob = json.dumps(content, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self):
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in asdict(getattr(self, name)).items():
                lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
            lines.append("")
        return "\n".join(lines)

    # -- typed views -------------------------------------------------------------

    @property
    def pretrain_classes(self):
        return _ints(self.dataset.pretrain_classes)

    @property
    def finetune_classes(self):
        return _ints(self.dataset.finetune_classes)

    @property
    def seeds(self):
        return _ints(self.scenario.seeds)

    def architecture(self, input_dim, finetune_classes=None):
        m = self.model
        return Architecture(
            input_dim=input_dim,
            embed_dims=_ints(m.embed_dims),
            num_pretrain_classes=len(self.pretrain_classes),
            num_finetune_classes=len(finetune_classes or self.finetune_classes),
            activation=m.activation,
            pretrain_head=m.pretrain_head,
            l2=m.l2,
        )

    def train_config(self, stage):
        s = getattr(self, stage)
        return TrainConfig(
            optimizer=s.optimizer, lr=s.lr, batch_size=s.batch_size, max_steps=s.max_steps,
            grad_tol=s.grad_tol, seed=s.seed, check_every=s.check_every,
            proximal_alpha=s.proximal_alpha if stage == "finetune" and s.mode == "update_W" else 0.0,
        )

    def influence_config(self, identity=None):
        s = self.solver
        sub = s.hessian_subsample or None
        pre = SolverConfig(s.pretrain_damping, s.cg_tol, s.cg_max_iters, sub, s.subsample_seed)
        fine = SolverConfig(s.finetune_damping, s.cg_tol, s.cg_max_iters, None, s.subsample_seed)
        return InfluenceConfig(pre, fine, self.finetune.proximal_alpha,
                               self.influence.identity_hessian if identity is None else identity)


_NEWTON = {"optimizer": "newton", "max_steps": "500", "grad_tol": "1e-9"}
_EXACT_SOLVER = {"pretrain_damping": "0", "finetune_damping": "0", "cg_tol": "1e-9",
                 "cg_max_iters": "4000"}

PRESETS = {
    # multinomial logistic pretraining (linear W, identity U): G is convex
    "convex": {
        "dataset": {"pretrain_per_class": "50", "finetune_per_class": "15", "test_per_class": "10"},
        "model": {"embed_dims": "4", "activation": "linear", "pretrain_head": "identity", "l2": "1e-2"},
        "pretrain": dict(_NEWTON),
        "finetune": dict(_NEWTON),
        "solver": dict(_EXACT_SOLVER),
        "influence": {"retrain_steps": "500"},
    },
    "convex-update": {
        "dataset": {"pretrain_per_class": "50", "finetune_per_class": "15", "test_per_class": "10"},
        "model": {"embed_dims": "4", "activation": "linear", "pretrain_head": "identity", "l2": "1e-2"},
        "pretrain": dict(_NEWTON),
        "finetune": dict(_NEWTON, mode="update_W", proximal_alpha="0.01"),
        "solver": dict(_EXACT_SOLVER),
        "influence": {"retrain_steps": "500"},
    },
    # one tanh hidden layer as the shared embedding: non-convex
    "mlp": {
        "dataset": {"pretrain_per_class": "50", "finetune_per_class": "20", "test_per_class": "25"},
        "model": {"embed_dims": "8", "activation": "tanh", "pretrain_head": "linear", "l2": "1e-2"},
        "pretrain": dict(_NEWTON, grad_tol="1e-8"),
        "finetune": dict(_NEWTON, grad_tol="1e-8"),
        "solver": dict(_EXACT_SOLVER, cg_tol="1e-8"),
        "influence": {"retrain_steps": "500"},
    },
    "mlp-update": {
        "dataset": {"pretrain_per_class": "50", "finetune_per_class": "20", "test_per_class": "25"},
        "model": {"embed_dims": "8", "activation": "tanh", "pretrain_head": "linear", "l2": "1e-2"},
        "pretrain": dict(_NEWTON, grad_tol="1e-8"),
        "finetune": dict(_NEWTON, grad_tol="1e-8", mode="update_W", proximal_alpha="0.01"),
        "solver": dict(_EXACT_SOLVER, cg_tol="1e-8"),
        "influence": {"retrain_steps": "500"},
    },
    # binary pretrain task; the similarity study finetunes on the same pair and on the other pair
    "mlp-similarity": {
        "dataset": {"num_classes": "4", "pretrain_classes": "0,1", "finetune_classes": "2,3",
                    "pretrain_per_class": "50", "finetune_per_class": "20", "test_per_class": "25"},
        "model": {"embed_dims": "8", "activation": "tanh", "pretrain_head": "linear", "l2": "1e-2"},
        "pretrain": dict(_NEWTON, grad_tol="1e-8"),
        "finetune": dict(_NEWTON, grad_tol="1e-8"),
        "solver": dict(_EXACT_SOLVER, cg_tol="1e-8"),
        "influence": {"retrain_steps": "500"},
    },
}

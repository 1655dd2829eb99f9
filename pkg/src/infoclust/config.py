"""Experiment configuration: transforms, loss terms, presets and JSON I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema

from infoclust.core import DEFAULT_LAMBDA

TRANSFORM_KINDS = ("geometric", "weak_geometric", "mixup", "vat", "ivat", "identity")
TERM_KINDS = ("mi_xy", "mi_yy", "kl_reg")
DATASETS = ("mnist", "cifar10", "svhn", "blobs")


@dataclass(frozen=True)
class TransformSpec:
    """Parameters of one input transformation ``T(X)``.

    Only the fields relevant to ``kind`` are read. ``xi=None`` means
    ``1e-6 * sqrt(input dimension)``.
    """

    kind: str
    crop_scale: tuple[float, float] = (0.6, 1.0)
    flip_p: float = 0.5
    brightness: float = 0.125
    contrast: float = 0.125
    margin: int = 2
    beta: float = 0.2
    epsilon: float = 2.5
    power_iterations: int = 1
    xi: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(float(v) for v in self.crop_scale))
        self.validate()

    def validate(self) -> None:
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "geometric":
            lo, hi = self.crop_scale
            if not 0 < lo <= hi <= 1:
                raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
            if not 0 <= self.flip_p <= 1:
                raise ValueError("flip_p must be a probability")
            if self.brightness < 0 or self.contrast < 0:
                raise ValueError("jitter ranges must be non-negative")
        elif self.kind == "weak_geometric":
            if self.margin < 0:
                raise ValueError("margin must be non-negative")
        elif self.kind == "mixup":
            if not self.beta > 0:
                raise ValueError("beta shape must be positive")
        elif self.kind in ("vat", "ivat"):
            if not math.isfinite(self.epsilon) or self.epsilon < 0:
                raise ValueError("epsilon must be finite and >= 0")
            if self.power_iterations < 1:
                raise ValueError("power_iterations must be >= 1")
            if self.xi is not None and not self.xi > 0:
                raise ValueError("xi must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        return d


@dataclass(frozen=True)
class TermSpec:
    """One loss term. ``transform`` is a chain of transform names applied in order."""

    term: str
    weight: float = 1.0
    transform: tuple[str, ...] = ()
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if isinstance(self.transform, str):
            object.__setattr__(self, "transform", (self.transform,))
        else:
            object.__setattr__(self, "transform", tuple(self.transform))
        if self.term not in TERM_KINDS:
            raise ValueError(f"unknown loss term {self.term!r}")
        if self.weight < 0:
            raise ValueError("term weights must be non-negative")
        if self.term == "mi_xy":
            if self.transform:
                raise ValueError("mi_xy takes no transform")
            if self.lam < 0:
                raise ValueError("lambda must be non-negative")
        elif not self.transform:
            raise ValueError(f"{self.term} needs a transform binding")

    @property
    def key(self) -> str:
        if self.term == "mi_xy":
            return "mi_xy"
        return f"{self.term}:{'>'.join(self.transform)}"

    def to_dict(self) -> dict:
        d = {"term": self.term, "weight": self.weight}
        if self.term == "mi_xy":
            d["lam"] = self.lam
        else:
            d["transform"] = list(self.transform)
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    terms: tuple[TermSpec, ...]
    transforms: dict[str, TransformSpec] = field(default_factory=dict)
    dataset: str = "mnist"
    n_classes: int = 10
    heads: tuple[int, ...] = (10,)
    seed: int = 0
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-4
    eval_every: int = 5
    conv_channels: tuple[int, ...] = (32, 64)
    hidden: int = 128
    symmetrize: bool = True
    detach_kl_target: bool = True
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        self.validate()

    def validate(self) -> None:
        if not self.terms:
            raise ValueError("config needs at least one loss term")
        keys = [t.key for t in self.terms]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate loss terms: {keys}")
        for t in self.terms:
            for name in t.transform:
                if name not in self.transforms:
                    raise ValueError(f"term {t.key} references undeclared transform {name!r}")
            kinds = [self.transforms[n].kind for n in t.transform]
            if "mixup" in kinds and len(kinds) > 1:
                raise ValueError("mixup cannot be chained with other transforms")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_classes not in self.heads:
            raise ValueError("at least one head must have n_classes clusters")
        if any(h < 2 for h in self.heads):
            raise ValueError("every head needs >= 2 clusters")
        if self.epochs < 0 or self.batch_size < 2 or self.lr <= 0 or self.eval_every < 1:
            raise ValueError("invalid optimisation settings")

    @property
    def term_keys(self) -> list[str]:
        return [t.key for t in self.terms]

    @property
    def bindings(self) -> list[tuple[str, ...]]:
        """Distinct transform chains referenced by the loss terms, in order."""
        seen: list[tuple[str, ...]] = []
        for t in self.terms:
            if t.transform and t.transform not in seen:
                seen.append(t.transform)
        return seen

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "n_classes": self.n_classes,
            "heads": list(self.heads),
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "eval_every": self.eval_every,
            "conv_channels": list(self.conv_channels),
            "hidden": self.hidden,
            "symmetrize": self.symmetrize,
            "detach_kl_target": self.detach_kl_target,
            "out_dir": self.out_dir,
            "transforms": {k: v.to_dict() for k, v in self.transforms.items()},
            "terms": [t.to_dict() for t in self.terms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        jsonschema.validate(d, CONFIG_SCHEMA)
        d = dict(d)
        transforms = {k: TransformSpec(**v) for k, v in d.pop("transforms", {}).items()}
        terms = tuple(TermSpec(**t) for t in d.pop("terms"))
        return cls(terms=terms, transforms=transforms, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


_TRANSFORM_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(TRANSFORM_KINDS)},
        "crop_scale": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "flip_p": {"type": "number", "minimum": 0, "maximum": 1},
        "brightness": {"type": "number", "minimum": 0},
        "contrast": {"type": "number", "minimum": 0},
        "margin": {"type": "integer", "minimum": 0},
        "beta": {"type": "number", "exclusiveMinimum": 0},
        "epsilon": {"type": "number", "minimum": 0},
        "power_iterations": {"type": "integer", "minimum": 1},
        "xi": {"type": ["number", "null"]},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "infoclust experiment",
    "type": "object",
    "required": ["name", "terms"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "dataset": {"enum": list(DATASETS)},
        "n_classes": {"type": "integer", "minimum": 2},
        "heads": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        "seed": {"type": "integer"},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 2},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "eval_every": {"type": "integer", "minimum": 1},
        "conv_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "hidden": {"type": "integer", "minimum": 1},
        "symmetrize": {"type": "boolean"},
        "detach_kl_target": {"type": "boolean"},
        "out_dir": {"type": "string"},
        "transforms": {"type": "object", "additionalProperties": _TRANSFORM_SCHEMA},
        "terms": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["term"],
                "additionalProperties": False,
                "properties": {
                    "term": {"enum": list(TERM_KINDS)},
                    "weight": {"type": "number", "minimum": 0},
                    "lam": {"type": "number", "minimum": 0},
                    "transform": {
                        "oneOf": [
                            {"type": "string"},
                            {"type": "array", "items": {"type": "string"}, "minItems": 1},
                        ]
                    },
                },
            },
        },
    },
}


# --- presets -----------------------------------------------------------------

# Digits lose their identity under horizontal flips.
_FLIP_P = {"mnist": 0.0, "svhn": 0.0, "blobs": 0.0, "cifar10": 0.5}
_EPSILON = {"mnist": 2.5, "svhn": 2.5, "cifar10": 2.5, "blobs": 1.0}
_SHAPE = {"mnist": 10, "svhn": 10, "cifar10": 10, "blobs": 3}
# 600 blob samples need many small steps to split all clusters within 50 epochs
_TRAINING = {"blobs": {"batch_size": 16, "lr": 1e-3, "epochs": 50}}
_OVERCLUSTER = {"mnist": 50, "svhn": 50, "cifar10": 70}


def default_transforms(dataset: str = "mnist") -> dict[str, TransformSpec]:
    flip = _FLIP_P.get(dataset, 0.0)
    eps = _EPSILON.get(dataset, 2.5)
    return {
        "geo": TransformSpec("geometric", flip_p=flip),
        "weak_geo": TransformSpec("weak_geometric", margin=2),
        "vat": TransformSpec("vat", epsilon=eps),
        "ivat": TransformSpec("ivat", epsilon=eps),
        "mixup": TransformSpec("mixup"),
    }


def _mi_yy(*names: str) -> list[TermSpec]:
    # several transforms for Y~ share one unit of weight
    return [TermSpec("mi_yy", 1.0 / len(names), (n,)) for n in names]


def _kl(*chains) -> list[TermSpec]:
    return [TermSpec("kl_reg", 1.0, c if isinstance(c, tuple) else (c,)) for c in chains]


MI_XY = [TermSpec("mi_xy", 1.0)]

# Loss/transform matrix of the full experiment table, rows (a)-(w).
ROWS: dict[str, list[TermSpec]] = {
    "a": _mi_yy("geo"),
    "b": _mi_yy("vat"),
    "c": _mi_yy("ivat"),
    "d": _mi_yy("mixup"),
    "e": _mi_yy("geo", "vat"),
    "f": _mi_yy("geo", "ivat"),
    "g": _mi_yy("geo", "mixup"),
    "h": _mi_yy("geo", "vat", "mixup"),
    "i": _mi_yy("geo", "ivat", "mixup"),
    "j": _mi_yy("geo") + _kl("vat"),
    "k": _mi_yy("geo") + _kl("mixup"),
    "l": _mi_yy("geo") + _kl("vat", "mixup"),
    "m": _mi_yy("geo") + _kl("ivat", "mixup"),
    "n": _mi_yy("geo") + _kl("vat", ("geo", "vat")),
    "o": MI_XY,
    "p": MI_XY + _kl("geo"),
    "q": MI_XY + _kl("vat"),
    "r": MI_XY + _kl("mixup"),
    "s": MI_XY + _kl("geo", "vat"),
    "t": MI_XY + _kl("geo", "mixup"),
    "u": MI_XY + _kl("vat", "mixup"),
    "v": MI_XY + _kl("geo", "vat", "mixup"),
    "w": MI_XY + _mi_yy("geo") + _kl("geo"),
    # weak-crop variants of (p) and (a)
    "p_weak": MI_XY + _kl("weak_geo"),
    "a_weak": _mi_yy("weak_geo"),
}

PRESETS = tuple(ROWS) + ("best_1h1o", "best_5h5o")


def preset(name: str, dataset: str = "mnist", **overrides) -> ExperimentConfig:
    """Config for a row of the experiment table, or one of the best-model layouts."""
    n_classes = overrides.pop("n_classes", _SHAPE.get(dataset, 10))
    if name in ROWS:
        terms = ROWS[name]
        heads = (n_classes,)
    elif name == "best_1h1o":
        terms = ROWS["w"]
        heads = (n_classes,)
    elif name == "best_5h5o":
        terms = ROWS["w"]
        over = _OVERCLUSTER.get(dataset, 5 * n_classes)
        heads = (n_classes,) * 5 + (over,) * 5
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")

    used = {n for t in terms for n in t.transform}
    transforms = {k: v for k, v in default_transforms(dataset).items() if k in used}
    transforms.update(overrides.pop("transforms", {}))
    cfg = dict(name=name, dataset=dataset, n_classes=n_classes, heads=heads, terms=tuple(terms), transforms=transforms)
    cfg.update(_TRAINING.get(dataset, {}))
    cfg.update(overrides)
    return ExperimentConfig(**cfg)

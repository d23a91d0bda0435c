"""One nested configuration tree for every stage, with dotted-key overrides.

Precedence: ``--set`` overrides > JSON file > dataclass defaults. Unknown keys
are rejected with the offending dotted path in the message.
"""

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .counterfactual import CFConfig
from .errors import InvalidArgument
from .evaluator import EvaluatorTrainConfig
from .introvae import IntroVAETrainConfig

DEFAULT_OUT = "xfake-out"
OUT_ENV = "XFAKE_OUT"


@dataclass
class DataConfig:
    n_classes: int = 4
    train_per_class: int = 200
    val_per_class: int = 50
    test_per_class: int = 50
    sim_per_class: int = 100
    # fraction of simulated chips that receive a content defect
    corrupted_fraction: float = 0.5
    template_seed: int = 0
    image_size: int = 40
    speckle_looks: float = 20.0
    background_level: float = 0.03
    body_level: float = 0.12
    psf_sigma: float = 0.8
    clutter_level: float = 0.12
    crop_size: int = 32
    log_transform: bool = True
    stretch_range: tuple = (0.8, 1.2)
    clutter_swap: float = 0.6
    scatterer_dropout: float = 0.5
    scatterer_shift: float = 3.0
    angle_jitter: float = 90.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidArgument("data.n_classes must be >= 2")
        for name in ("train_per_class", "val_per_class", "test_per_class", "sim_per_class"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"data.{name} must be >= 1")
        if not 0.0 <= self.corrupted_fraction <= 1.0:
            raise InvalidArgument("data.corrupted_fraction must lie in [0, 1]")
        if self.crop_size > self.image_size:
            raise InvalidArgument("data.crop_size exceeds data.image_size")
        self.stretch_range = tuple(float(v) for v in self.stretch_range)


@dataclass
class HarnessConfig:
    seeds: tuple = (0, 1, 2)
    classifier_epochs: int = 100
    classifier_batch: int = 25
    classifier_lr: float = 1e-3
    scorer: str = "eva_bbb_total_u"
    per_class: bool = True
    score_T: int = 25
    # corrupted chips used for the uncertainty-drop check
    n_explain_check: int = 50

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) < 1:
            raise InvalidArgument("harness.seeds must not be empty")
        if self.classifier_epochs < 1:
            raise InvalidArgument("harness.classifier_epochs must be >= 1")


def _evaluator_defaults():
    return EvaluatorTrainConfig()


def _introvae_defaults():
    return IntroVAETrainConfig(base_channels=16, epochs=40)


def _cf_defaults():
    return CFConfig()


@dataclass
class IOConfig:
    out: str = ""


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    evaluator: EvaluatorTrainConfig = field(default_factory=_evaluator_defaults)
    introvae: IntroVAETrainConfig = field(default_factory=_introvae_defaults)
    counterfactual: CFConfig = field(default_factory=_cf_defaults)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    io: IOConfig = field(default_factory=IOConfig)
    seed: int = 0

    def out_root(self):
        return Path(self.io.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)

    def to_json(self):
        return _plain(dataclasses.asdict(self))

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise InvalidArgument(f"{key}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise InvalidArgument(f"{key}: expected an integer, got {value!r}")
        try:
            f = float(value)
        except ValueError:
            raise InvalidArgument(f"{key}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise InvalidArgument(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if tp is float:
        if isinstance(value, bool):
            raise InvalidArgument(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise InvalidArgument(f"{key}: expected a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise InvalidArgument(f"{key}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise InvalidArgument(f"{key}: expected a list, got {value!r}")
        out = []
        for v in value:
            if isinstance(v, str):
                try:
                    v = json.loads(v)
                except json.JSONDecodeError:
                    pass
            out.append(v)
        return tuple(out)
    return value


def _build(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise InvalidArgument(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in doc.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields or not fields[key].init:
            raise InvalidArgument(f"unknown config key {path!r}")
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = value
        else:
            kwargs[key] = _coerce(value, tp, path)
    return kwargs


def _section(cls, default, doc, prefix):
    if doc is None:
        return default
    base = dataclasses.asdict(default)
    kwargs = _build(cls, doc, prefix)
    base.update(kwargs)
    try:
        return cls(**{k: v for k, v in base.items() if k in {f.name for f in dataclasses.fields(cls) if f.init}})
    except InvalidArgument as exc:
        raise InvalidArgument(f"{prefix}: {exc}") from None


SECTIONS = {
    "data": (DataConfig, DataConfig),
    "evaluator": (EvaluatorTrainConfig, _evaluator_defaults),
    "introvae": (IntroVAETrainConfig, _introvae_defaults),
    "counterfactual": (CFConfig, _cf_defaults),
    "harness": (HarnessConfig, HarnessConfig),
    "io": (IOConfig, IOConfig),
}


def config_from_dict(doc):
    doc = dict(doc or {})
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise InvalidArgument(f"unknown config key {sorted(unknown)[0]!r}")
    kwargs = {name: _section(cls, factory(), doc.get(name), name) for name, (cls, factory) in SECTIONS.items()}
    kwargs["seed"] = _coerce(doc.get("seed", 0), int, "seed")
    return RunConfig(**kwargs)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc, overrides):
    """Fold ``KEY=VALUE`` strings with dotted keys into a nested dict."""
    doc = json.loads(json.dumps(doc or {}))
    for item in overrides or ():
        if "=" not in item:
            raise InvalidArgument(f"override {item!r} is not KEY=VALUE")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            if p not in SECTIONS and node is doc:
                raise InvalidArgument(f"unknown config key {key!r}")
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidArgument(f"config key {key!r} does not name a section field")
        node[parts[-1]] = _parse_value(text)
    return doc


def load_config(path=None, overrides=(), seed=None, out=None):
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidArgument(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"config file {p} is not valid JSON: {exc}") from None
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc.setdefault("io", {})["out"] = str(out)
    return config_from_dict(doc)

"""Configuration tree: typed dataclasses, YAML round-trip, dotted-path overrides.

Unknown keys are rejected everywhere so config typos fail loudly instead of
silently training the wrong model.
"""

import dataclasses
import os
import typing
from dataclasses import dataclass, field

import yaml

DATA_ROOT_ENV = "PYRAMID_REID_DATA_ROOT"

# Wiring of the two-level fusion graph, recorded so runs are attributable to
# an exact topology (the fusion block follows this string literally).
FUSION_WIRING = (
    "t2=conv(lat2+up2(lat3)); o2=conv(t2+sc2(raw2)); "
    "t3=conv(lat3+maxpool2(o2)); o3=conv(t3+sc3(raw3))"
)


@dataclass
class BackboneConfig:
    variant: str = "resnet50"  # resnet50 | resnet101
    last_stride: int = 1
    pretrained_weights_path: str | None = None
    attention_after_stage2: bool = True

    def validate(self):
        if self.variant not in ("resnet50", "resnet101"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.last_stride not in (1, 2):
            raise ValueError("last_stride must be 1 or 2")


@dataclass
class FpbConfig:
    enabled: bool = True
    levels: int = 2
    inner_channels: int = 256
    out_channels: int = 1024
    parts: int = 3
    reduced_dim: int = 256
    attention_on_shallow_lateral: bool = True
    # Shortcut edges from the raw taps into the per-scale output nodes
    # (removing them is the "plain bidirectional fusion" ablation).
    shortcut_edges: bool = True
    # Group counts keeping the branch inside its parameter budget.
    fusion_groups: int = 32
    shortcut_groups: int = 8

    def validate(self):
        if self.levels != 2:
            raise ValueError("only the two-level pyramid is supported")
        if self.parts < 1:
            raise ValueError("parts must be >= 1")
        if self.inner_channels % 8 != 0:
            raise ValueError("inner_channels must be divisible by the attention reduction (8)")
        if self.inner_channels % self.fusion_groups != 0:
            raise ValueError("fusion_groups must divide inner_channels")


@dataclass
class SpectralPenaltyConfig:
    enabled: bool = True
    beta: float = 1e-6
    power_iters: int = 20
    iter_tolerance: float = 1e-6
    # Spatial size the two regularized maps are max-pooled to before
    # concatenation; None means "the deeper tap's own scale".
    pool_target_scale: tuple[int, int] | None = None

    def validate(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")


@dataclass
class LossConfig:
    alpha: float = 1.0
    margin: float = 0.3
    label_smoothing: float = 0.0

    def validate(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")


@dataclass
class AugmentConfig:
    flip: bool = True
    crop: bool = True
    erase: bool = True
    patch: bool = True
    flip_prob: float = 0.5
    crop_padding: int = 10
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    patch_prob: float = 0.5
    patch_pool_size: int = 50


@dataclass
class TrainConfig:
    epochs: int = 120
    identities_per_batch: int = 16
    instances_per_identity: int = 4
    base_lr: float = 3.5e-4
    warmup_start_lr: float = 3.5e-5
    warmup_epochs: int = 20
    decay_epochs: tuple[int, ...] = (60, 90)
    decay_factor: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    log_interval: int = 1
    checkpoint_interval: int = 20
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @property
    def batch_size(self) -> int:
        return self.identities_per_batch * self.instances_per_identity

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.identities_per_batch < 1 or self.instances_per_identity < 2:
            raise ValueError("need >= 1 identity per batch and >= 2 instances per identity")
        decays = tuple(self.decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if any(d >= self.epochs or d < 0 for d in decays):
            raise ValueError("decay_epochs must lie inside [0, epochs)")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must lie inside [0, epochs)")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")


@dataclass
class DataConfig:
    root: str | None = None
    input_size: tuple[int, int] = (384, 128)  # height, width
    pixel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    eval_batch_size: int = 32

    def resolve_root(self) -> str:
        root = self.root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ValueError(
                f"no dataset root configured (set data.root or ${DATA_ROOT_ENV})"
            )
        return root


@dataclass
class ToyConfig:
    num_identities: int = 20
    images_per_identity: int = 24
    image_size: tuple[int, int] = (384, 128)
    seed: int = 0
    cameras: int = 4
    train_identities: int | None = None  # None -> half of num_identities
    hue_jitter: float = 0.05
    translation: float = 0.08
    occlusion_prob: float = 0.25
    noise_sigma: float = 0.03


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fpb: FpbConfig = field(default_factory=FpbConfig)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    regularization: SpectralPenaltyConfig = field(default_factory=SpectralPenaltyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    def validate(self):
        self.model.backbone.validate()
        self.model.fpb.validate()
        self.loss.validate()
        self.regularization.validate()
        self.train.validate()


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(hint, value, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:  # Optional[...]
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin in (tuple, list):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{path}: expected a sequence, got {value!r}")
        args = typing.get_args(hint)
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            elem_types = [args[0]] * len(value)
        elif origin is tuple:
            if len(value) != len(args):
                raise ValueError(f"{path}: expected {len(args)} values, got {len(value)}")
            elem_types = args
        else:
            elem_types = [args[0]] * len(value)
        out = tuple(_coerce(t, v, path) for t, v in zip(elem_types, value))
        return out if origin is tuple else list(out)
    if dataclasses.is_dataclass(hint):
        return _from_dict(hint, value, path)
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
        raise ValueError(f"{path}: expected a boolean, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
            raise ValueError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        return float(value)
    if hint is str:
        return str(value)
    raise TypeError(f"{path}: unsupported config field type {hint}")


def _from_dict(cls, data, path=""):
    if not isinstance(data, dict):
        raise ValueError(f"{path or cls.__name__}: expected a mapping, got {data!r}")
    hints = _field_types(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(
            f"unknown config key(s) {sorted(unknown)} under '{path or 'top level'}'"
            f" (valid: {sorted(names)})"
        )
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], value, sub)
    return cls(**kwargs)


def config_to_dict(cfg) -> dict:
    def conv(node):
        if dataclasses.is_dataclass(node):
            return {f.name: conv(getattr(node, f.name)) for f in dataclasses.fields(node)}
        if isinstance(node, tuple):
            return [conv(v) for v in node]
        if isinstance(node, list):
            return [conv(v) for v in node]
        return node

    return conv(cfg)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data or {})


def load_config(path: str | None = None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def save_config(cfg: ExperimentConfig, path: str):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def apply_override(cfg: ExperimentConfig, spec: str) -> ExperimentConfig:
    """Apply one 'dotted.path=value' override in place; rejects unknown paths."""
    if "=" not in spec:
        raise ValueError(f"override {spec!r} is not of the form key=value")
    dotted, raw = spec.split("=", 1)
    parts = dotted.strip().split(".")
    node = cfg
    for seg in parts[:-1]:
        if not dataclasses.is_dataclass(node) or seg not in {f.name for f in dataclasses.fields(node)}:
            raise ValueError(f"unknown config path {dotted!r} (at segment {seg!r})")
        node = getattr(node, seg)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(node) or leaf not in {f.name for f in dataclasses.fields(node)}:
        raise ValueError(f"unknown config path {dotted!r} (at segment {leaf!r})")
    hint = _field_types(type(node))[leaf]
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    setattr(node, leaf, _coerce(hint, value, dotted))
    return cfg

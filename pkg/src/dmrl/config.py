"""Configuration objects, strict JSON loading and canonical hashing.

Every config is a (possibly nested) dataclass. ``from_dict`` fills defaults,
rejects unknown keys and reports *all* offending keys at once.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError


def _choice(*options: str) -> dict:
    return {"choices": options}


@dataclass
class DataConfig:
    num_subjects: int = 40
    m: int = 2
    height: int = 64
    width: int = 64
    n_classes: int = 5
    channels: int = 1
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    p_lesion: float = 0.6
    noise_sigma: float = 0.05
    bias_amplitude: float = 0.1
    bias_smoothness: float = 12.0
    zscore: bool = True
    generator_seed: int = 0

    def validate(self) -> None:
        errs = []
        if self.m < 2:
            errs.append(f"m: need at least 2 modalities, got {self.m}")
        if self.height < 32 or self.width < 32:
            errs.append(f"height/width: must be >= 32, got {self.height}x{self.width}")
        if self.n_classes < 3:
            errs.append(f"n_classes: must be >= 3, got {self.n_classes}")
        if self.num_subjects < 1:
            errs.append("num_subjects: must be positive")
        if self.channels < 1:
            errs.append("channels: must be positive")
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            errs.append(f"split_fractions: must be 3 nonnegative values summing to 1, got {list(fr)}")
        if not 0.0 <= self.p_lesion <= 1.0:
            errs.append("p_lesion: must lie in [0, 1]")
        if not 0.0 <= self.noise_sigma <= 0.3:
            errs.append("noise_sigma: must lie in [0, 0.3]")
        if self.bias_amplitude < 0 or self.bias_smoothness <= 0:
            errs.append("bias_amplitude must be >= 0 and bias_smoothness > 0")
        if errs:
            raise ConfigError("; ".join(errs))


@dataclass
class ModelConfig:
    """Architecture knobs. Defaults reproduce the published block strings."""

    in_channels: int = 1
    anat_channels: int = 4
    z_dim: int = 16
    n_experts: int = 4
    anat_widths: tuple[int, ...] = (32, 64, 128, 256)
    bottleneck_width: int = 256
    mod_widths: tuple[int, ...] = (16, 32, 64, 128, 128)
    dec_widths: tuple[int, ...] = (128, 64, 32, 16)
    spade_hidden: int = 32
    cond_sigmoid: bool = False

    def scaled(self, div: int) -> "ModelConfig":
        """Copy with every width divided by ``div`` (min 1)."""
        d = lambda ws: tuple(max(1, w // div) for w in ws)  # noqa: E731
        return dataclasses.replace(
            self,
            anat_widths=d(self.anat_widths),
            bottleneck_width=max(1, self.bottleneck_width // div),
            mod_widths=d(self.mod_widths),
            dec_widths=d(self.dec_widths),
            spade_hidden=max(1, self.spade_hidden // div),
        )


@dataclass
class LossWeights:
    lambda_c: float = 2.0
    lambda_l: float = 0.1
    lambda_s: float = 10.0
    lambda_z: float = 2.0
    alpha_s: float = 0.1
    alpha_z: float = 0.1

    def validate(self) -> None:
        errs = [
            f"{k}: must be >= 0"
            for k in ("lambda_c", "lambda_l", "lambda_s", "lambda_z")
            if getattr(self, k) < 0
        ]
        errs += [f"{k}: must lie in [0, 2]" for k in ("alpha_s", "alpha_z") if not 0 <= getattr(self, k) <= 2]
        if errs:
            raise ConfigError("; ".join(errs))


@dataclass
class TrainConfig:
    dataset: Optional[str] = None
    epochs: int = 50
    lr: float = 2e-4
    weight_decay: float = 1e-5
    batch_subjects: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = field(default="condconv", metadata=_choice("conv", "condconv"))
    variant: str = field(default="sim", metadata=_choice("sim", "na"))
    seed: int = 0
    eval_every: int = 10
    grad_clip: float = 5.0
    pool_size: int = 8
    exclude_diagonal: bool = False
    flip_prob: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        errs = []
        if self.batch_subjects < 2:
            errs.append(f"batch_subjects: must be >= 2, got {self.batch_subjects}")
        if self.epochs < 0:
            errs.append("epochs: must be >= 0")
        if self.eval_every < 1:
            errs.append("eval_every: must be >= 1")
        if self.pool_size < 1:
            errs.append("pool_size: must be >= 1")
        if errs:
            raise ConfigError("; ".join(errs))
        self.weights.validate()

    def effective_weights(self) -> LossWeights:
        """Loss weights after the variant rule (``na`` disables the similarity loss)."""
        if self.variant == "na":
            return dataclasses.replace(self.weights, lambda_s=0.0, lambda_z=0.0)
        return self.weights


@dataclass
class TaskConfig:
    """Downstream task specification plus its training schedule."""

    kind: str = field(default="segmentation", metadata=_choice("segmentation", "synthesis"))
    target_classes: Optional[tuple[int, ...]] = None
    target_modality: Optional[int] = None
    input_mode: str = field(default="fused", metadata=_choice("fused", "raw"))
    missing_fill: str = field(default="none", metadata=_choice("none", "zero", "average"))
    dataset: Optional[str] = None
    encoder: Optional[str] = None
    epochs: int = 30
    lr: float = 2e-4
    batch_size: int = 4
    modality_dropout: float = 0.3
    base_width: int = 16
    flip_prob: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        errs = []
        if self.input_mode == "fused" and self.missing_fill != "none":
            errs.append("missing_fill: fused input forbids a missing-fill strategy")
        if self.input_mode == "raw" and self.missing_fill == "none":
            errs.append("missing_fill: raw input needs 'zero' or 'average'")
        if not 0.0 <= self.modality_dropout < 1.0:
            errs.append("modality_dropout: must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            errs.append("batch_size must be >= 1 and epochs >= 0")
        if errs:
            raise ConfigError("; ".join(errs))


# --------------------------------------------------------------------------
# generic (de)serialisation


def _coerce(value: Any, tp: Any, path: str, errors: list[str]) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path, errors)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            errors.append(f"{path}: expected an object")
            return None
        return _from_dict(tp, value, f"{path}.", errors)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            errors.append(f"{path}: expected a list")
            return None
        elem = args[0] if args else Any
        if (len(args) == 2 and args[1] is Ellipsis) or len(args) == 1:
            return tuple(_coerce(v, elem, f"{path}[{i}]", errors) for i, v in enumerate(value))
        if len(value) != len(args):
            errors.append(f"{path}: expected {len(args)} values, got {len(value)}")
            return None
        return tuple(_coerce(v, a, f"{path}[{i}]", errors) for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            errors.append(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string")
        return value
    return value


def _from_dict(cls, data: dict, prefix: str, errors: list[str]):
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            errors.append(f"{prefix}{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        path = f"{prefix}{name}"
        tp = hints[name]
        sub_prefix = f"{path}."
        if dataclasses.is_dataclass(tp) and isinstance(data[name], dict):
            kwargs[name] = _from_dict(tp, data[name], sub_prefix, errors)
            continue
        val = _coerce(data[name], tp, path, errors)
        choices = f.metadata.get("choices")
        if choices and val not in choices:
            errors.append(f"{path}: must be one of {list(choices)}, got {val!r}")
        kwargs[name] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:  # pragma: no cover - guarded by the checks above
        errors.append(f"{prefix or cls.__name__}: {exc}")
        return None


def from_dict(cls, data: dict):
    """Build ``cls`` from a JSON object, applying defaults and strict checks."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    errors: list[str] = []
    obj = _from_dict(cls, data, "", errors)
    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))
    return obj


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    """sha256 over the canonical JSON of the defaults-applied document."""
    doc = to_dict(obj) if dataclasses.is_dataclass(obj) else obj
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def load_config(path: str | Path, cls=TrainConfig):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    cfg = from_dict(cls, data)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg

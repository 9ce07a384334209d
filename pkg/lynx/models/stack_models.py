from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import Field, model_validator

from ..config import settings
from ..exceptions import ConfigurationError
from .base import LynxModel
from .kernel_models import KernelConfig
from .lowrank_models import LoraPair
from .sparsity_models import CompensationGranularity, NMPattern, ScoreSpec


class LayerKind(str, Enum):
    Q = "Q"
    K = "K"
    V = "V"
    OUT = "Out"
    QKV = "QKV"
    UP = "Up"
    GATE = "Gate"
    DOWN = "Down"
    QKV_UP = "QKV-Up"
    OUT_DOWN = "Out-Down"


class Stream(str, Enum):
    IMAGE = "image"
    TEXT = "text"
    MIXED = "mixed"


class Preset(str, Enum):
    QWEN_LIKE = "qwen-like"      # double-stream, image branch only
    FLUX_LIKE = "flux-like"      # double-stream blocks then single-stream blocks
    ZIMAGE_LIKE = "zimage-like"  # single-stream


class LayerSpec(LynxModel):
    name: str = Field(..., min_length=1)
    kind: LayerKind
    d_in: int = Field(..., ge=1)
    d_out: int = Field(..., ge=1)
    stream: Stream
    block: int = Field(0, ge=0)
    single_stream: bool = False


class Layer(LynxModel):
    """A named linear layer with its frozen D_out x D_in weight"""
    spec: LayerSpec
    weight: np.ndarray

    @model_validator(mode="after")
    def _check_weight_shape(self):
        if self.weight.shape != (self.spec.d_out, self.spec.d_in):
            raise ValueError(f"{self.spec.name}: weight {self.weight.shape} does not match spec")
        return self

    @property
    def name(self) -> str:
        return self.spec.name


class StackConfig(LynxModel):
    preset: Preset = Preset.QWEN_LIKE
    depth: int = Field(6, ge=1)
    single_depth: Optional[int] = Field(None, ge=0)  # flux-like single-stream blocks; defaults to depth
    scale: int = Field(16, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @property
    def single_blocks(self) -> int:
        if self.preset != Preset.FLUX_LIKE:
            return 0
        return self.depth if self.single_depth is None else self.single_depth


class Stack(LynxModel):
    config: StackConfig
    layers: Tuple[Layer, ...]

    @property
    def names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    @property
    def d_model(self) -> int:
        return self.layers[0].spec.d_in

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ConfigurationError(f"unknown layer '{name}'")

    def resolve(self, name: str) -> Layer:
        """Exact name, or the first layer whose name ends with the given suffix"""
        for layer in self.layers:
            if layer.name == name:
                return layer
        for layer in self.layers:
            if layer.name.endswith("." + name):
                return layer
        raise ConfigurationError(f"no layer matches '{name}'")


class ExecMode(str, Enum):
    DENSE = "dense"
    WEIGHT_SPARSE = "weight-sparse"
    ACTIVATION_SPARSE = "activation-sparse"
    SKIP = "skip"


class LayerPolicy(LynxModel):
    """How one layer executes; skip always runs the dense path"""
    mode: ExecMode = ExecMode.DENSE
    granularity: CompensationGranularity = CompensationGranularity.PER_TENSOR
    score: Optional[ScoreSpec] = None
    lora: Optional[LoraPair] = None

    @model_validator(mode="after")
    def _check_mode_fields(self):
        if self.mode == ExecMode.WEIGHT_SPARSE and self.score is None:
            raise ValueError("weight-sparse layers need a ScoreSpec")
        if self.mode in (ExecMode.DENSE, ExecMode.SKIP) and self.lora is not None:
            raise ValueError(f"{self.mode.value} layers carry no LoRA branch")
        return self


class ExecPolicy(LynxModel):
    name: str = "policy"
    default: LayerPolicy = Field(default_factory=LayerPolicy)
    overrides: Dict[str, LayerPolicy] = Field(default_factory=dict)
    pattern: NMPattern = Field(default_factory=NMPattern)
    eps: float = Field(default_factory=lambda: settings.eps, gt=0.0)
    kernel: KernelConfig = Field(default_factory=KernelConfig)

    @model_validator(mode="before")
    @classmethod
    def _default_kernel_for_pattern(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("kernel") is None and data.get("pattern") is not None:
            pattern = data["pattern"]
            if not isinstance(pattern, NMPattern):
                pattern = NMPattern.model_validate(pattern)
            data = {**data, "kernel": KernelConfig.for_pattern(pattern)}
        return data

    def for_layer(self, name: str) -> LayerPolicy:
        return self.overrides.get(name, self.default)

    def check_layers(self, names: List[str]) -> None:
        unknown = sorted(set(self.overrides) - set(names))
        if unknown:
            raise ConfigurationError(f"policy '{self.name}' references unknown layers: {', '.join(unknown)}")

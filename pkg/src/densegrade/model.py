"""Densely connected convolutional networks (DenseNet-BC).

Topology: stem (7x7/2 conv, BN, ReLU, 3x3/2 max-pool), dense blocks separated
by transitions, final BN + ReLU, global average pool, linear head. Convs carry
no bias; the trainable set is conv kernels, BN gamma/beta and the head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


@dataclass
class DenseNetConfig:
    growth_rate: int = 32
    block_layout: tuple = (6, 12, 48, 32)
    bottleneck: bool = True
    compression: float = 0.5
    stem_channels: int = 64
    num_classes: int = 18
    input_resolution: tuple = (256, 256, 3)

    def __post_init__(self):
        self.block_layout = tuple(int(v) for v in self.block_layout)
        self.input_resolution = tuple(int(v) for v in self.input_resolution)

    def validate(self) -> None:
        if not self.block_layout:
            raise ValueError("block_layout must not be empty")
        if any(n < 0 for n in self.block_layout):
            raise ValueError(f"negative layer count in block_layout {self.block_layout}")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError(f"compression must lie in (0, 1], got {self.compression}")
        if self.growth_rate < 1 or self.stem_channels < 1 or self.num_classes < 1:
            raise ValueError("growth_rate, stem_channels and num_classes must be positive")
        if len(self.input_resolution) != 3 or min(self.input_resolution) < 1:
            raise ValueError(f"input_resolution must be (H, W, C), got {self.input_resolution}")
        for width in self.transition_widths():
            if width < 1:
                raise ValueError("compression leaves a transition with zero channels")

    def transition_widths(self) -> List[int]:
        widths = []
        ch = self.stem_channels
        for b, layers in enumerate(self.block_layout):
            ch += layers * self.growth_rate
            if b < len(self.block_layout) - 1:
                ch = int(math.floor(self.compression * ch))
                widths.append(ch)
        return widths

    def feature_width(self) -> int:
        """Channels entering the classification head."""
        ch = self.stem_channels
        for b, layers in enumerate(self.block_layout):
            ch += layers * self.growth_rate
            if b < len(self.block_layout) - 1:
                ch = int(math.floor(self.compression * ch))
        return ch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layout"] = list(self.block_layout)
        d["input_resolution"] = list(self.input_resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNetConfig":
        return cls(**d)


PRESETS = {
    "densenet201": dict(growth_rate=32, block_layout=(6, 12, 48, 32), bottleneck=True,
                        compression=0.5, stem_channels=64),
    "densenet121": dict(growth_rate=32, block_layout=(6, 12, 24, 16), bottleneck=True,
                        compression=0.5, stem_channels=64),
    "tiny": dict(growth_rate=8, block_layout=(2, 2), bottleneck=True,
                 compression=0.5, stem_channels=16),
}


def preset(name: str, num_classes: int = 18, input_resolution=(256, 256, 3)) -> DenseNetConfig:
    try:
        kw = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return DenseNetConfig(num_classes=num_classes, input_resolution=tuple(input_resolution), **kw)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class DenseLayerParams:
    norm1: BatchNormParams
    conv1: Tensor
    norm2: Optional[BatchNormParams] = None
    conv2: Optional[Tensor] = None

    @property
    def in_channels(self) -> int:
        return self.conv1.shape[1]

    @property
    def growth(self) -> int:
        return (self.conv2 if self.conv2 is not None else self.conv1).shape[0]


@dataclass
class TransitionParams:
    norm: BatchNormParams
    conv: Tensor


def run_bn(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    return F.batch_norm(x, p.gamma, p.beta, p.running_mean, p.running_var, training)


def dense_layer_forward(state: Tensor, layer: DenseLayerParams, training: bool = False,
                        taps: Optional[dict] = None, prefix: str = "") -> Tensor:
    """BN-ReLU-(1x1 conv to 4k, BN-ReLU)-3x3 conv; returns the k new channels."""
    if state.shape[1] != layer.in_channels:
        raise F.ShapeError(f"dense layer expects {layer.in_channels} input channels, got {state.shape[1]}")
    h = F.relu(run_bn(state, layer.norm1, training))
    if layer.conv2 is None:
        out = F.conv2d(h, layer.conv1, padding=1)
        last = prefix + "conv1"
    else:
        h = F.conv2d(h, layer.conv1)
        h = F.relu(run_bn(h, layer.norm2, training))
        out = F.conv2d(h, layer.conv2, padding=1)
        last = prefix + "conv2"
    if taps is not None:
        taps[last] = out
    return out


def dense_block_forward(x: Tensor, layers: List[DenseLayerParams], training: bool = False,
                        taps: Optional[dict] = None, prefix: str = "") -> Tensor:
    features = [x]
    for i, layer in enumerate(layers):
        state = F.concat_channels(features) if len(features) > 1 else features[0]
        features.append(dense_layer_forward(state, layer, training, taps, f"{prefix}layer{i + 1}."))
    if len(features) == 1:
        return x
    return F.concat_channels(features)


def transition_forward(x: Tensor, p: TransitionParams, training: bool = False) -> Tensor:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise F.ShapeError(f"transition needs even spatial size, got {x.shape[2]}x{x.shape[3]}")
    h = F.relu(run_bn(x, p.norm, training))
    h = F.conv2d(h, p.conv)
    return F.avg_pool2d(h, 2, 2)


class Model:
    """A realized DenseNet: named parameters, BN buffers and the forward graph."""

    def __init__(self, config: DenseNetConfig):
        config.validate()
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.training = False
        self.meta: dict = {}
        self.stem_conv: Tensor
        self.stem_norm: BatchNormParams
        self.blocks: List[List[DenseLayerParams]] = []
        self.transitions: List[TransitionParams] = []
        self.final_norm: BatchNormParams
        self.head_weight: Tensor
        self.head_bias: Tensor

    # structure -----------------------------------------------------------

    def _param(self, name, shape) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _bn(self, name, ch) -> BatchNormParams:
        gamma = self._param(f"{name}.gamma", (ch,))
        gamma.data[...] = 1.0
        beta = self._param(f"{name}.beta", (ch,))
        dt = get_default_dtype()
        rm = np.zeros(ch, dtype=dt)
        rv = np.ones(ch, dtype=dt)
        self.buffers[f"{name}.running_mean"] = rm
        self.buffers[f"{name}.running_var"] = rv
        return BatchNormParams(gamma, beta, rm, rv)

    def _allocate(self) -> None:
        cfg = self.config
        in_ch = cfg.input_resolution[2]
        k = cfg.growth_rate
        self.stem_conv = self._param("stem.conv.weight", (cfg.stem_channels, in_ch, 7, 7))
        self.stem_norm = self._bn("stem.norm", cfg.stem_channels)
        ch = cfg.stem_channels
        for b, n_layers in enumerate(cfg.block_layout, start=1):
            layers = []
            for i in range(1, n_layers + 1):
                p = f"block{b}.layer{i}"
                if cfg.bottleneck:
                    layers.append(DenseLayerParams(
                        norm1=self._bn(f"{p}.norm1", ch),
                        conv1=self._param(f"{p}.conv1.weight", (4 * k, ch, 1, 1)),
                        norm2=self._bn(f"{p}.norm2", 4 * k),
                        conv2=self._param(f"{p}.conv2.weight", (k, 4 * k, 3, 3)),
                    ))
                else:
                    layers.append(DenseLayerParams(
                        norm1=self._bn(f"{p}.norm1", ch),
                        conv1=self._param(f"{p}.conv1.weight", (k, ch, 3, 3)),
                    ))
                ch += k
            self.blocks.append(layers)
            if b < len(cfg.block_layout):
                out_ch = int(math.floor(cfg.compression * ch))
                self.transitions.append(TransitionParams(
                    norm=self._bn(f"transition{b}.norm", ch),
                    conv=self._param(f"transition{b}.conv.weight", (out_ch, ch, 1, 1)),
                ))
                ch = out_ch
        self.final_norm = self._bn("final_norm", ch)
        self.head_weight = self._param("head.weight", (ch, cfg.num_classes))
        self.head_bias = self._param("head.bias", (cfg.num_classes,))

    def initialize(self, seed: int) -> None:
        """He-normal (fan-in) kernels and head, unit gamma, zero beta and bias."""
        rng = np.random.default_rng(seed)
        for name, t in self.params.items():
            if name.endswith(".weight"):
                fan_in = t.shape[0] if name == "head.weight" else int(np.prod(t.shape[1:]))
                std = math.sqrt(2.0 / fan_in)
                t.data[...] = rng.standard_normal(t.shape) * std
            elif name.endswith(".gamma"):
                t.data[...] = 1.0
            else:
                t.data[...] = 0.0
        for name, buf in self.buffers.items():
            buf[...] = 1.0 if name.endswith("running_var") else 0.0

    # execution -----------------------------------------------------------

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def features(self, x: Tensor, taps: Optional[dict] = None) -> Tensor:
        """Everything up to (and including) the final BN + ReLU."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_resolution[2]:
            raise F.ShapeError(f"expected N x {cfg.input_resolution[2]} x H x W input, got {x.shape}")
        tr = self.training
        h = F.conv2d(x, self.stem_conv, stride=2, padding=3)
        if taps is not None:
            taps["stem.conv"] = h
        h = F.relu(run_bn(h, self.stem_norm, tr))
        h = F.max_pool2d(h, 3, 2, 1)
        for b, layers in enumerate(self.blocks):
            h = dense_block_forward(h, layers, tr, taps, f"block{b + 1}.")
            if taps is not None:
                taps[f"block{b + 1}"] = h
            if b < len(self.transitions):
                h = transition_forward(h, self.transitions[b], tr)
                if taps is not None:
                    taps[f"transition{b + 1}"] = h
        h = F.relu(run_bn(h, self.final_norm, tr))
        if taps is not None:
            taps["features"] = h
        return h

    def forward(self, x, taps: Optional[dict] = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=get_default_dtype()))
        pooled = F.global_avg_pool(self.features(x, taps))
        return F.linear(pooled, self.head_weight, self.head_bias)

    __call__ = forward

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def conv_layer_names(self) -> List[str]:
        return [n[: -len(".weight")] for n, t in self.params.items()
                if n.endswith(".weight") and t.ndim == 4]

    def last_conv_name(self) -> str:
        """Name of the 3x3 conv in the final dense layer of the last block."""
        cfg = self.config
        for b in range(len(cfg.block_layout), 0, -1):
            n = cfg.block_layout[b - 1]
            if n:
                return f"block{b}.layer{n}.{'conv2' if cfg.bottleneck else 'conv1'}"
        if self.transitions:
            return f"transition{len(self.transitions)}"
        return "stem.conv"

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """All parameters and buffers by name (parameters first, insertion order)."""
        out = {n: t.data for n, t in self.params.items()}
        out.update(self.buffers)
        return out

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: a.copy() for n, a in self.state_arrays().items()}

    def restore(self, snap: Dict[str, np.ndarray]) -> None:
        arrays = self.state_arrays()
        if set(arrays) != set(snap):
            raise ValueError("snapshot name set does not match the model")
        for n, a in arrays.items():
            a[...] = snap[n]


def build_model(config: DenseNetConfig, rng_seed: int = 0) -> Model:
    model = Model(config)
    model._allocate()
    model.initialize(rng_seed)
    return model


def count_trainable_params(model: Model, include_head: bool = True) -> int:
    total = 0
    for name, t in model.params.items():
        if not t.requires_grad:
            continue
        if not include_head and name.startswith("head."):
            continue
        total += t.size
    return total

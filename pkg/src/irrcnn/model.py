"""The classifier architecture: recurrent conv layers, inception-recurrent-
residual units, transition units, and the assembled network.

Layer vocabulary:
  - RCL: a convolution refined over discrete time steps. The feed-forward
    term conv_f(x) + b is computed once; each step adds a recurrent
    convolution of the previous step's activation. Weights are shared
    across steps, and `time_steps` counts the recurrent applications
    (t=2 means one feed-forward pass plus two refinements).
  - IRRU: three parallel branches over the same input — a 1x1 RCL, a 3x3
    RCL, and an average-pool followed by a 1x1 projection — concatenated
    on the channel axis back to the input width, added residually to the
    input, then batch-normalized. Shape in == shape out.
  - Transition: 1x1 projection to the next width, activation, overlapped
    max-pool (3x3 window, stride 2, valid), dropout. Halves the spatial
    extent via floor((n-3)/2)+1.

The assembled model is: stem (two 3x3 convs with batch norm and
activation, then one overlapped max-pool) -> for each block width:
transition into that width, then the block's IRRUs -> global average
pool -> dense -> softmax. Transitions sit at block entry so channel
counts line up: the stem's output width feeds the first transition, and
each block's IRRUs run at the width its transition produced.

Weight initialization is He fan-in scaled Gaussian, drawn from a stream
labeled with the parameter's name, so values depend only on (seed, name).
Biases start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .rng import fork_rng
from .tensor import Tensor

__all__ = [
    "RCLSpec",
    "IRRUSpec",
    "ModelConfig",
    "RCL",
    "IRRU",
    "Transition",
    "Model",
    "build_model",
    "model_forward",
]


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RCLSpec:
    kernel: int
    out_channels: int
    time_steps: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ConfigError(f"RCL kernel must be 1 or 3, got {self.kernel}")
        if self.out_channels < 1:
            raise ConfigError("RCL out_channels must be >= 1")
        if self.time_steps < 0:
            raise ConfigError("RCL time_steps must be >= 0")
        if self.activation not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class IRRUSpec:
    """One unit's widths. Branch widths default to the C/4, C/2, C/4 split
    (the 3x3 branch carries half the channels) and must sum to `width` so
    the residual add is shape-legal."""

    width: int
    c_1x1: Optional[int] = None
    c_rcl3x3: Optional[int] = None
    c_pool: Optional[int] = None
    time_steps: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.width < 4:
            raise ConfigError(f"IRRU width must be >= 4, got {self.width}")
        if self.c_1x1 is None or self.c_rcl3x3 is None or self.c_pool is None:
            if self.width % 4 != 0:
                raise ConfigError(
                    f"IRRU width {self.width} is not divisible by 4; "
                    "give explicit branch widths instead"
                )
            object.__setattr__(self, "c_1x1", self.width // 4)
            object.__setattr__(self, "c_pool", self.width // 4)
            object.__setattr__(self, "c_rcl3x3", self.width // 2)
        if min(self.c_1x1, self.c_rcl3x3, self.c_pool) < 1:
            raise ConfigError("IRRU branch widths must be positive")
        if self.c_1x1 + self.c_rcl3x3 + self.c_pool != self.width:
            raise ConfigError(
                f"IRRU branch widths {self.c_1x1}+{self.c_rcl3x3}+{self.c_pool} "
                f"do not sum to width {self.width}"
            )
        if self.time_steps < 0:
            raise ConfigError("IRRU time_steps must be >= 0")
        if self.activation not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    input_shape: Tuple[int, int, int] = (3, 128, 128)
    stem_widths: Tuple[int, int] = (32, 64)
    block_widths: Tuple[int, ...] = (128, 256, 512, 1024)
    irrus_per_block: int = 1
    time_steps: int = 2
    activation: str = "relu"
    dropout_p: float = 0.5
    classifier_hidden: Optional[int] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (channels, H, W), got {self.input_shape}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stem_widths", tuple(int(v) for v in self.stem_widths))
        object.__setattr__(self, "block_widths", tuple(int(v) for v in self.block_widths))
        if len(self.stem_widths) != 2 or min(self.stem_widths) < 1:
            raise ConfigError(f"stem_widths must be two positive widths, got {self.stem_widths}")
        if not self.block_widths:
            raise ConfigError("block_widths must name at least one block")
        for w in self.block_widths:
            if w % 4 != 0:
                raise ConfigError(
                    f"block width {w} is not divisible by 4 (branch-split rule)"
                )
        if self.irrus_per_block < 1:
            raise ConfigError("irrus_per_block must be >= 1")
        if self.time_steps < 0:
            raise ConfigError("time_steps must be >= 0")
        if self.activation not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.classifier_hidden is not None and self.classifier_hidden < 1:
            raise ConfigError("classifier_hidden must be positive when given")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _he_weight(seed: int, name: str, shape: Tuple[int, ...], fan_in: int, dtype) -> Tensor:
    rng = fork_rng(seed, "init/" + name)
    scale = np.sqrt(2.0 / fan_in)
    return Tensor((rng.normal(size=shape) * scale).astype(dtype), requires_grad=True)


def _zero_bias(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def _conv(seed: int, name: str, out_ch: int, in_ch: int, k: int, dtype, bias: bool = True,
          stride=1, padding="same") -> ops.ConvParams:
    w = _he_weight(seed, name + ".weight", (out_ch, in_ch, k, k), in_ch * k * k, dtype)
    b = _zero_bias(out_ch, dtype) if bias else None
    return ops.ConvParams(w, b, stride=stride, padding=padding)


def _conv_params_dict(prefix: str, p: ops.ConvParams) -> Dict[str, Tensor]:
    d = {prefix + ".weight": p.weight}
    if p.bias is not None:
        d[prefix + ".bias"] = p.bias
    return d


def _bn_params_dict(prefix: str, bn: ops.BatchNormParams) -> Dict[str, Tensor]:
    return {prefix + ".gamma": bn.gamma, prefix + ".beta": bn.beta}


def _bn_buffers_dict(prefix: str, bn: ops.BatchNormParams) -> Dict[str, np.ndarray]:
    return {prefix + ".running_mean": bn.running_mean, prefix + ".running_var": bn.running_var}


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class RCL:
    """Recurrent conv layer: h(0) = act(conv_f(x) + b), then
    h(s) = act(conv_f(x) + b + conv_r(h(s-1))) for s = 1..time_steps."""

    def __init__(self, in_channels: int, spec: RCLSpec, seed: int, name: str, dtype=np.float32):
        self.spec = spec
        self.name = name
        k, out = spec.kernel, spec.out_channels
        self.conv_f = _conv(seed, name + ".conv_f", out, in_channels, k, dtype)
        self.conv_r = _conv(seed, name + ".conv_r", out, out, k, dtype, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.conv_f.weight.shape[1]:
            raise ShapeError(
                f"{self.name}: input has {x.shape[1]} channels on axis 1 but "
                f"the layer expects {self.conv_f.weight.shape[1]}"
            )
        z = ops.conv2d(x, self.conv_f)
        h = ops.activation(z, self.spec.activation)
        for _ in range(self.spec.time_steps):
            h = ops.activation(z + ops.conv2d(h, self.conv_r), self.spec.activation)
        return h

    def parameters(self) -> Dict[str, Tensor]:
        return {**_conv_params_dict(self.name + ".conv_f", self.conv_f),
                **_conv_params_dict(self.name + ".conv_r", self.conv_r)}


class IRRU:
    """Inception-recurrent-residual unit; output shape equals input shape."""

    def __init__(self, spec: IRRUSpec, seed: int, name: str = "irru", dtype=np.float32):
        self.spec = spec
        self.name = name
        c = spec.width
        rcl_kw = dict(time_steps=spec.time_steps, activation=spec.activation)
        self.rcl_1x1 = RCL(c, RCLSpec(1, spec.c_1x1, **rcl_kw), seed, name + ".rcl_1x1", dtype)
        self.rcl_3x3 = RCL(c, RCLSpec(3, spec.c_rcl3x3, **rcl_kw), seed, name + ".rcl_3x3", dtype)
        # no bias: the unit's batch norm removes any constant channel shift,
        # so a bias here would be a dead parameter (exactly zero gradient)
        self.pool_proj = _conv(seed, name + ".pool_proj", spec.c_pool, c, 1, dtype, bias=False)
        self.bn = ops.BatchNormParams(c, dtype=dtype)

    def forward(self, x: Tensor, mode: Optional[str] = None) -> Tensor:
        if x.shape[1] != self.spec.width:
            raise ShapeError(
                f"{self.name}: input has {x.shape[1]} channels on axis 1 but "
                f"the unit is built for width {self.spec.width}"
            )
        b1 = self.rcl_1x1.forward(x)
        b3 = self.rcl_3x3.forward(x)
        bp = ops.conv2d(ops.pool2d(x, "avg", window=3, stride=1, padding="same"), self.pool_proj)
        f = ops.concat_channels([b1, b3, bp])
        if mode is not None:
            self.bn.mode = mode
        return ops.batch_norm(ops.residual_add(x, f), self.bn)

    def parameters(self) -> Dict[str, Tensor]:
        return {
            **self.rcl_1x1.parameters(),
            **self.rcl_3x3.parameters(),
            **_conv_params_dict(self.name + ".pool_proj", self.pool_proj),
            **_bn_params_dict(self.name + ".bn", self.bn),
        }

    def buffers(self) -> Dict[str, np.ndarray]:
        return _bn_buffers_dict(self.name + ".bn", self.bn)

    def batch_norms(self) -> List[ops.BatchNormParams]:
        return [self.bn]


class Transition:
    """Channel projection, activation, overlapped max-pool, dropout."""

    def __init__(self, in_channels: int, out_channels: int, activation: str, dropout_p: float,
                 seed: int, name: str = "transition", dtype=np.float32):
        self.name = name
        self.activation = activation
        self.dropout_p = float(dropout_p)
        self.proj = _conv(seed, name + ".proj", out_channels, in_channels, 1, dtype)

    def forward(self, x: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        if min(x.shape[2], x.shape[3]) < 3:
            raise ShapeError(
                f"{self.name}: spatial extent {x.shape[2]}x{x.shape[3]} is too small "
                "for the 3x3 stride-2 pooling window"
            )
        h = ops.activation(ops.conv2d(x, self.proj), self.activation)
        h = ops.pool2d(h, "max", window=3, stride=2, padding="valid")
        return ops.dropout(h, self.dropout_p, mode, rng)

    def parameters(self) -> Dict[str, Tensor]:
        return _conv_params_dict(self.name + ".proj", self.proj)


# ---------------------------------------------------------------------------
# the assembled network
# ---------------------------------------------------------------------------


def _halve(n: int) -> int:
    return (n - 3) // 2 + 1


class Model:
    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.dtype = dtype
        c_in, h, w = config.input_shape
        act = config.activation

        self.spatial_trace = self._trace_extents(config)

        s1, s2 = config.stem_widths
        # stem convs feed batch norm directly, so they carry no bias
        self.stem_conv1 = _conv(seed, "stem.conv1", s1, c_in, 3, dtype, bias=False)
        self.stem_bn1 = ops.BatchNormParams(s1, dtype=dtype)
        self.stem_conv2 = _conv(seed, "stem.conv2", s2, s1, 3, dtype, bias=False)
        self.stem_bn2 = ops.BatchNormParams(s2, dtype=dtype)

        self.transitions: List[Transition] = []
        self.blocks: List[List[IRRU]] = []
        prev = s2
        for bi, width in enumerate(config.block_widths):
            self.transitions.append(
                Transition(prev, width, act, config.dropout_p, seed,
                           name=f"block{bi}.transition", dtype=dtype)
            )
            units = []
            for ui in range(config.irrus_per_block):
                spec = IRRUSpec(width=width, time_steps=config.time_steps, activation=act)
                units.append(IRRU(spec, seed, name=f"block{bi}.irru{ui}", dtype=dtype))
            self.blocks.append(units)
            prev = width

        feat = prev
        if config.classifier_hidden is not None:
            hid = config.classifier_hidden
            self.hidden_w = _he_weight(seed, "head.hidden.weight", (feat, hid), feat, dtype)
            self.hidden_b = _zero_bias(hid, dtype)
            feat = hid
        else:
            self.hidden_w = self.hidden_b = None
        self.head_w = _he_weight(seed, "head.out.weight", (feat, config.num_classes), feat, dtype)
        self.head_b = _zero_bias(config.num_classes, dtype)

        self.trainable_count = sum(int(t.data.size) for t in self.parameters().values())
        self.total_count = self.trainable_count + sum(int(b.size) for b in self.buffers().values())

    @staticmethod
    def _trace_extents(config: ModelConfig) -> List[int]:
        """Spatial extents after the input, the stem pool, and each transition.
        Raises naming the first stage whose input is too small to pool."""
        _, h, w = config.input_shape
        if h != w:
            raise ConfigError(f"input must be square, got {h}x{w}")
        trace = [h]
        if h < 3:
            raise ShapeError(f"stem pool: input extent {h} is smaller than the 3x3 window")
        n = _halve(h)
        trace.append(n)
        for bi in range(len(config.block_widths)):
            if n < 3:
                raise ShapeError(
                    f"block{bi}.transition: spatial extent {n} is too small "
                    "for the 3x3 stride-2 pooling window; reduce depth or enlarge the input"
                )
            n = _halve(n)
            trace.append(n)
        return trace

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        """Class probabilities for a (batch, C, H, W) input.

        Train mode uses batch statistics, updates running averages, and
        applies dropout (which then needs `rng`); eval mode is deterministic.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"forward mode must be 'train' or 'eval', got {mode!r}")
        expected = self.config.input_shape
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(
                f"model input shape {tuple(x.shape[1:])} does not match the configured {expected}"
            )
        if mode == "train" and self.config.dropout_p > 0 and rng is None:
            raise ConfigError("train-mode forward needs an rng for dropout")

        for bn in self.batch_norms():
            bn.mode = mode

        act = self.config.activation
        h = ops.activation(ops.batch_norm(ops.conv2d(x, self.stem_conv1), self.stem_bn1), act)
        h = ops.activation(ops.batch_norm(ops.conv2d(h, self.stem_conv2), self.stem_bn2), act)
        h = ops.pool2d(h, "max", window=3, stride=2, padding="valid")

        for transition, units in zip(self.transitions, self.blocks):
            h = transition.forward(h, mode=mode, rng=rng)
            for unit in units:
                h = unit.forward(h, mode=mode)

        h = ops.global_avg_pool(h)
        if self.hidden_w is not None:
            h = ops.activation(ops.dense(h, self.hidden_w, self.hidden_b), act)
        logits = ops.dense(h, self.head_w, self.head_b)
        return ops.softmax(logits)

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        params.update(_conv_params_dict("stem.conv1", self.stem_conv1))
        params.update(_bn_params_dict("stem.bn1", self.stem_bn1))
        params.update(_conv_params_dict("stem.conv2", self.stem_conv2))
        params.update(_bn_params_dict("stem.bn2", self.stem_bn2))
        for transition, units in zip(self.transitions, self.blocks):
            params.update(transition.parameters())
            for unit in units:
                params.update(unit.parameters())
        if self.hidden_w is not None:
            params["head.hidden.weight"] = self.hidden_w
            params["head.hidden.bias"] = self.hidden_b
        params["head.out.weight"] = self.head_w
        params["head.out.bias"] = self.head_b
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        bufs: Dict[str, np.ndarray] = {}
        bufs.update(_bn_buffers_dict("stem.bn1", self.stem_bn1))
        bufs.update(_bn_buffers_dict("stem.bn2", self.stem_bn2))
        for units in self.blocks:
            for unit in units:
                bufs.update(unit.buffers())
        return bufs

    def set_buffers(self, values: Dict[str, np.ndarray]) -> None:
        """Overwrite batch-norm running statistics in place (checkpoint load)."""
        live = self._buffer_holders()
        for name, arr in values.items():
            if name not in live:
                raise ConfigError(f"unknown buffer {name!r}")
            holder, attr = live[name]
            current = getattr(holder, attr)
            if current.shape != arr.shape:
                raise ShapeError(f"buffer {name!r}: shape {arr.shape} != {current.shape}")
            setattr(holder, attr, arr.astype(current.dtype).copy())
            holder.initialized = True

    def _buffer_holders(self):
        holders = {}
        named = [("stem.bn1", self.stem_bn1), ("stem.bn2", self.stem_bn2)]
        for units in self.blocks:
            for unit in units:
                named.append((unit.name + ".bn", unit.bn))
        for prefix, bn in named:
            holders[prefix + ".running_mean"] = (bn, "running_mean")
            holders[prefix + ".running_var"] = (bn, "running_var")
        return holders

    def batch_norms(self) -> List[ops.BatchNormParams]:
        bns = [self.stem_bn1, self.stem_bn2]
        for units in self.blocks:
            for unit in units:
                bns.extend(unit.batch_norms())
        return bns

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Construct the network with seeded initialization.

    The returned model carries `trainable_count` and `total_count`
    (trainable plus batch-norm running statistics) and the spatial trace of
    extents through the stem pool and each transition.
    """
    return Model(config, seed, dtype=dtype)


def model_forward(model: Model, batch: Tensor, mode: str = "eval",
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    return model.forward(batch, mode=mode, rng=rng)

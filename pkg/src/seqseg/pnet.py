"""PNet-MSA: stacked unit modules with deep supervision and multi-scale aggregation.

Unit ``k`` has a forward branch (four 3x3 conv + BN + ReLU layers at scale
``2**(k-1)``) and a backward branch that brings the forward outputs
``F_1..F_k`` back to full resolution, concatenates them and fuses the stack
into a probability map ``U_k``. The network output is a softmax-weighted
mix of the unit maps.

Layer schedule (fixed, see README):

* conv: 3x3, stride 1, pad 1, ``width`` channels, no bias (BN follows)
* pooling between units: 2x2 max, stride 2
* level ``j`` upsampler: transposed conv, ``agg_channels`` outputs,
  kernel ``2**j``, stride ``2**(j-1)``, pad ``2**(j-2)``; level 1 is 1x1
* fusion: 1x1 conv with bias to a single channel, then sigmoid
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import (RunningStats, ShapeError, Tensor, batchnorm, concat_channels, conv2d,
                     deconv2d, maxpool2d, relu, sigmoid, softmax)

LAYERS_PER_BRANCH = 4


class ConfigError(ValueError):
    """The network configuration cannot process the requested input."""


@dataclass
class ConvBN:
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats


@dataclass
class UnitModuleParams:
    """theta_k^f (``layers``) and theta_k^b (``upsamplers``, ``fuse_weight``, ``fuse_bias``)."""

    k: int
    layers: list[ConvBN]
    upsamplers: list[Tensor]
    fuse_weight: Tensor
    fuse_bias: Tensor

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"unit{self.k}.conv{i}.weight", layer.weight),
                    (f"unit{self.k}.conv{i}.gamma", layer.gamma),
                    (f"unit{self.k}.conv{i}.beta", layer.beta)]
        for j, w in enumerate(self.upsamplers, start=1):
            out.append((f"unit{self.k}.up{j}.weight", w))
        out += [(f"unit{self.k}.fuse.weight", self.fuse_weight),
                (f"unit{self.k}.fuse.bias", self.fuse_bias)]
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"unit{self.k}.conv{i}.running_mean", layer.stats.mean),
                    (f"unit{self.k}.conv{i}.running_var", layer.stats.var)]
        return out


@dataclass
class PNetParams:
    units: list[UnitModuleParams]
    fusion_logits: Tensor
    width: int = 64
    agg_channels: int = 16
    in_channels: int = 3
    seed: int | None = None

    @property
    def K(self) -> int:
        return len(self.units)

    @classmethod
    def create(cls, K: int = 5, width: int = 64, agg_channels: int = 16,
               in_channels: int = 3, seed: int = 0) -> "PNetParams":
        if K < 1:
            raise ConfigError(f"K must be >= 1, got {K}")
        units = []
        for k in range(1, K + 1):
            layers = []
            for i in range(LAYERS_PER_BRANCH):
                cin = in_channels if (k == 1 and i == 0) else width
                layers.append(ConvBN(Tensor(np.zeros((width, cin, 3, 3)), True),
                                     Tensor(np.ones(width), True), Tensor(np.zeros(width), True),
                                     RunningStats.fresh(width)))
            ups = []
            for j in range(1, k + 1):
                ksz = upsampler_geometry(j)[0]
                ups.append(Tensor(np.zeros((width, agg_channels, ksz, ksz)), True))
            units.append(UnitModuleParams(k, layers, ups,
                                          Tensor(np.zeros((1, agg_channels * k, 1, 1)), True),
                                          Tensor(np.zeros(1), True)))
        params = cls(units, Tensor(np.zeros(K), True), width, agg_channels, in_channels, seed)
        return msra_init(params, seed)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for u in self.units:
            out += u.parameters()
        out.append(("fusion_logits", self.fusion_logits))
        for name, t in out:
            t.name = name
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for u in self.units:
            out += u.buffers()
        return out


def upsampler_geometry(level: int) -> tuple[int, int, int]:
    """(kernel, stride, pad) of the transposed conv that lifts ``F_level`` to full size."""
    if level == 1:
        return 1, 1, 0
    return 2 ** level, 2 ** (level - 1), 2 ** (level - 2)


def _msra(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_unit(unit: UnitModuleParams, rng: np.random.Generator) -> None:
    """MSRA-initialize one unit module in place."""
    for layer in unit.layers:
        w = layer.weight.data
        w[...] = _msra(rng, w.shape, w.shape[1] * w.shape[2] * w.shape[3])
        layer.gamma.data[...] = 1.0
        layer.beta.data[...] = 0.0
        layer.stats.mean[...] = 0.0
        layer.stats.var[...] = 1.0
    for j, up in enumerate(unit.upsamplers, start=1):
        ksz, stride, _ = upsampler_geometry(j)
        # inputs feeding one output pixel of a transposed conv
        fan_in = up.shape[0] * (ksz // stride) ** 2
        up.data[...] = _msra(rng, up.shape, fan_in)
    unit.fuse_weight.data[...] = _msra(rng, unit.fuse_weight.shape, unit.fuse_weight.shape[1])
    unit.fuse_bias.data[...] = 0.0


def msra_init(params: PNetParams, seed: int | None) -> PNetParams:
    """Draw every conv/deconv weight from Normal(0, sqrt(2/fan_in)); zero biases and logits."""
    rng = np.random.default_rng(seed)
    for unit in params.units:
        init_unit(unit, rng)
    params.fusion_logits.data[...] = 0.0
    params.seed = seed
    return params


def param_count(params) -> int:
    """Number of learnable scalars. Accepts anything with ``parameters()`` or an iterable of tensors."""
    items = params.parameters() if hasattr(params, "parameters") else params
    total = 0
    for item in items:
        t = item[1] if isinstance(item, tuple) else item
        total += int(np.prod(t.shape))
    return total


def forward_branch(x: Tensor, unit: UnitModuleParams, train: bool) -> Tensor:
    """Four (conv 3x3 -> BN -> ReLU) layers; spatial size is preserved."""
    h = x
    for layer in unit.layers:
        h = conv2d(h, layer.weight, None, stride=1, pad=1)
        h = batchnorm(h, layer.gamma, layer.beta, layer.stats, train)
        h = relu(h)
    return h


def backward_branch(features: Sequence[Tensor], unit: UnitModuleParams) -> Tensor:
    """Lift F_1..F_k to full resolution, concatenate and fuse to U_k in (0, 1)."""
    if len(features) != len(unit.upsamplers):
        raise ShapeError(f"unit {unit.k} expects {len(unit.upsamplers)} feature maps, got {len(features)}")
    full = features[0].shape[-2:]
    lifted = []
    for j, (f, w) in enumerate(zip(features, unit.upsamplers), start=1):
        scale = 2 ** (j - 1)
        want = (full[0] // scale, full[1] // scale)
        if f.shape[-2:] != want or full[0] % scale or full[1] % scale:
            raise ShapeError(f"level {j}: feature map {f.shape[-2:]} inconsistent with pyramid (expected {want})")
        ksz, stride, pad = upsampler_geometry(j)
        lifted.append(deconv2d(f, w, stride=stride, pad=pad))
    stacked = concat_channels(lifted)
    return sigmoid(conv2d(stacked, unit.fuse_weight, unit.fuse_bias))


def check_input_shape(shape: Sequence[int], params: PNetParams, n_units: int | None = None) -> None:
    n_units = params.K if n_units is None else n_units
    h, w = shape[-2:]
    div = 2 ** (n_units - 1)
    if shape[-3] != params.in_channels:
        raise ConfigError(f"input has {shape[-3]} channels, network expects {params.in_channels}")
    if h % div or w % div:
        raise ConfigError(f"input extent {(h, w)} not divisible by 2**(K-1) = {div}")


@dataclass
class PNetOutput:
    units: list[Tensor]
    fused: Tensor
    features: list[Tensor] = field(default_factory=list)


def pnet_forward(x: Tensor, params: PNetParams, train: bool = False, n_units: int | None = None) -> PNetOutput:
    """Run the first ``n_units`` (default all) unit modules on ``[3,H,W]`` or ``[N,3,H,W]`` input.

    The fused map is ``sum_k softmax(w)_k U_k`` over the active units.
    """
    n_units = params.K if n_units is None else n_units
    if not 1 <= n_units <= params.K:
        raise ConfigError(f"n_units={n_units} outside 1..{params.K}")
    check_input_shape(x.shape, params, n_units)
    feats: list[Tensor] = []
    outs: list[Tensor] = []
    h = x
    for k in range(n_units):
        if k > 0:
            h, _ = maxpool2d(feats[-1], 2, 2)
        feats.append(forward_branch(h, params.units[k], train))
        outs.append(backward_branch(feats, params.units[k]))
    mix = softmax(params.fusion_logits[:n_units])
    fused = outs[0] * mix[0]
    for k in range(1, n_units):
        fused = fused + outs[k] * mix[k]
    return PNetOutput(outs, fused, feats)


def receptive_schedule(params: PNetParams, h: int, w: int) -> list[tuple[int, int]]:
    """Spatial extent seen by each forward branch for an ``h`` x ``w`` input."""
    return [(h // 2 ** k, w // 2 ** k) for k in range(params.K)]


def named_parameters(params_list: Iterable) -> list[tuple[str, Tensor]]:
    out = []
    for p in params_list:
        out += p.parameters()
    return out

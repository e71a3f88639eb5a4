"""Evenly cascaded network construction.

A cascading layer shrinks its input by a constant rational factor with
bilinear interpolation, runs one convolution block that widens the channels
by ``growth``, adds the first ``in_ch`` block outputs back onto the resized
input and appends the remaining ``growth`` channels as a new feature level.
Layers are stacked until another shrink would take the feature map below
``stop_threshold_px``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .blocks import (
    BlockKind,
    BlockParams,
    BlockSpec,
    block_forward,
    block_param_count,
    count_trainable,
    init_block_params,
)
from .ops import BatchNormState, ConvKernel, batchnorm, bilinear_resize, conv2d, global_avg_pool, linear
from .tensor import Tensor, add, concat_channels, get_dtype, relu, slice_channels

__all__ = [
    "CascadeConfig",
    "LayerPlan",
    "NetworkPlan",
    "FeatureState",
    "ECN",
    "AuditReport",
    "ParamAuditError",
    "parse_scale",
    "default_growth",
    "plan_network",
    "audit_params",
    "cascade_layer_forward",
    "network_forward",
]


def parse_scale(value) -> Fraction:
    """Parse ``"3/4"``, ``0.75`` or a Fraction into an exact ratio in (0, 1)."""
    try:
        frac = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(1000)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"invalid scale {value!r}") from exc
    if not 0 < frac < 1:
        raise ValueError(f"scale must lie strictly between 0 and 1, got {frac}")
    return frac


def default_growth(init_channels: int, scale: Fraction) -> int:
    return int(round(init_channels * 2 * (1 - Fraction(scale))))


@dataclass(frozen=True)
class CascadeConfig:
    init_channels: int = 16
    scale: Fraction = Fraction(1, 2)
    block: BlockKind = BlockKind.SINGLE
    iterations: int = 3
    class_count: int = 10
    input_hw: Tuple[int, int] = (32, 32)
    growth: Optional[int] = None
    stop_threshold_px: int = 4
    dropout_rate: float = 0.0
    recurrence: str = "accumulated"
    dropout_placement: str = "every_relu"
    align_corners: bool = False
    head_relu: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scale", parse_scale(self.scale))
        object.__setattr__(self, "block", BlockKind(self.block))
        hw = self.input_hw
        if isinstance(hw, int):
            hw = (hw, hw)
        object.__setattr__(self, "input_hw", (int(hw[0]), int(hw[1])))
        if self.growth is None:
            object.__setattr__(self, "growth", default_growth(self.init_channels, self.scale))
        if self.init_channels < 1 or self.growth < 1 or self.class_count < 1 or self.stop_threshold_px < 1:
            raise ValueError("init_channels, growth, class_count and stop_threshold_px must be positive")

    def block_spec(self, in_ch: int, out_ch: int) -> BlockSpec:
        return BlockSpec(self.block, in_ch, out_ch, iterations=self.iterations,
                         dropout_rate=self.dropout_rate, recurrence=self.recurrence,
                         dropout_placement=self.dropout_placement)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = f"{self.scale.numerator}/{self.scale.denominator}"
        d["block"] = int(self.block)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        d = dict(d)
        d["input_hw"] = tuple(d["input_hw"])
        return cls(**d)


@dataclass(frozen=True)
class LayerPlan:
    index: int
    in_ch: int
    out_ch: int
    in_hw: Tuple[int, int]
    out_hw: Tuple[int, int]
    params: int

    @property
    def growth(self) -> int:
        return self.out_ch - self.in_ch


@dataclass(frozen=True)
class NetworkPlan:
    config: CascadeConfig
    stem_params: int
    layers: Tuple[LayerPlan, ...]
    head_params: int
    final_channels: int

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def total_params(self) -> int:
        return self.stem_params + sum(l.params for l in self.layers) + self.head_params

    def level_boundaries(self, upto: Optional[int] = None) -> List[int]:
        """Channel offsets where each feature level ends, after ``upto`` layers."""
        n = self.depth if upto is None else upto
        bounds = [self.config.init_channels]
        for layer in self.layers[:n]:
            bounds.append(layer.out_ch)
        return bounds

    def table(self) -> str:
        rows = [f"{'layer':<6} {'channels':>12} {'extent':>14} {'params':>10}",
                f"{'stem':<6} {'3->' + str(self.config.init_channels):>12} "
                f"{'x'.join(map(str, self.config.input_hw)):>14} {self.stem_params:>10}"]
        for l in self.layers:
            rows.append(f"{l.index:<6} {f'{l.in_ch}->{l.out_ch}':>12} "
                        f"{f'{l.in_hw[0]}x{l.in_hw[1]}->{l.out_hw[0]}x{l.out_hw[1]}':>14} {l.params:>10}")
        rows.append(f"{'head':<6} {f'{self.final_channels}->{self.config.class_count}':>12} "
                    f"{'':>14} {self.head_params:>10}")
        rows.append(f"{'total':<6} {'':>12} {'':>14} {self.total_params:>10}")
        return "\n".join(rows)

    def to_manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "stem": {"in_ch": 3, "out_ch": self.config.init_channels, "params": self.stem_params},
            "layers": [
                {"index": l.index, "in_ch": l.in_ch, "out_ch": l.out_ch,
                 "in_hw": list(l.in_hw), "out_hw": list(l.out_hw), "params": l.params}
                for l in self.layers
            ],
            "head": {"in_ch": self.final_channels, "classes": self.config.class_count,
                     "params": self.head_params},
            "total_params": self.total_params,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_manifest(), indent=2)

    @classmethod
    def from_manifest(cls, manifest: dict) -> "NetworkPlan":
        plan = plan_network(CascadeConfig.from_dict(manifest["config"]))
        if plan.to_manifest() != manifest:
            raise ValueError("manifest does not match the plan its config produces")
        return plan


def _shrink(hw: Tuple[int, int], scale: Fraction) -> Tuple[int, int]:
    return tuple((v * scale.numerator) // scale.denominator for v in hw)


def plan_network(cfg: CascadeConfig) -> NetworkPlan:
    """Resolve the layer schedule and closed-form parameter counts."""
    t = cfg.stop_threshold_px
    layers = []
    hw = cfg.input_hw
    ch = cfg.init_channels
    while True:
        nxt = _shrink(hw, cfg.scale)
        if min(nxt) < t:
            break
        spec = cfg.block_spec(ch, ch + cfg.growth)
        layers.append(LayerPlan(len(layers) + 1, ch, ch + cfg.growth, hw, nxt, block_param_count(spec)))
        ch += cfg.growth
        hw = nxt
    if not layers:
        raise ValueError(f"input {cfg.input_hw} at scale {cfg.scale} yields no layer above {t} px")
    stem = 3 * cfg.init_channels * 9
    head = 2 * ch + ch * cfg.class_count + cfg.class_count
    return NetworkPlan(cfg, stem, tuple(layers), head, ch)


@dataclass
class FeatureState:
    """Layer output plus the channel offsets closing each feature level."""

    features: Tensor
    levels: List[int]

    def __post_init__(self):
        if self.levels and self.levels[-1] != self.features.shape[1]:
            raise ValueError("last level boundary must equal the channel count")


def cascade_layer_forward(layer: LayerPlan, spec: BlockSpec, params: BlockParams, x: FeatureState,
                          train: bool = False, rng: Optional[np.random.Generator] = None,
                          align_corners: bool = False) -> FeatureState:
    feats = x.features
    if feats.shape[1] != layer.in_ch or tuple(feats.shape[2:]) != tuple(layer.in_hw):
        raise ValueError(f"layer {layer.index} expects {layer.in_ch}x{layer.in_hw}, got {feats.shape[1:]}")
    down = bilinear_resize(feats, layer.out_hw, align_corners=align_corners)
    y = block_forward(spec, params, down, train, rng)
    modulation = slice_channels(y, 0, layer.in_ch)
    fresh = slice_channels(y, layer.in_ch, layer.out_ch)
    out = concat_channels([add(down, modulation), fresh])
    return FeatureState(out, list(x.levels) + [layer.out_ch])


class ECN:
    """An instantiated network: stem, cascade layers and classifier head."""

    def __init__(self, plan: NetworkPlan, seed: int = 0, dtype=None):
        self.plan = plan
        cfg = plan.config
        dtype = dtype or get_dtype()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.stem = ConvKernel.create(3, cfg.init_channels, 3, rng, name="stem.weight", dtype=dtype)
        self.specs = [cfg.block_spec(l.in_ch, l.out_ch) for l in plan.layers]
        self.blocks = [init_block_params(s, rng, dtype=dtype, prefix=f"layer{l.index}.")
                       for s, l in zip(self.specs, plan.layers)]
        c = plan.final_channels
        self.head_bn = BatchNormState.create(c, name="head.bn", dtype=dtype)
        bound = 1.0 / np.sqrt(c)
        self.head_weight = Tensor(rng.uniform(-bound, bound, (cfg.class_count, c)).astype(dtype),
                                  requires_grad=True, name="head.weight")
        self.head_bias = Tensor(np.zeros(cfg.class_count, dtype=dtype), requires_grad=True, name="head.bias")

    # -- parameter access -------------------------------------------------
    def component_parameters(self) -> Iterator[Tuple[str, List[Tuple[str, Tensor]]]]:
        yield "stem", [("stem.weight", self.stem.weight)]
        for l, bp in zip(self.plan.layers, self.blocks):
            yield f"layer{l.index}", list(bp.named_parameters(f"layer{l.index}."))
        yield "head", [("head.bn.gamma", self.head_bn.gamma), ("head.bn.beta", self.head_bn.beta),
                       ("head.weight", self.head_weight), ("head.bias", self.head_bias)]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [p for _, group in self.component_parameters() for p in group]

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        out = []
        for l, bp in zip(self.plan.layers, self.blocks):
            out.extend(bp.named_buffers(f"layer{l.index}."))
        out.append(("head.bn.running_mean", self.head_bn.running_mean))
        out.append(("head.bn.running_var", self.head_bn.running_var))
        return out

    def no_decay(self) -> set:
        """Names exempt from weight decay: batch-norm affine terms and the head bias."""
        return {n for n, _ in self.named_parameters() if n.endswith((".gamma", ".beta")) or n == "head.bias"}

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return count_trainable(self.named_parameters())

    # -- forward -------------------------------------------------------------
    def features(self, images: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> List[FeatureState]:
        """Stem output followed by every cascade layer's state."""
        cfg = self.plan.config
        if images.data.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != cfg.input_hw:
            raise ValueError(f"expected images shaped Nx3x{cfg.input_hw[0]}x{cfg.input_hw[1]}, got {images.shape}")
        state = FeatureState(conv2d(images, self.stem), [cfg.init_channels])
        states = [state]
        for layer, spec, bp in zip(self.plan.layers, self.specs, self.blocks):
            state = cascade_layer_forward(layer, spec, bp, state, train, rng, cfg.align_corners)
            states.append(state)
        return states

    def head(self, features: Tensor, train: bool = False) -> Tensor:
        h = batchnorm(features, self.head_bn, train)
        if self.plan.config.head_relu:
            h = relu(h)
        return linear(global_avg_pool(h), self.head_weight, self.head_bias)

    def __call__(self, images: Tensor, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        return network_forward(self, images, train, rng)


def network_forward(net: ECN, images: Tensor, train: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits shaped ``(batch, classes, 1, 1)``."""
    return net.head(net.features(images, train, rng)[-1].features, train)


class ParamAuditError(AssertionError):
    pass


@dataclass
class AuditReport:
    components: List[Tuple[str, int, int]]  # (name, planned, instantiated)
    planned_total: int
    brute_force_total: int
    expected_total: Optional[int] = None

    @property
    def first_mismatch(self) -> Optional[str]:
        for name, planned, counted in self.components:
            if planned != counted:
                return f"{name}: planned {planned}, instantiated {counted}"
        if self.planned_total != self.brute_force_total:
            return f"total: planned {self.planned_total}, instantiated {self.brute_force_total}"
        if self.expected_total is not None and self.expected_total != self.planned_total:
            return f"total: expected {self.expected_total}, planned {self.planned_total}"
        return None

    @property
    def ok(self) -> bool:
        return self.first_mismatch is None

    def raise_for_mismatch(self) -> None:
        if not self.ok:
            raise ParamAuditError(self.first_mismatch)


def audit_params(plan: NetworkPlan, net: ECN, expected_total: Optional[int] = None) -> AuditReport:
    """Compare planned per-component counts with the instantiated tensors."""
    planned = {"stem": plan.stem_params, "head": plan.head_params}
    planned.update({f"layer{l.index}": l.params for l in plan.layers})
    components = [(name, planned[name], count_trainable(group)) for name, group in net.component_parameters()]
    return AuditReport(components, plan.total_params, net.num_parameters(), expected_total)

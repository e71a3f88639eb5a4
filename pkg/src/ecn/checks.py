"""Gradient-check suite over every operator, block kind and the cascade layer.

Each case draws small random shapes from its seed, runs in float64 and
reports the worst relative error from :func:`ecn.gradcheck.gradcheck`.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np

from .blocks import BlockKind, BlockSpec, block_forward, init_block_params
from .cascade import ECN, CascadeConfig, FeatureState, cascade_layer_forward, network_forward, plan_network
from .gradcheck import gradcheck
from .ops import (
    BatchNormState,
    ConvKernel,
    batchnorm,
    bilinear_resize,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
    softmax_cross_entropy,
)
from .tensor import Tensor, add, concat_channels, mul, precision, relu, scale, slice_channels, sum_all

__all__ = ["TOLERANCE", "CASES", "run_case", "run_suite"]

TOLERANCE = 1e-6


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from_zero(rng, *shape):
    # keeps ReLU inputs clear of the kink so central differences stay valid
    x = rng.standard_normal(shape)
    return Tensor(np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12) + x, x), requires_grad=True)


def _case_elementwise(rng):
    shape = (2, int(rng.integers(2, 4)), 3, 3)
    a, b = _t(rng, *shape), _t(rng, *shape)
    c = _away_from_zero(rng, *shape)
    return lambda: relu(add(scale(mul(a, b), 0.7), c)), [a, b, c]


def _case_sum_reuse(rng):
    a = _t(rng, 2, 3, 3, 3)
    return lambda: sum_all(add(mul(a, a), a)), [a]


def _case_concat_slice(rng):
    a = _t(rng, 2, 5, 3, 4)
    b = _t(rng, 2, 2, 3, 4)
    return lambda: concat_channels([slice_channels(a, 1, 4), b, a]), [a, b]


def _case_conv3x3(rng):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    x = _t(rng, 2, cin, int(rng.integers(3, 6)), int(rng.integers(3, 6)))
    k = ConvKernel.create(cin, cout, 3, rng)
    return lambda: conv2d(x, k), [x, k.weight]


def _case_conv1x1(rng):
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    x = _t(rng, 2, cin, 4, 3)
    k = ConvKernel.create(cin, cout, 1, rng)
    return lambda: conv2d(x, k), [x, k.weight]


def _case_conv_depthwise(rng):
    c = int(rng.integers(2, 5))
    x = _t(rng, 2, c, int(rng.integers(3, 6)), 4)
    k = ConvKernel.create(c, c, 3, rng, groups=c)
    return lambda: conv2d(x, k), [x, k.weight]


def _case_conv_grouped(rng):
    x = _t(rng, 2, 4, 4, 4)
    k = ConvKernel.create(4, 6, 3, rng, groups=2)
    return lambda: conv2d(x, k), [x, k.weight]


def _bn(rng, c):
    bn = BatchNormState.create(c)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, c)
    bn.beta.data[:] = rng.standard_normal(c)
    return bn


def _case_batchnorm_train(rng):
    c = int(rng.integers(2, 6))
    x = _t(rng, int(rng.integers(2, 5)), c, int(rng.integers(2, 5)), 3)
    bn = _bn(rng, c)
    return lambda: batchnorm(x, bn, train=True), [x, bn.gamma, bn.beta]


def _case_batchnorm_eval(rng):
    c = 3
    x = _t(rng, 2, c, 3, 3)
    bn = _bn(rng, c)
    bn.running_mean[:] = rng.standard_normal(c)
    bn.running_var[:] = rng.uniform(0.5, 2.0, c)
    return lambda: batchnorm(x, bn, train=False), [x, bn.gamma, bn.beta]


def _case_resize_down(rng):
    h, w = int(rng.integers(5, 9)), int(rng.integers(5, 9))
    x = _t(rng, 2, 2, h, w)
    out = (int(rng.integers(2, h)), int(rng.integers(2, w)))
    return lambda: bilinear_resize(x, out), [x]


def _case_resize_up_aligned(rng):
    x = _t(rng, 1, 2, 4, 5)
    out = (int(rng.integers(5, 8)), int(rng.integers(3, 8)))
    return lambda: bilinear_resize(x, out, align_corners=True), [x]


def _case_pool(rng):
    x = _t(rng, 2, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    return lambda: global_avg_pool(x), [x]


def _case_linear(rng):
    c, k = int(rng.integers(2, 7)), int(rng.integers(2, 5))
    x = _t(rng, 3, c, 1, 1)
    w, b = _t(rng, k, c), _t(rng, k)
    return lambda: linear(x, w, b), [x, w, b]


def _case_softmax_ce(rng):
    n, k = int(rng.integers(2, 6)), int(rng.integers(2, 8))
    z = _t(rng, n, k, 1, 1)
    labels = rng.integers(0, k, n)
    return lambda: softmax_cross_entropy(z, labels), [z]


def _case_dropout(rng):
    x = _t(rng, 2, 3, 4, 4)
    seed = int(rng.integers(1 << 31))
    return lambda: dropout(x, 0.3, True, np.random.default_rng(seed)), [x]


def _block_case(kind):
    def case(rng):
        in_ch = int(rng.integers(2, 5))
        out_ch = in_ch + int(rng.integers(1, 3))
        spec = BlockSpec(kind, in_ch, out_ch, iterations=3)
        params = init_block_params(spec, rng)
        for round_norms in params.norms:
            for bn in round_norms:
                bn.beta.data[:] = rng.uniform(-0.3, 0.3, bn.channels)
        x = _t(rng, 2, in_ch, int(rng.integers(3, 5)), int(rng.integers(3, 5)))
        tensors = [x] + [t for _, t in params.named_parameters()]
        return lambda: block_forward(spec, params, x, train=True), tensors
    return case


def _case_cascade_layer(rng):
    kind = BlockKind(int(rng.integers(1, 7)))
    cfg = CascadeConfig(init_channels=3, scale=Fraction(3, 4), block=kind, class_count=2,
                        input_hw=(8, 7), growth=2, stop_threshold_px=2)
    plan = plan_network(cfg)
    layer = plan.layers[0]
    spec = cfg.block_spec(layer.in_ch, layer.out_ch)
    params = init_block_params(spec, rng)
    x = _t(rng, 2, layer.in_ch, *layer.in_hw)
    tensors = [x] + [t for _, t in params.named_parameters()]
    return lambda: cascade_layer_forward(layer, spec, params, FeatureState(x, [layer.in_ch]),
                                         train=True).features, tensors


def _case_network(rng):
    cfg = CascadeConfig(init_channels=2, scale=Fraction(1, 2), block=BlockKind(int(rng.integers(1, 7))),
                        class_count=3, input_hw=(8, 8), growth=2, stop_threshold_px=2)
    net = ECN(plan_network(cfg), seed=int(rng.integers(1 << 31)), dtype=np.float64)
    images = _t(rng, 3, 3, 8, 8)
    labels = rng.integers(0, 3, 3)
    tensors = [images] + [t for _, t in net.named_parameters()]
    return lambda: softmax_cross_entropy(network_forward(net, images, train=True), labels), tensors


CASES: Dict[str, Callable] = {
    "elementwise": _case_elementwise,
    "sum_with_reuse": _case_sum_reuse,
    "concat_slice": _case_concat_slice,
    "conv3x3": _case_conv3x3,
    "conv1x1": _case_conv1x1,
    "conv_channelwise": _case_conv_depthwise,
    "conv_grouped": _case_conv_grouped,
    "batchnorm_train": _case_batchnorm_train,
    "batchnorm_eval": _case_batchnorm_eval,
    "bilinear_down": _case_resize_down,
    "bilinear_up_aligned": _case_resize_up_aligned,
    "global_avg_pool": _case_pool,
    "linear": _case_linear,
    "softmax_cross_entropy": _case_softmax_ce,
    "dropout": _case_dropout,
    **{f"block{int(k)}": _block_case(k) for k in BlockKind},
    "cascade_layer": _case_cascade_layer,
    "network": _case_network,
}


def run_case(name: str, seed: int) -> float:
    with precision("float64"):
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        fn, tensors = CASES[name](rng)
        return gradcheck(lambda *_: fn(), tensors, eps=1e-5, seed=seed)


def run_suite(seeds=(0, 1, 2, 3, 4), names=None) -> Iterator[Tuple[str, int, float]]:
    for name in names or CASES:
        for seed in seeds:
            yield name, seed, run_case(name, seed)

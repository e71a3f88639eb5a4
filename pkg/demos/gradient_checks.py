"""
Checking gradients with finite differences
==========================================

Every differentiable operation registers a backward rule.  Central
differences in 64-bit precision give an independent estimate to compare
against, one input element at a time.
"""

import numpy as np

from ecn import Tensor, gradcheck, precision
from ecn.blocks import BlockSpec, block_forward, init_block_params
from ecn.ops import bilinear_resize

rng = np.random.default_rng(0)

with precision("float64"):
    # Fractional bilinear resizing: 7x5 maps shrunk to 4x3.
    x = Tensor(rng.standard_normal((2, 3, 7, 5)))
    err = gradcheck(lambda t: bilinear_resize(t, (4, 3)), [x])
    print(f"bilinear 7x5 -> 4x3: max relative error {err:.2e}")

    # A recursive separable block: three iterations sharing one pair of
    # 1x1 and channel-wise kernels, each with its own batch norms.
    spec = BlockSpec(kind=6, in_ch=4, out_ch=6, iterations=3)
    params = init_block_params(spec, rng)
    x = Tensor(rng.standard_normal((2, 4, 5, 5)))
    tensors = [x] + [p for _, p in params.named_parameters()]
    err = gradcheck(lambda *_: block_forward(spec, params, x, train=True), tensors)
    print(f"block 6, 4 -> 6 channels: max relative error {err:.2e}")

# The packaged suite covers every operator and block kind; the CLI
# equivalent is ``ecn gradcheck``.
from ecn.checks import run_case

print("cascade layer, seed 0:", f"{run_case('cascade_layer', 0):.2e}")

"""The six convolution block designs.

Every stage is pre-activation: ``BN -> ReLU -> conv``.  Blocks 3-6 repeat
their body for ``iterations`` rounds with the *same* convolution kernels and a
fresh set of batch norms per round.  Round ``k >= 2`` reads the first
``in_ch`` channels of the running output and its result is added onto it.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .ops import BatchNormState, ConvKernel, batchnorm, conv2d, dropout
from .tensor import Tensor, add, relu, slice_channels

__all__ = [
    "BlockKind",
    "BlockSpec",
    "BlockParams",
    "init_block_params",
    "block_forward",
    "block_param_count",
    "count_trainable",
]


class BlockKind(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    RECURRENT = 3
    RECURRENT_DOUBLE = 4
    RECURSIVE_SEP = 5
    RECURSIVE_QUAD = 6

    @property
    def recurrent(self) -> bool:
        return self >= BlockKind.RECURRENT


# conv stages of one body, as (name, kind, in-key, out-key); "in" is in_ch, "out" is out_ch
_STAGES = {
    BlockKind.SINGLE: [("conv1", "full", "in", "out")],
    BlockKind.DOUBLE: [("conv1", "full", "in", "out"), ("conv2", "full", "out", "out")],
    BlockKind.RECURSIVE_SEP: [("cross1", "cross", "in", "out"), ("spatial1", "spatial", "out", "out")],
    BlockKind.RECURSIVE_QUAD: [
        ("cross1", "cross", "in", "out"),
        ("spatial1", "spatial", "out", "out"),
        ("cross2", "cross", "out", "out"),
        ("spatial2", "spatial", "out", "out"),
    ],
}
_STAGES[BlockKind.RECURRENT] = _STAGES[BlockKind.SINGLE]
_STAGES[BlockKind.RECURRENT_DOUBLE] = _STAGES[BlockKind.DOUBLE]


@dataclass(frozen=True)
class BlockSpec:
    """Configuration of one block.

    ``recurrence`` selects what later rounds slice their input from:
    ``"accumulated"`` (the running sum) or ``"previous"`` (the previous
    round's raw output).  ``dropout_placement`` is ``"every_relu"`` or
    ``"first_iteration"``.
    """

    kind: BlockKind
    in_ch: int
    out_ch: int
    iterations: int = 3
    dropout_rate: float = 0.0
    recurrence: str = "accumulated"
    dropout_placement: str = "every_relu"

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValueError("channel counts must be positive")
        if self.out_ch < self.in_ch:
            raise ValueError(f"out_ch ({self.out_ch}) must be >= in_ch ({self.in_ch})")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.recurrence not in ("accumulated", "previous"):
            raise ValueError(f"unknown recurrence {self.recurrence!r}")
        if self.dropout_placement not in ("every_relu", "first_iteration"):
            raise ValueError(f"unknown dropout placement {self.dropout_placement!r}")

    @property
    def rounds(self) -> int:
        return self.iterations if self.kind.recurrent else 1

    def stages(self):
        widths = {"in": self.in_ch, "out": self.out_ch}
        return [(name, kind, widths[a], widths[b]) for name, kind, a, b in _STAGES[self.kind]]


@dataclass
class BlockParams:
    """Shared kernels plus one list of batch norms per round."""

    convs: Dict[str, ConvKernel]
    norms: List[List[BatchNormState]] = field(default_factory=list)

    def named_parameters(self, prefix: str = ""):
        for name, k in self.convs.items():
            yield f"{prefix}{name}.weight", k.weight
        for r, round_norms in enumerate(self.norms):
            for s, bn in enumerate(round_norms):
                yield f"{prefix}bn{r}_{s}.gamma", bn.gamma
                yield f"{prefix}bn{r}_{s}.beta", bn.beta

    def named_buffers(self, prefix: str = ""):
        for r, round_norms in enumerate(self.norms):
            for s, bn in enumerate(round_norms):
                yield f"{prefix}bn{r}_{s}.running_mean", bn.running_mean
                yield f"{prefix}bn{r}_{s}.running_var", bn.running_var


def init_block_params(spec: BlockSpec, rng: np.random.Generator, dtype=None,
                      prefix: str = "") -> BlockParams:
    convs = {}
    for name, kind, cin, cout in spec.stages():
        if kind == "full":
            convs[name] = ConvKernel.create(cin, cout, 3, rng, name=f"{prefix}{name}.weight", dtype=dtype)
        elif kind == "cross":
            convs[name] = ConvKernel.create(cin, cout, 1, rng, name=f"{prefix}{name}.weight", dtype=dtype)
        else:
            convs[name] = ConvKernel.create(cout, cout, 3, rng, groups=cout,
                                            name=f"{prefix}{name}.weight", dtype=dtype)
    norms = []
    for r in range(spec.rounds):
        norms.append([BatchNormState.create(cin, name=f"{prefix}bn{r}_{s}", dtype=dtype)
                      for s, (_, _, cin, _) in enumerate(spec.stages())])
    return BlockParams(convs=convs, norms=norms)


def _body(spec: BlockSpec, params: BlockParams, norms: List[BatchNormState], x: Tensor,
          train: bool, rng: Optional[np.random.Generator], drop: bool) -> Tensor:
    h = x
    for (name, _, _, _), bn in zip(spec.stages(), norms):
        h = relu(batchnorm(h, bn, train))
        if drop and spec.dropout_rate > 0:
            h = dropout(h, spec.dropout_rate, train, rng)
        h = conv2d(h, params.convs[name])
    return h


def block_forward(spec: BlockSpec, params: BlockParams, x: Tensor, train: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Apply one block; channels go from ``in_ch`` to ``out_ch``, spatial size is kept."""
    if x.shape[1] != spec.in_ch:
        raise ValueError(f"block expects {spec.in_ch} channels, got {x.shape[1]}")
    acc = prev = _body(spec, params, params.norms[0], x, train, rng, drop=True)
    for r in range(1, spec.rounds):
        source = acc if spec.recurrence == "accumulated" else prev
        inp = slice_channels(source, 0, spec.in_ch) if spec.in_ch < spec.out_ch else source
        drop = spec.dropout_placement == "every_relu"
        prev = _body(spec, params, params.norms[r], inp, train, rng, drop=drop)
        acc = add(acc, prev)
    return acc


def block_param_count(spec: BlockSpec) -> int:
    """Trainable scalars in a block, from closed forms.

    Kernels are biasless and counted once however many rounds reuse them;
    each batch norm contributes ``2 * channels`` per round.
    """
    i, o = spec.in_ch, spec.out_ch
    k = spec.kind
    if k in (BlockKind.SINGLE, BlockKind.RECURRENT):
        conv, bn = 9 * i * o, 2 * i
    elif k in (BlockKind.DOUBLE, BlockKind.RECURRENT_DOUBLE):
        conv, bn = 9 * i * o + 9 * o * o, 2 * i + 2 * o
    elif k == BlockKind.RECURSIVE_SEP:
        conv, bn = i * o + 9 * o, 2 * i + 2 * o
    else:
        conv, bn = (i * o + 9 * o) + (o * o + 9 * o), 2 * i + 3 * 2 * o
    return conv + spec.rounds * bn


def count_trainable(named_params) -> int:
    """Brute-force element count over ``(name, tensor)`` pairs, each tensor counted once."""
    seen = set()
    total = 0
    for _, t in named_params:
        if id(t) in seen:
            continue
        seen.add(id(t))
        total += t.data.size
    return total

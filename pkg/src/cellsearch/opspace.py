"""Candidate operation sets and their instantiation/cost accounting.

Two 8-operation variants exist. The ``original`` set keeps the identity
(skip) connection; the ``revised`` set drops it in favor of a 1x7-then-7x1
convolution pair, which reaches a large receptive field with half the
sequential module count of a separable convolution.

Canonical ordering (used for alpha column indexing and all tie-breaks) is
the listing order of each variant.
"""

import enum
from dataclasses import dataclass, field

from . import blocks
from .kernels import out_dim


class OpKind(enum.Enum):
    ZERO = "zero"
    SKIP_CONNECT = "skip_connect"
    MAX_POOL_3X3 = "max_pool_3x3"
    AVG_POOL_3X3 = "avg_pool_3x3"
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    DIL_CONV_3X3 = "dil_conv_3x3"
    DIL_CONV_5X5 = "dil_conv_5x5"
    CONV_1X7_7X1 = "conv_1x7_7x1"

    def __repr__(self):
        return f"OpKind.{self.name}"


ORIGINAL_OPS = (
    OpKind.ZERO,
    OpKind.SKIP_CONNECT,
    OpKind.MAX_POOL_3X3,
    OpKind.AVG_POOL_3X3,
    OpKind.SEP_CONV_3X3,
    OpKind.SEP_CONV_5X5,
    OpKind.DIL_CONV_3X3,
    OpKind.DIL_CONV_5X5,
)

REVISED_OPS = (
    OpKind.ZERO,
    OpKind.MAX_POOL_3X3,
    OpKind.AVG_POOL_3X3,
    OpKind.SEP_CONV_3X3,
    OpKind.SEP_CONV_5X5,
    OpKind.DIL_CONV_3X3,
    OpKind.DIL_CONV_5X5,
    OpKind.CONV_1X7_7X1,
)

VARIANTS = {"original": ORIGINAL_OPS, "revised": REVISED_OPS}

# operation-level dropout targets during search
DROPOUT_KINDS = frozenset({OpKind.AVG_POOL_3X3, OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5})

CELL_TYPES = ("normal", "reduction")


def canonical_ops(variant):
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown space variant {variant!r}; expected one of {sorted(VARIANTS)}") from None


def canonical_index(variant, kind):
    return canonical_ops(variant).index(kind)


def op_from_name(name):
    for kind in OpKind:
        if kind.value == name:
            return kind
    raise ValueError(f"unknown operation name {name!r}")


@dataclass
class OperationSpace:
    """Per-(cell type, edge) candidate subsets; subsets only ever shrink."""

    variant: str
    per_edge: dict = field(default_factory=dict)  # cell_type -> list of tuples of OpKind

    def candidates(self, cell_type, edge):
        return self.per_edge[cell_type][edge]

    def n_edges(self, cell_type):
        return len(self.per_edge[cell_type])

    def sizes(self, cell_type):
        return [len(c) for c in self.per_edge[cell_type]]

    def validate(self):
        ops = canonical_ops(self.variant)
        for cell_type, edges in self.per_edge.items():
            for e, cands in enumerate(edges):
                if not cands:
                    raise ValueError(f"{cell_type} edge {e} has no candidates")
                for k in cands:
                    if k not in ops:
                        raise ValueError(f"{cell_type} edge {e}: {k.value} not in variant {self.variant}")

    def to_jsonable(self):
        return {
            "variant": self.variant,
            "per_edge": {ct: [[k.value for k in cands] for cands in edges] for ct, edges in self.per_edge.items()},
        }

    @classmethod
    def from_jsonable(cls, obj):
        space = cls(
            variant=obj["variant"],
            per_edge={
                ct: [tuple(op_from_name(n) for n in cands) for cands in edges]
                for ct, edges in obj["per_edge"].items()
            },
        )
        space.validate()
        return space


def build_space(variant, cell_types=CELL_TYPES, n_edges=14):
    """Fresh space with the full 8-candidate list on every edge."""
    ops = canonical_ops(variant)
    return OperationSpace(variant=variant, per_edge={ct: [ops] * n_edges for ct in cell_types})


def instantiate(kind, channels, stride, rng, affine=False):
    """Build the differentiable block for one candidate operation."""
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}; candidate ops run at stride 1 or 2")
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    if kind == OpKind.ZERO:
        return blocks.Zero(stride)
    if kind == OpKind.SKIP_CONNECT:
        return blocks.Identity() if stride == 1 else blocks.FactorizedReduce(channels, channels, rng, affine)
    if kind == OpKind.MAX_POOL_3X3:
        return blocks.MaxPool3x3(stride)
    if kind == OpKind.AVG_POOL_3X3:
        return blocks.AvgPool3x3(stride)
    if kind == OpKind.SEP_CONV_3X3:
        return blocks.SepConv(channels, 3, stride, rng, affine)
    if kind == OpKind.SEP_CONV_5X5:
        return blocks.SepConv(channels, 5, stride, rng, affine)
    if kind == OpKind.DIL_CONV_3X3:
        return blocks.DilConv(channels, 3, stride, rng, affine)
    if kind == OpKind.DIL_CONV_5X5:
        return blocks.DilConv(channels, 5, stride, rng, affine)
    if kind == OpKind.CONV_1X7_7X1:
        return blocks.FactorizedConv(channels, 7, stride, rng, affine)
    raise ValueError(f"unknown op kind {kind!r}")


@dataclass(frozen=True)
class CostReport:
    params: int = 0
    macs: int = 0
    seq_depth: int = 0
    activations: int = 0

    def __add__(self, other):
        return CostReport(
            self.params + other.params,
            self.macs + other.macs,
            self.seq_depth + other.seq_depth,
            self.activations + other.activations,
        )


def _conv_macs(c_in, c_out, kh, kw, groups, oh, ow):
    return (c_in // groups) * c_out * kh * kw * oh * ow


def op_cost(kind, channels, h, w, stride, affine=False):
    """Structural cost of one candidate op at a given input resolution.

    Parameter and MAC counts enumerate the block's weight tensors and
    per-position multiply-accumulates from the composition definitions (not
    from an instantiated block, so tests can cross-check the two routes).
    """
    c = channels
    bn = 2 * c if affine else 0
    if kind == OpKind.ZERO:
        return CostReport()
    if kind == OpKind.SKIP_CONNECT:
        if stride == 1:
            return CostReport()
        oh, ow = out_dim(h, 1, 2, 0, 1), out_dim(w, 1, 2, 0, 1)
        params = 2 * (c * (c // 2)) + bn
        macs = 2 * _conv_macs(c, c // 2, 1, 1, 1, oh, ow)
        return CostReport(params, macs, 4, 5)
    if kind in (OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3):
        return CostReport(0, 0, 1, 1)
    if kind in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5):
        k = 3 if kind == OpKind.SEP_CONV_3X3 else 5
        pad = k // 2
        oh1, ow1 = out_dim(h, k, stride, pad, 1), out_dim(w, k, stride, pad, 1)
        params = 2 * (c * k * k + c * c) + 2 * bn
        macs = _conv_macs(c, c, k, k, c, oh1, ow1) + _conv_macs(c, c, 1, 1, 1, oh1, ow1)
        macs += _conv_macs(c, c, k, k, c, oh1, ow1) + _conv_macs(c, c, 1, 1, 1, oh1, ow1)
        return CostReport(params, macs, 8, 8)
    if kind in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5):
        k = 3 if kind == OpKind.DIL_CONV_3X3 else 5
        pad = 2 * (k - 1) // 2
        oh, ow = out_dim(h, k, stride, pad, 2), out_dim(w, k, stride, pad, 2)
        params = c * k * k + c * c + bn
        macs = _conv_macs(c, c, k, k, c, oh, ow) + _conv_macs(c, c, 1, 1, 1, oh, ow)
        return CostReport(params, macs, 4, 4)
    if kind == OpKind.CONV_1X7_7X1:
        oh_a, ow_a = out_dim(h, 1, stride, 0, 1), out_dim(w, 7, 1, 3, 1)
        oh_b, ow_b = out_dim(oh_a, 7, 1, 3, 1), out_dim(ow_a, 1, stride, 0, 1)
        params = 7 * c * c + 7 * c * c + bn
        macs = _conv_macs(c, c, 1, 7, 1, oh_a, ow_a) + _conv_macs(c, c, 7, 1, 1, oh_b, ow_b)
        return CostReport(params, macs, 4, 4)
    raise ValueError(f"unknown op kind {kind!r}")


def cost_table_csv(kinds, channels, h, w, stride=1, affine=False):
    """CSV rows: kind, channels, stride, params, macs, seq_depth, activations."""
    lines = ["kind,channels,stride,params,macs,seq_depth,activations"]
    for kind in kinds:
        r = op_cost(kind, channels, h, w, stride, affine)
        lines.append(f"{kind.value},{channels},{stride},{r.params},{r.macs},{r.seq_depth},{r.activations}")
    return "\n".join(lines) + "\n"

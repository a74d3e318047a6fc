"""Continuous super-network: cell DAGs with softmax-mixed candidate ops.

Every edge of a cell carries all surviving candidate operations; the edge
output is the convex combination of the candidates' outputs under the
softmax of that edge's architecture logits. Architecture logits live in an
:class:`AlphaTable` owned by the caller (they survive network rebuilds
across search stages), so ``forward`` takes them as an argument.
"""

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .blocks import ClassifierHead, FactorizedReduce, Module, ReLUConvBN, Stem
from .opspace import DROPOUT_KINDS, CostReport, instantiate, op_cost
from .tensor import Parameter, ShapeMismatchError


@dataclass(frozen=True)
class CellTopology:
    """DAG wiring: node i receives one edge from every j in {-2, -1, 0..i-1}."""

    n_nodes: int = 4

    def edges(self):
        return [(i, j) for i in range(self.n_nodes) for j in range(-2, i)]

    @property
    def n_edges(self):
        return sum(i + 2 for i in range(self.n_nodes))

    @property
    def concat(self):
        return tuple(range(self.n_nodes))


@dataclass
class NetworkPlan:
    """Stacking recipe shared by the super-network and evaluation networks."""

    l_cells: int
    init_channels: int
    n_classes: int
    in_time: int = 16
    in_freq: int = 40
    head_widths: tuple = (256,)
    n_nodes: int = 4

    def __post_init__(self):
        if self.l_cells < 3:
            raise ValueError(f"need at least 3 cells for two distinct reductions, got {self.l_cells}")
        if self.init_channels < 1 or self.n_classes < 2:
            raise ValueError("init_channels must be >= 1 and n_classes >= 2")
        if self.in_time % 4 or self.in_freq % 4:
            raise ValueError(f"input time/freq must be divisible by 4, got {self.in_time}x{self.in_freq}")

    def reduction_positions(self):
        return (self.l_cells // 3, (2 * self.l_cells) // 3)


class AlphaTable:
    """Architecture logits: one vector per (cell type, edge), shared by cells."""

    def __init__(self, tables):
        self.tables = tables  # cell_type -> list[Parameter]

    @classmethod
    def random_init(cls, space, rng, scale=1e-3):
        return cls(
            {
                ct: [Parameter(scale * rng.standard_normal(len(cands))) for cands in space.per_edge[ct]]
                for ct in space.per_edge
            }
        )

    def for_type(self, cell_type):
        return self.tables[cell_type]

    def parameters(self):
        for ct in sorted(self.tables):
            yield from self.tables[ct]

    def as_arrays(self):
        return {ct: [p.data.copy() for p in plist] for ct, plist in self.tables.items()}

    @classmethod
    def from_arrays(cls, arrays):
        return cls({ct: [Parameter(np.asarray(a, dtype=np.float64)) for a in plist] for ct, plist in arrays.items()})

    def validate_against(self, space):
        for ct, plist in self.tables.items():
            sizes = space.sizes(ct)
            if len(plist) != len(sizes):
                raise ValueError(f"{ct}: {len(plist)} alpha rows for {len(sizes)} edges")
            for e, (p, size) in enumerate(zip(plist, sizes)):
                if p.shape != (size,):
                    raise ValueError(f"{ct} edge {e}: alpha has {p.shape[0]} columns, space has {size}")
                if not np.isfinite(p.data).all():
                    raise ValueError(f"{ct} edge {e}: non-finite alpha logits")


def mixed_forward(x, alpha, ops):
    """Softmax-weighted sum of candidate outputs on one edge."""
    if alpha.shape != (len(ops),):
        raise ShapeMismatchError(f"{len(ops)} candidate ops but alpha shape {alpha.shape}")
    outs = [op(x) for op in ops]
    return F.weighted_sum(outs, F.softmax(alpha))


class MixedOp(Module):
    def __init__(self, candidates, channels, stride, rng, affine=False):
        self.kinds = tuple(candidates)
        self.ops = [instantiate(k, channels, stride, rng, affine) for k in self.kinds]

    def forward(self, x, alpha, dropout_rate=0.0, dropout_rng=None):
        if alpha.shape != (len(self.ops),):
            raise ShapeMismatchError(f"{len(self.ops)} candidate ops but alpha shape {alpha.shape}")
        outs = []
        for kind, op in zip(self.kinds, self.ops):
            y = op(x)
            if dropout_rate > 0.0 and kind in DROPOUT_KINDS:
                y = F.dropout(y, dropout_rate, dropout_rng)
            outs.append(y)
        return F.weighted_sum(outs, F.softmax(alpha))


class SearchCell(Module):
    """One cell of the super-network; holds a MixedOp per topology edge."""

    def __init__(self, topology, edge_candidates, c_pp, c_p, channels, reduction, reduction_prev, rng, affine=False):
        self.topology = topology
        self.reduction = reduction
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, channels, rng, affine)
        else:
            self.preprocess0 = ReLUConvBN(c_pp, channels, 1, 1, 0, rng, affine)
        self.preprocess1 = ReLUConvBN(c_p, channels, 1, 1, 0, rng, affine)
        self.mixed_ops = []
        for (i, j), cands in zip(topology.edges(), edge_candidates):
            stride = 2 if reduction and j < 0 else 1
            self.mixed_ops.append(MixedOp(cands, channels, stride, rng, affine))

    def forward(self, s0, s1, edge_alphas, dropout_rate=0.0, dropout_rng=None):
        s0 = self.preprocess0(s0)
        s1 = self.preprocess1(s1)
        if self.reduction and (s1.shape[2] % 2 or s1.shape[3] % 2):
            raise ValueError(
                f"reduction cell needs even time/freq to halve, got {s1.shape[2]}x{s1.shape[3]}"
            )
        states = [s0, s1]
        edge = 0
        for i in range(self.topology.n_nodes):
            terms = []
            for j in range(-2, i):
                out = self.mixed_ops[edge](states[j + 2], edge_alphas[edge], dropout_rate, dropout_rng)
                terms.append(out)
                edge += 1
            states.append(F.add_n(terms))
        return F.concat(states[2:], axis=1)


class SuperNetwork(Module):
    """Stem, stacked mixed cells (two reductions), and the per-frame FC head."""

    def __init__(self, plan, space, rng, topology=None):
        space.validate()
        self.plan = plan
        self.space = space
        self.topology = topology or CellTopology(plan.n_nodes)
        if self.topology.n_edges != space.n_edges("normal"):
            raise ValueError(
                f"space has {space.n_edges('normal')} edges per cell, topology needs {self.topology.n_edges}"
            )
        self.stem = Stem(plan.init_channels, rng)
        reductions = plan.reduction_positions()
        c_pp = c_p = plan.init_channels
        c_curr = plan.init_channels
        reduction_prev = False
        self.cells = []
        self.cell_types = []
        for i in range(plan.l_cells):
            reduction = i in reductions
            if reduction:
                c_curr *= 2
            cell_type = "reduction" if reduction else "normal"
            cell = SearchCell(
                self.topology,
                space.per_edge[cell_type],
                c_pp,
                c_p,
                c_curr,
                reduction,
                reduction_prev,
                rng,
                affine=False,
            )
            self.cells.append(cell)
            self.cell_types.append(cell_type)
            reduction_prev = reduction
            c_pp, c_p = c_p, self.topology.n_nodes * c_curr
        self.final_channels = c_p
        self.head = ClassifierHead(self.final_channels * (plan.in_freq // 4), plan.head_widths, plan.n_classes, rng)

    def forward(self, x, alphas, dropout_rate=0.0, dropout_rng=None):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatchError(f"expected (batch, 3, time, freq) input, got {x.shape}")
        if x.shape[2] % 4:
            raise ValueError(f"input time length {x.shape[2]} not divisible by 4 (two halvings required)")
        s0 = s1 = self.stem(x)
        for cell, cell_type in zip(self.cells, self.cell_types):
            s0, s1 = s1, cell(s0, s1, alphas.for_type(cell_type), dropout_rate, dropout_rng)
        return self.head(s1)

    def new_alphas(self, rng, scale=1e-3):
        return AlphaTable.random_init(self.space, rng, scale)

    def cost_report(self):
        """Analytic parameter/MAC tally; must equal the instantiated counts."""
        return _network_cost_from_layout(self.plan, self._edge_layout(), affine=False)

    def _edge_layout(self):
        """Per cell: (cell_type, list of (kinds, stride) per edge)."""
        layout = []
        for cell_type in self.cell_types:
            edges = []
            for (i, j), cands in zip(self.topology.edges(), self.space.per_edge[cell_type]):
                stride = 2 if cell_type == "reduction" and j < 0 else 1
                edges.append((tuple(cands), stride, j))
            layout.append((cell_type, edges))
        return layout


def _network_cost_from_layout(plan, layout, affine):
    """Shared analytic cost model for super and evaluation networks.

    ``layout`` holds, per cell, the cell type plus every edge as
    (op kinds, stride, source index). Stem BN is always affine;
    cell-internal BNs (ops and preprocessing) are affine only when
    ``affine`` is set. ``seq_depth`` follows the longest sequential path,
    ``activations`` counts materialized intermediate tensors.
    """
    c = plan.init_channels
    t, f = plan.in_time, plan.in_freq
    params = 3 * c * 9 + 2 * c  # stem conv + affine BN
    macs = 3 * c * 9 * t * f
    seq = 2
    acts = 2
    bn = (lambda ch: 2 * ch) if affine else (lambda ch: 0)
    c_pp = c_p = c
    c_curr = c
    t_p, f_p = t, f
    reductions = plan.reduction_positions()
    reduction_prev = False
    for idx, (cell_type, edges) in enumerate(layout):
        reduction = cell_type == "reduction"
        assert reduction == (idx in reductions)
        if reduction:
            c_curr *= 2
        # both preprocess paths project to the working width at s1's resolution
        if reduction_prev:
            params += 2 * (c_pp * (c_curr // 2)) + bn(c_curr)
            macs += c_pp * c_curr * t_p * f_p
            acts += 5
        else:
            params += c_pp * c_curr + bn(c_curr)
            macs += c_pp * c_curr * t_p * f_p
            acts += 3
        params += c_p * c_curr + bn(c_curr)
        macs += c_p * c_curr * t_p * f_p
        acts += 3
        t_out, f_out = (t_p // 2, f_p // 2) if reduction else (t_p, f_p)
        max_edge_depth = 0
        for kinds, stride, j in edges:
            if reduction and j >= 0:
                eh, ew = t_out, f_out  # source already reduced inside this cell
            else:
                eh, ew = t_p, f_p
            for kind in kinds:
                r = op_cost(kind, c_curr, eh, ew, stride, affine=affine)
                params += r.params
                macs += r.macs
                acts += r.activations
                max_edge_depth = max(max_edge_depth, r.seq_depth)
        seq += 3 + max_edge_depth + 1  # preprocess, deepest edge, node sum
        acts += plan.n_nodes + 1  # node sums and the concat
        reduction_prev = reduction
        c_pp, c_p = c_p, plan.n_nodes * c_curr
        t_p, f_p = t_out, f_out
    # head: hidden FC layers + class projection applied per frame, then the
    # frame average
    widths = [c_p * f_p, *plan.head_widths, plan.n_classes]
    for a, b in zip(widths, widths[1:]):
        params += a * b + b
        macs += a * b * t_p
    seq += len(widths) - 1 + 1
    acts += len(widths) - 1 + 1
    return CostReport(params, macs, seq, acts)

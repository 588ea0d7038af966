"""Factor graph neural network layers.

One FGNN layer is a Variable-to-Factor (VF) step followed by a
Factor-to-Variable (FV) step. Each step computes, per edge (c, i),

    Q(t_ci) @ M([g_c, f_i])

where M maps the concatenated factor and node features to length n and
Q maps the edge feature to an m x n matrix (emitted row-major), then
aggregates with an elementwise max over the factor's variables (VF) or
the variable's factors (FV). The FV step of a layer sees the factor
features the VF step just produced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .autodiff import bilinear_weights
from .errors import ShapeError, StructureError
from .numkit import DenseNet, apply_activation, net_forward, net_from_json, net_to_json
from .pgm import FactorGraph

PARAMS_FORMAT = "fgnn-params-v1"


@dataclass(frozen=True)
class Topology:
    """Bipartite edge structure, stripped of potentials.

    ``edge_factor[e]`` and ``edge_var[e]`` give the endpoints of edge e.
    Disjoint unions of topologies are used to batch several graphs.
    """

    n_vars: int
    n_factors: int
    edge_factor: np.ndarray
    edge_var: np.ndarray

    @classmethod
    def from_graph(cls, g: FactorGraph) -> "Topology":
        ef = np.array([c for c, _ in g.edges], dtype=np.int64)
        ev = np.array([i for _, i in g.edges], dtype=np.int64)
        return cls(g.n_variables, len(g.factors), ef, ev)

    @classmethod
    def union(cls, parts: Sequence["Topology"]) -> "Topology":
        ef, ev = [], []
        nv = nf = 0
        for t in parts:
            ef.append(t.edge_factor + nf)
            ev.append(t.edge_var + nv)
            nv += t.n_vars
            nf += t.n_factors
        return cls(nv, nf, np.concatenate(ef), np.concatenate(ev))

    @property
    def n_edges(self) -> int:
        return self.edge_factor.size

    def groups(self, by: str) -> tuple[np.ndarray, np.ndarray]:
        """Edge order sorted by target and segment starts for reduceat.

        Raises StructureError when some target has no incident edge.
        """
        key, count, name = ((self.edge_factor, self.n_factors, "factor") if by == "factor"
                            else (self.edge_var, self.n_vars, "variable"))
        order = np.argsort(key, kind="stable")
        counts = np.bincount(key, minlength=count)
        if count and counts.min() == 0:
            raise StructureError(f"{name} {int(np.argmin(counts))} has no incident edge")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        return order, starts


def _as_topology(g) -> Topology:
    return g if isinstance(g, Topology) else Topology.from_graph(g)


@dataclass(frozen=True)
class FeatureSet:
    """Node features f_i, factor features g_c and edge features t_ci as 2-D arrays."""

    node: np.ndarray
    factor: np.ndarray
    edge: np.ndarray

    def __post_init__(self):
        for name in ("node", "factor", "edge"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.ndim != 2:
                raise ShapeError(f"{name} features must be 2-D, got shape {a.shape}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def concat(cls, parts: Sequence["FeatureSet"]) -> "FeatureSet":
        return cls(np.concatenate([p.node for p in parts]),
                   np.concatenate([p.factor for p in parts]),
                   np.concatenate([p.edge for p in parts]))

    def to_json(self) -> dict:
        return {"node": self.node.tolist(), "factor": self.factor.tolist(), "edge": self.edge.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSet":
        def arr(rows):
            a = np.array(rows, dtype=np.float64)
            return a.reshape(len(rows), -1) if a.ndim != 2 else a
        return cls(arr(obj["node"]), arr(obj["factor"]), arr(obj["edge"]))


@dataclass(frozen=True)
class FgnnLayerParams:
    vf_M: DenseNet
    vf_Q: DenseNet
    fv_M: DenseNet
    fv_Q: DenseNet
    vf_m: int
    vf_n: int
    fv_m: int
    fv_n: int

    def __post_init__(self):
        for side in ("vf", "fv"):
            M, Q = getattr(self, f"{side}_M"), getattr(self, f"{side}_Q")
            m, n = getattr(self, f"{side}_m"), getattr(self, f"{side}_n")
            if M.out_dim != n:
                raise ShapeError(f"{side} M emits {M.out_dim} values, expected n={n}")
            if Q.out_dim != m * n:
                raise ShapeError(f"{side} Q emits {Q.out_dim} values, expected m*n={m * n}")
            if Q.in_dim != self.vf_Q.in_dim:
                raise ShapeError("VF and FV Q nets must read the same edge features")


def edge_products(M: DenseNet, Q: DenseNet, m: int, n: int, factor_rows: np.ndarray,
                  node_rows: np.ndarray, edge_rows: np.ndarray) -> np.ndarray:
    """``Q(t_e) @ M([g, f])`` for every edge row; shape (E, m)."""
    x = np.concatenate([factor_rows, node_rows], axis=1)
    if x.shape[1] != M.in_dim:
        raise ShapeError(f"M takes {M.in_dim} inputs, [g_c, f_i] has {x.shape[1]}")
    if edge_rows.shape[1] != Q.in_dim:
        raise ShapeError(f"Q takes {Q.in_dim} inputs, edge features have {edge_rows.shape[1]}")
    mv = net_forward(M, x)
    if Q.depth == 1 and Q.layers[0].activation == "identity":
        # linear Q: contract against the stacked weight blocks instead
        layer = Q.layers[0]
        wcat = bilinear_weights(layer.weight, layer.bias, m, n)
        tt = np.concatenate([edge_rows, np.ones((edge_rows.shape[0], 1))], axis=1)
        prod = (mv @ wcat).reshape(-1, tt.shape[1], m)
        return np.matmul(tt[:, None, :], prod)[:, 0, :]
    qm = net_forward(Q, edge_rows).reshape(-1, m, n)
    return np.einsum("emn,en->em", qm, mv)


def segment_max(values: np.ndarray, order: np.ndarray, starts: np.ndarray) -> np.ndarray:
    if values.shape[0] == 0:
        return np.zeros((0,) + values.shape[1:])
    return np.maximum.reduceat(values[order], starts, axis=0)


def _check_rows(top: Topology, feats: FeatureSet):
    if feats.node.shape[0] != top.n_vars or feats.factor.shape[0] != top.n_factors \
            or feats.edge.shape[0] != top.n_edges:
        raise ShapeError("feature row counts do not match the graph")


def vf_layer(g, feats: FeatureSet, p: FgnnLayerParams) -> np.ndarray:
    """New factor features: max over i in s(c) of Q_VF(t_ci) M_VF([g_c, f_i])."""
    top = _as_topology(g)
    _check_rows(top, feats)
    order, starts = top.groups("factor")
    prod = edge_products(p.vf_M, p.vf_Q, p.vf_m, p.vf_n, feats.factor[top.edge_factor],
                         feats.node[top.edge_var], feats.edge)
    return segment_max(prod, order, starts)


def fv_layer(g, feats: FeatureSet, p: FgnnLayerParams) -> np.ndarray:
    """New node features: max over c containing i of Q_FV(t_ci) M_FV([g_c, f_i])."""
    top = _as_topology(g)
    _check_rows(top, feats)
    order, starts = top.groups("variable")
    prod = edge_products(p.fv_M, p.fv_Q, p.fv_m, p.fv_n, feats.factor[top.edge_factor],
                         feats.node[top.edge_var], feats.edge)
    return segment_max(prod, order, starts)


@dataclass(frozen=True)
class FgnnLayer:
    params: FgnnLayerParams
    activation: str = "identity"


@dataclass(frozen=True)
class DenseStep:
    """Per-element dense nets on node and factor features; None leaves a family as is."""

    node: DenseNet | None = None
    factor: DenseNet | None = None


@dataclass(frozen=True)
class Residual:
    """``inner(x) + proj(x)``; a missing projection means identity."""

    inner: tuple
    node_proj: DenseNet | None = None
    factor_proj: DenseNet | None = None


Step = Union[FgnnLayer, DenseStep, Residual]


@dataclass(frozen=True)
class FgnnStack:
    layers: tuple = ()
    readout: DenseNet | None = None


def fgnn_layer_forward(top: Topology, feats: FeatureSet, layer: FgnnLayer) -> FeatureSet:
    new_factor = apply_activation(vf_layer(top, feats, layer.params), layer.activation)
    mid = FeatureSet(feats.node, new_factor, feats.edge)
    new_node = apply_activation(fv_layer(top, mid, layer.params), layer.activation)
    return FeatureSet(new_node, new_factor, feats.edge)


def _apply(net: DenseNet | None, x: np.ndarray) -> np.ndarray:
    return x if net is None else net_forward(net, x)


def step_forward(top: Topology, feats: FeatureSet, step) -> FeatureSet:
    if isinstance(step, FgnnLayer):
        return fgnn_layer_forward(top, feats, step)
    if isinstance(step, DenseStep):
        return FeatureSet(_apply(step.node, feats.node), _apply(step.factor, feats.factor), feats.edge)
    if isinstance(step, Residual):
        out = feats
        for inner in step.inner:
            out = step_forward(top, out, inner)
        skip_node = _apply(step.node_proj, feats.node)
        skip_factor = _apply(step.factor_proj, feats.factor)
        if skip_node.shape != out.node.shape or skip_factor.shape != out.factor.shape:
            raise ShapeError("residual branch and skip connection widths differ")
        return FeatureSet(out.node + skip_node, out.factor + skip_factor, feats.edge)
    raise TypeError(f"unknown stack step {type(step).__name__}")


def stack_forward(s: FgnnStack, g, feats: FeatureSet) -> FeatureSet:
    """Apply every step in order, then the readout to node features."""
    top = _as_topology(g)
    _check_rows(top, feats)
    for step in s.layers:
        feats = step_forward(top, feats, step)
    if s.readout is not None:
        feats = FeatureSet(net_forward(s.readout, feats.node), feats.factor, feats.edge)
    return feats


# -- perfect matchings and the pairwise (MPNN) form -------------------------

@dataclass(frozen=True)
class Matching:
    """Bijection between variable positions and factor positions with i in s(h(i))."""

    var_to_factor: tuple[int, ...]
    factor_to_var: tuple[int, ...] = field(default=None)

    def __post_init__(self):
        v2f = tuple(int(c) for c in self.var_to_factor)
        f2v = [None] * len(v2f)
        for i, c in enumerate(v2f):
            if not 0 <= c < len(v2f) or f2v[c] is not None:
                raise StructureError("matching is not a bijection")
            f2v[c] = i
        object.__setattr__(self, "var_to_factor", v2f)
        object.__setattr__(self, "factor_to_var", tuple(f2v))

    def check(self, g: FactorGraph):
        if len(self.var_to_factor) != g.n_variables or len(g.factors) != g.n_variables:
            raise StructureError("matching does not cover every variable and factor")
        for i, c in enumerate(self.var_to_factor):
            if i not in g.scopes[c]:
                raise StructureError(f"variable {i} is not in the scope of its matched factor {c}")


def find_perfect_matching(g: FactorGraph) -> Matching | None:
    """Maximum bipartite matching by augmenting paths; None unless perfect."""
    n, nf = g.n_variables, len(g.factors)
    if n != nf:
        return None
    adj = [[] for _ in range(n)]
    for c, i in g.edges:
        adj[i].append(c)
    match_f = [-1] * nf
    match_v = [-1] * n
    for root in range(n):
        # breadth-first search for an alternating path to a free factor
        reached_from = {}
        queue = [root]
        free = -1
        for i in queue:
            for c in adj[i]:
                if c in reached_from:
                    continue
                reached_from[c] = i
                if match_f[c] < 0:
                    free = c
                    break
                queue.append(match_f[c])
            if free >= 0:
                break
        if free < 0:
            return None
        c = free
        while c >= 0:
            i = reached_from[c]
            nxt = match_v[i]
            match_f[c], match_v[i] = i, c
            c = nxt
    return Matching(tuple(match_v))


@dataclass(frozen=True)
class MpnnLayer:
    """An FGNN layer rewritten as max-aggregation message passing between
    super-nodes [g_{h(i)}, f_i].

    The neighbours of super-node i are all j with j in s(h(i)) or
    i in s(h(j)). A 0/1 tag masks pairs that are not edges of the
    factor graph; products are lifted to be positive before masking and
    lowered again after aggregation so masked zeros never win.
    """

    matching: Matching
    params: FgnnLayerParams
    neighbours: tuple[tuple[int, ...], ...]
    edge_index: dict

    def forward(self, feats: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
        """Returns (factor features in factor order, node features)."""
        h = self.matching.var_to_factor
        p = self.params
        dt = feats.edge.shape[1]
        src, dst = [], []
        for i, nb in enumerate(self.neighbours):
            for j in nb:
                dst.append(i)
                src.append(j)
        src = np.array(src, dtype=np.int64)
        dst = np.array(dst, dtype=np.int64)
        hv = np.array(h, dtype=np.int64)

        def pair_rows(c_arr, i_arr):
            e = np.array([self.edge_index.get((int(c), int(i)), -1) for c, i in zip(c_arr, i_arr)])
            tag = (e >= 0).astype(np.float64)
            t = np.where(tag[:, None] > 0, feats.edge[np.maximum(e, 0)], np.zeros(dt))
            return t, tag

        # VF block at super-node i: factor h(i) listens to variable j
        t_vf, tag_vf = pair_rows(hv[dst], src)
        vf = edge_products(p.vf_M, p.vf_Q, p.vf_m, p.vf_n, feats.factor[hv[dst]], feats.node[src], t_vf)
        # FV block at super-node i: variable i listens to factor h(j)
        t_fv, tag_fv = pair_rows(hv[src], dst)
        fv = edge_products(p.fv_M, p.fv_Q, p.fv_m, p.fv_n, feats.factor[hv[src]], feats.node[dst], t_fv)

        order = np.argsort(dst, kind="stable")
        starts = np.concatenate([[0], np.cumsum(np.bincount(dst, minlength=len(h)))[:-1]])
        out = []
        for prod, tag in ((vf, tag_vf), (fv, tag_fv)):
            real = prod[tag > 0]
            lift = max(0.0, 1.0 - float(real.min())) if real.size else 0.0
            masked = tag[:, None] * (prod + lift)
            out.append(segment_max(masked, order, starts) - lift)
        super_factor, super_node = out
        factor_out = super_factor[np.array(self.matching.factor_to_var)]
        return factor_out, super_node


def mpnn_transform(g: FactorGraph, h: Matching, p: FgnnLayerParams) -> MpnnLayer:
    h.check(g)
    scopes = g.scopes
    n = g.n_variables
    neighbours = []
    for i in range(n):
        nb = set(scopes[h.var_to_factor[i]])
        nb.update(j for j in range(n) if i in scopes[h.var_to_factor[j]])
        neighbours.append(tuple(sorted(nb)))
    edge_index = {edge: e for e, edge in enumerate(g.edges)}
    return MpnnLayer(h, p, tuple(neighbours), edge_index)


# -- serialisation ----------------------------------------------------------

def _opt_net(net):
    return None if net is None else net_to_json(net)


def _opt_net_from(obj):
    return None if obj is None else net_from_json(obj)


def _step_to_json(step) -> dict:
    if isinstance(step, FgnnLayer):
        p = step.params
        return {"type": "fgnn", "activation": step.activation,
                "vf": {"m": p.vf_m, "n": p.vf_n, "M": net_to_json(p.vf_M), "Q": net_to_json(p.vf_Q)},
                "fv": {"m": p.fv_m, "n": p.fv_n, "M": net_to_json(p.fv_M), "Q": net_to_json(p.fv_Q)}}
    if isinstance(step, DenseStep):
        return {"type": "dense", "node": _opt_net(step.node), "factor": _opt_net(step.factor)}
    if isinstance(step, Residual):
        return {"type": "residual", "inner": [_step_to_json(s) for s in step.inner],
                "node_proj": _opt_net(step.node_proj), "factor_proj": _opt_net(step.factor_proj)}
    raise TypeError(type(step).__name__)


def _step_from_json(obj: dict):
    kind = obj["type"]
    if kind == "fgnn":
        vf, fv = obj["vf"], obj["fv"]
        params = FgnnLayerParams(net_from_json(vf["M"]), net_from_json(vf["Q"]),
                                 net_from_json(fv["M"]), net_from_json(fv["Q"]),
                                 vf["m"], vf["n"], fv["m"], fv["n"])
        return FgnnLayer(params, obj["activation"])
    if kind == "dense":
        return DenseStep(_opt_net_from(obj["node"]), _opt_net_from(obj["factor"]))
    if kind == "residual":
        return Residual(tuple(_step_from_json(s) for s in obj["inner"]),
                        _opt_net_from(obj["node_proj"]), _opt_net_from(obj["factor_proj"]))
    raise ValueError(f"unknown layer type {kind!r}")


def stack_to_json(s: FgnnStack) -> dict:
    return {"format": PARAMS_FORMAT, "layers": [_step_to_json(x) for x in s.layers],
            "readout": _opt_net(s.readout)}


def stack_from_json(obj: dict) -> FgnnStack:
    if obj.get("format") != PARAMS_FORMAT:
        raise ValueError(f"expected format {PARAMS_FORMAT!r}, got {obj.get('format')!r}")
    return FgnnStack(tuple(_step_from_json(x) for x in obj["layers"]), _opt_net_from(obj["readout"]))


def save_stack(s: FgnnStack, path) -> None:
    with open(path, "w") as fh:
        json.dump(stack_to_json(s), fh)


def load_stack(path) -> FgnnStack:
    with open(path) as fh:
        return stack_from_json(json.load(fh))

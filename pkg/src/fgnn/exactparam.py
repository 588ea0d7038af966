"""Hand-built FGNN parameters that reproduce max-product exactly.

The emulator for ``k`` iterations is one decomposition layer, ``k``
iteration layers and a linear readout:

* the decomposition layer turns factor features (flattened tables) into
  the per-variable tables ``phi_ic(x_i, z_c)`` of :mod:`fgnn.decomp`;
* each iteration layer's VF step computes max-marginals
  ``mu_p(z) = max_x [phi_p(x, z) + b(x)]`` with a ReLU max-net inside M
  and routes them into disjoint blocks with Q; its FV step forms
  ``sum_{p' != p} mu_p'(z)``, takes ``max_z`` with another max-net and
  routes the result into one block per incident factor;
* the readout adds those blocks to the unary potential.

Each summation needs max aggregation to be lossless, so inputs must be
non-negative: unary potentials >= 0 and factor potentials >= 1
(see :func:`prepare_graph`).

Feature layouts (padded to the largest factor/variable in the graph):

    factor: Phi[p, x, z] (R*Kx*Zx) | U[p, z] (R*Zx)
    node:   theta[x] (Kx)         | V[d, x] (Dx*Kx)

with R the largest scope, Kx the largest cardinality, Zx the largest
joint table and Dx the largest variable degree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decomp import decompose_factor
from .errors import CapacityError, DomainError, StructureError
from .layers import FeatureSet, FgnnLayer, FgnnLayerParams, FgnnStack, stack_forward
from .maxprod import belief_offsets
from .numkit import DenseLayer, DenseNet, linear, parallel, passthrough_net, precompose
from .pgm import FactorGraph, offset_graph

MAX_EMULATOR_PARAMS = 50_000_000


def build_max_net(n: int) -> DenseNet:
    """ReLU net computing max of ``n`` inputs by a pairwise tournament.

    Each round uses max(a, b) = relu(a - b) + relu(b) - relu(-b) for
    pairs and relu(x) - relu(-x) to carry an odd element, as one ReLU
    layer followed by one linear layer.
    """
    if n < 1:
        raise ValueError("max-net needs at least one input")
    layers = []
    width = n
    while width > 1:
        pairs, odd = divmod(width, 2)
        hidden = 3 * pairs + 2 * odd
        if hidden > 2 * n:
            raise AssertionError(f"round width {hidden} exceeds 2n={2 * n}")
        w1 = np.zeros((hidden, width))
        w2 = np.zeros((pairs + odd, hidden))
        for k in range(pairs):
            a, b, h = 2 * k, 2 * k + 1, 3 * k
            w1[h, a], w1[h, b] = 1.0, -1.0
            w1[h + 1, b] = 1.0
            w1[h + 2, b] = -1.0
            w2[k, h:h + 3] = (1.0, 1.0, -1.0)
        if odd:
            h = 3 * pairs
            w1[h, width - 1] = 1.0
            w1[h + 1, width - 1] = -1.0
            w2[pairs, h:h + 2] = (1.0, -1.0)
        layers.append(DenseLayer(w1, np.zeros(hidden), "relu"))
        layers.append(DenseLayer(w2, np.zeros(pairs + odd), "identity"))
        width = pairs + odd
    net = DenseNet(tuple(layers), n)
    if net.depth != 2 * math.ceil(math.log2(n)):
        raise AssertionError("max-net depth does not match 2*ceil(log2 n)")
    return net


@dataclass(frozen=True)
class SumViaMaxGadget:
    """Routing tensor ``w`` (m, n, m*n) and summing matrix ``q`` (n, m*n).

    ``w[i]`` sends row i of an m x n matrix into the i-th block of a
    length m*n vector; after an elementwise max over rows, ``q`` adds
    the blocks back together.
    """

    w: np.ndarray
    q: np.ndarray

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def n(self) -> int:
        return self.w.shape[1]

    def route(self, X) -> np.ndarray:
        """Per-row intermediate vectors y[i, k] = sum_j X[i, j] w[i, j, k]."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape != (self.m, self.n):
            raise ValueError(f"expected a {self.m}x{self.n} matrix, got {X.shape}")
        if np.any(X < 0):
            raise DomainError("sum-via-max routing is only lossless for non-negative inputs")
        return np.einsum("ij,ijk->ik", X, self.w)

    def apply(self, X) -> np.ndarray:
        """Column sums of X computed as q @ max_i y[i]."""
        return self.q @ self.route(X).max(axis=0)


def build_sum_via_max(m: int, n: int) -> SumViaMaxGadget:
    w = np.zeros((m, n, m * n))
    for i in range(m):
        w[i, np.arange(n), i * n + np.arange(n)] = 1.0
    q = np.tile(np.eye(n), (1, m))
    w.setflags(write=False)
    q.setflags(write=False)
    return SumViaMaxGadget(w, q)


@dataclass(frozen=True)
class EmulatorLayout:
    """Padded feature sizes and index maps shared by every emulator layer."""

    R: int
    Kx: int
    Zx: int
    Dx: int
    n_edges: int

    @classmethod
    def for_graph(cls, g: FactorGraph) -> "EmulatorLayout":
        if not g.factors:
            raise StructureError("the emulator needs at least one factor")
        degrees = [len(inc) for inc in g.incident]
        if min(degrees) == 0:
            raise StructureError(f"variable {g.variables[degrees.index(0)].id} is in no factor")
        return cls(R=max(len(s) for s in g.scopes),
                   Kx=max(g.cardinalities),
                   Zx=max(f.log_potential.size for f in g.factors),
                   Dx=max(degrees),
                   n_edges=len(g.edges))

    @property
    def phi_dim(self) -> int:
        return self.R * self.Kx * self.Zx

    @property
    def factor_dim(self) -> int:
        return self.phi_dim + self.R * self.Zx

    @property
    def node_dim(self) -> int:
        return self.Kx + self.Dx * self.Kx

    def phi(self, p, x, z):
        return (p * self.Kx + x) * self.Zx + z

    def u(self, p, z):
        return self.phi_dim + p * self.Zx + z

    def v(self, d, x):
        return self.Kx + d * self.Kx + x


def _edge_info(g: FactorGraph):
    """Per edge: (factor pos, var pos, position in scope, slot among the variable's edges)."""
    slot = {}
    for inc in g.incident:
        for d, e in enumerate(inc):
            slot[e] = d
    info = []
    e = 0
    for c, scope in enumerate(g.scopes):
        for p, i in enumerate(scope):
            info.append((c, i, p, slot[e]))
            e += 1
    return info


def _one_hot_q(per_edge: list[np.ndarray]) -> DenseNet:
    """Linear Q net mapping the one-hot of edge e to the flattened matrix per_edge[e]."""
    cols = np.stack([a.reshape(-1) for a in per_edge], axis=1)
    return linear(cols)


def _constant_q(matrix: np.ndarray, n_edges: int) -> DenseNet:
    return linear(np.zeros((matrix.size, n_edges)), matrix.reshape(-1))


def _check_domain(g: FactorGraph):
    for v in g.variables:
        if v.log_potential.min() < 0:
            raise DomainError(f"variable {v.id}: unary log-potentials must be >= 0")
    for f in g.factors:
        if f.log_potential.values.min() < 1:
            raise DomainError(f"factor {f.id}: factor log-potentials must be >= 1")


def _check_capacity(lay: EmulatorLayout):
    n_vf = lay.R * lay.Zx + lay.phi_dim
    count = lay.factor_dim * n_vf * lay.n_edges
    if count > MAX_EMULATOR_PARAMS:
        raise CapacityError(f"emulator would need {count} Q weights (limit {MAX_EMULATOR_PARAMS})")


def prepare_graph(g: FactorGraph) -> FactorGraph:
    """Shift unaries to minimum 0 and factors to minimum 1; the MAP set is unchanged."""
    return offset_graph(g, unary=0.0, factor=1.0)


def recipe_features(g: FactorGraph) -> FeatureSet:
    """Input features for the emulator.

    Node i: theta_i padded to Kx. Factor c: its table flattened row-major,
    padded to Zx. Edge e: one-hot of the global edge index.
    """
    lay = EmulatorLayout.for_graph(g)
    node = np.zeros((g.n_variables, lay.Kx))
    for i, v in enumerate(g.variables):
        node[i, :v.cardinality] = v.log_potential
    factor = np.zeros((len(g.factors), lay.Zx))
    for c, f in enumerate(g.factors):
        factor[c, :f.log_potential.size] = f.log_potential.values
    return FeatureSet(node, factor, np.eye(lay.n_edges))


def _fill_value(g: FactorGraph) -> float:
    # below every penalty entry of every decomposed table
    return max(len(f.scope) * float(np.abs(f.log_potential.values).max()) + 1.0 for f in g.factors) + 1.0


def build_decomposition_layer(g: FactorGraph) -> tuple[FgnnLayerParams, EmulatorLayout]:
    """One FGNN layer writing every factor's decomposed tables into Phi.

    M_VF emits [g_c, 1]. For edge (c, i) with i at scope position p, Q_VF
    fills block p of Phi with theta_c(x^z)/r on matching entries and
    -P_c elsewhere, and every other Phi entry with a value below all
    penalties, so the max over the factor's edges keeps each block from
    its own edge. The FV step copies theta_i into the node layout.
    """
    _check_domain(g)
    lay = EmulatorLayout.for_graph(g)
    _check_capacity(lay)
    fill = _fill_value(g)
    n_in = lay.Zx + 1
    decomposed = [decompose_factor(f) for f in g.factors]

    mats = []
    for c, i, p, _ in _edge_info(g):
        f = g.factors[c]
        shape = f.log_potential.shape
        r, n_z = len(shape), f.log_potential.size
        penalty = decomposed[c].penalty
        config = np.unravel_index(np.arange(n_z), shape)[p]
        a = np.zeros((lay.factor_dim, n_in))
        a[:lay.phi_dim, lay.Zx] = -fill
        for x in range(shape[p]):
            for z in range(n_z):
                row = lay.phi(p, x, z)
                a[row, lay.Zx] = 0.0
                if config[z] == x:
                    a[row, z] = 1.0 / r
                else:
                    a[row, lay.Zx] = -penalty
        mats.append(a)
    copy_g = np.zeros((n_in, lay.Zx + lay.Kx))
    copy_g[:lay.Zx, :lay.Zx] = np.eye(lay.Zx)
    vf_M = linear(copy_g, np.r_[np.zeros(lay.Zx), 1.0])
    vf_Q = _one_hot_q(mats)

    fv_M = linear(np.hstack([np.zeros((lay.Kx, lay.factor_dim)), np.eye(lay.Kx)]))
    keep = np.zeros((lay.node_dim, lay.Kx))
    keep[:lay.Kx] = np.eye(lay.Kx)
    fv_Q = _constant_q(keep, lay.n_edges)
    params = FgnnLayerParams(vf_M, vf_Q, fv_M, fv_Q, lay.factor_dim, n_in, lay.node_dim, lay.Kx)
    return params, lay


def deblock_tables(g: FactorGraph, lay: EmulatorLayout, factor_features: np.ndarray) -> list[list[np.ndarray]]:
    """Per-factor, per-scope-variable (K_i, Z_c) tables read back out of Phi."""
    out = []
    for c, f in enumerate(g.factors):
        shape = f.log_potential.shape
        n_z = f.log_potential.size
        tables = []
        for p, k in enumerate(shape):
            rows = [[factor_features[c, lay.phi(p, x, z)] for z in range(n_z)] for x in range(k)]
            tables.append(np.array(rows))
        out.append(tables)
    return out


def _iteration_layer(g: FactorGraph, lay: EmulatorLayout) -> FgnnLayerParams:
    R, Kx, Zx, Dx = lay.R, lay.Kx, lay.Zx, lay.Dx
    in_dim = lay.factor_dim + lay.node_dim
    node0 = lay.factor_dim
    info = _edge_info(g)

    # VF: M emits [mu (R*Zx), Phi]; mu[p, z] = max_x Phi[p, x, z] + b(x),
    # b(x) = theta(x) + sum_d V[d, x]
    max_x = build_max_net(Kx)
    m_net = parallel([max_x] * (R * Zx) + [passthrough_net(lay.phi_dim, max_x.depth)])
    a = np.zeros((R * Zx * Kx + lay.phi_dim, in_dim))
    for p in range(R):
        for z in range(Zx):
            for x in range(Kx):
                row = (p * Zx + z) * Kx + x
                a[row, lay.phi(p, x, z)] = 1.0
                a[row, node0 + x] = 1.0
                for d in range(Dx):
                    a[row, node0 + lay.v(d, x)] = 1.0
    a[R * Zx * Kx:, :lay.phi_dim] = np.eye(lay.phi_dim)
    vf_M = precompose(m_net, a)
    n_vf = R * Zx + lay.phi_dim

    route_u = build_sum_via_max(R, Zx)
    mats = []
    for c, _, p, _ in info:
        n_z = g.factors[c].log_potential.size
        q = np.zeros((lay.factor_dim, n_vf))
        q[:lay.phi_dim, R * Zx:] = np.eye(lay.phi_dim)
        block = np.array(route_u.w[p]).T  # (R*Zx, Zx): mu_p into block p
        block[:, n_z:] = 0.0
        q[lay.phi_dim:, p * Zx:(p + 1) * Zx] = block
        mats.append(q)
    vf_Q = _one_hot_q(mats)

    # FV: M emits [nu (R*Kx), theta]; nu[p, x] = max_z Phi[p, x, z] + B_p(z),
    # B_p(z) = sum_p' U[p', z] - U[p, z]
    max_z = build_max_net(Zx)
    m_net = parallel([max_z] * (R * Kx) + [passthrough_net(Kx, max_z.depth)])
    a = np.zeros((R * Kx * Zx + Kx, in_dim))
    total = route_u.q  # (Zx, R*Zx)
    for p in range(R):
        for x in range(Kx):
            for z in range(Zx):
                row = (p * Kx + x) * Zx + z
                a[row, lay.phi(p, x, z)] = 1.0
                a[row, lay.phi_dim:lay.factor_dim] += total[z]
                a[row, lay.u(p, z)] -= 1.0
    a[R * Kx * Zx:, node0:node0 + Kx] = np.eye(Kx)
    fv_M = precompose(m_net, a)
    n_fv = R * Kx + Kx

    route_v = build_sum_via_max(Dx, Kx)
    mats = []
    for c, i, p, d in info:
        k = g.variables[i].cardinality
        q = np.zeros((lay.node_dim, n_fv))
        q[:Kx, R * Kx:] = np.eye(Kx)
        sel = np.zeros((Kx, n_fv))
        sel[:k, p * Kx:p * Kx + k] = np.eye(k)
        q[Kx:, :] = np.array(route_v.w[d]).T @ sel
        mats.append(q)
    fv_Q = _one_hot_q(mats)
    return FgnnLayerParams(vf_M, vf_Q, fv_M, fv_Q, lay.factor_dim, n_vf, lay.node_dim, n_fv)


def _readout(lay: EmulatorLayout) -> DenseNet:
    gadget = build_sum_via_max(lay.Dx, lay.Kx)
    return linear(np.hstack([np.eye(lay.Kx), gadget.q]))


def build_bp_emulator(g: FactorGraph, k: int) -> FgnnStack:
    """FGNN stack whose output on ``recipe_features(g)`` is the node beliefs
    after ``k`` decomposed max-product iterations (padded to Kx)."""
    if k < 0:
        raise ValueError("iteration count must be >= 0")
    decomp_params, lay = build_decomposition_layer(g)
    layers = [FgnnLayer(decomp_params)]
    if k:
        step = FgnnLayer(_iteration_layer(g, lay))
        layers.extend([step] * k)
    return FgnnStack(tuple(layers), _readout(lay))


def emulator_beliefs(g: FactorGraph, k: int) -> list[np.ndarray]:
    """Run the emulator on an already prepared graph and unpad the beliefs."""
    out = stack_forward(build_bp_emulator(g, k), g, recipe_features(g)).node
    return [out[i, :v.cardinality].copy() for i, v in enumerate(g.variables)]


def emulate_max_product(g: FactorGraph, k: int) -> tuple[list[np.ndarray], tuple]:
    """Max-product via the FGNN emulator on any graph.

    The graph is prepared, emulated, and the beliefs are shifted back
    to the scale of ``g``; the returned assignment decodes them.
    """
    prepared = prepare_graph(g)
    beliefs = emulator_beliefs(prepared, k)
    unary_shift = [float(v.log_potential.min()) for v in g.variables]
    factor_shift = [float(f.log_potential.values.min()) - 1.0 for f in g.factors]
    delta = belief_offsets(g, unary_shift, factor_shift, k)
    shifted = [b + dl for b, dl in zip(beliefs, delta)]
    return shifted, tuple(int(np.argmax(b)) for b in beliefs)


def recipe_to_json(g: FactorGraph, k: int) -> dict:
    """Sidecar describing how emulator input features are built."""
    lay = EmulatorLayout.for_graph(g)
    return {
        "format": "fgnn-emulator-recipe-v1",
        "iterations": k,
        "layout": {"R": lay.R, "Kx": lay.Kx, "Zx": lay.Zx, "Dx": lay.Dx, "n_edges": lay.n_edges},
        "node": "unary log-potential padded with zeros to Kx",
        "factor": "factor table flattened row-major in scope order, padded with zeros to Zx",
        "edge": "one-hot of the global edge index (factor-major, scope order)",
        "preparation": "unaries shifted to minimum 0, factors shifted to minimum 1",
    }

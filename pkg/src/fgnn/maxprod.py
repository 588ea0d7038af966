"""Synchronous max-product belief propagation on factor graphs.

Two equivalent update forms are provided. The direct form sends

    m_{c->i}(x_i) = max_{x_c : x_c[i] = x_i} theta_c(x_c) + sum_{i' != i} b_{i'}(x_{i'})

and sets ``b_i = theta_i + sum_c m_{c->i}``. Messages use the full
beliefs of the other scope variables, not cavity beliefs; pass
``cavity=True`` to subtract the previous message instead.

The decomposed form runs the same iteration over max-of-rank-1 factor
tables (see :mod:`fgnn.decomp`), passing messages over the auxiliary
variable z_c.

All messages start at zero; there is no damping, normalisation or
convergence test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decomp import DecomposedFactor, decompose_graph
from .errors import StructureError
from .pgm import Assignment, FactorGraph


@dataclass(frozen=True)
class BeliefState:
    """Node beliefs and one message per edge of ``FactorGraph.edges``.

    In direct mode messages have length K_i; in decomposed mode they are
    ``b_{c->i}(z_c)`` of length |Z_c|.
    """

    node_beliefs: tuple[np.ndarray, ...]
    factor_messages: tuple[np.ndarray, ...]
    mode: str = "direct"


def bp_init(g: FactorGraph, mode: str = "direct", decomposition: Sequence[DecomposedFactor] | None = None) -> BeliefState:
    beliefs = tuple(np.array(v.log_potential) for v in g.variables)
    if mode == "direct":
        msgs = tuple(np.zeros(g.variables[i].cardinality) for _, i in g.edges)
    elif mode == "decomposed":
        if decomposition is None:
            decomposition = decompose_graph(g)
        msgs = tuple(np.zeros(decomposition[c].z_cardinality) for c, _ in g.edges)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return BeliefState(beliefs, msgs, mode)


def _broadcast(v: np.ndarray, axis: int, rank: int) -> np.ndarray:
    shape = [1] * rank
    shape[axis] = v.size
    return v.reshape(shape)


def bp_iterate(g: FactorGraph, s: BeliefState, cavity: bool = False) -> BeliefState:
    """One synchronous direct-form iteration."""
    b = s.node_beliefs
    msgs = []
    e = 0
    for f, scope in zip(g.factors, g.scopes):
        table = f.table
        r = len(scope)
        first = e
        for p in range(r):
            acc = table
            for q, iq in enumerate(scope):
                if q == p:
                    continue
                bq = b[iq] - s.factor_messages[first + q] if cavity else b[iq]
                acc = acc + _broadcast(bq, q, r)
            axes = tuple(q for q in range(r) if q != p)
            msgs.append(acc.max(axis=axes) if axes else np.array(acc, dtype=np.float64))
            e += 1
    beliefs = _collect(g, msgs)
    return BeliefState(beliefs, tuple(msgs), "direct")


def _collect(g: FactorGraph, per_edge: Sequence[np.ndarray]) -> tuple[np.ndarray, ...]:
    out = []
    for v, inc in zip(g.variables, g.incident):
        bi = np.array(v.log_potential)
        for e in inc:
            bi = bi + per_edge[e]
        out.append(bi)
    return tuple(out)


def bp_iterate_decomposed(g: FactorGraph, d: Sequence[DecomposedFactor], s: BeliefState) -> BeliefState:
    """One synchronous iteration over decomposed factor tables.

    ``b_{c->i}(z) = sum_{i' != i} max_x [phi_{i'}(x, z) + b_{i'}(x)]`` and
    ``b_i = theta_i + sum_c (max_z [phi_i(x_i, z) + b_{c->i}(z)] - offset_c)``.
    """
    if len(d) != len(g.factors):
        raise StructureError(f"{len(d)} decomposed factors for {len(g.factors)} factors")
    b = s.node_beliefs
    to_z = []
    to_x = []
    for df, f, scope in zip(d, g.factors, g.scopes):
        if df.cardinalities != f.log_potential.shape:
            raise StructureError(f"decomposition of factor {df.factor_id} does not match factor {f.id}")
        marg = [np.max(t + b[i][:, None], axis=0) for t, i in zip(df.tables, scope)]
        for p in range(len(scope)):
            bz = np.zeros(df.z_cardinality)
            for q in range(len(scope)):
                if q != p:
                    bz = bz + marg[q]
            to_z.append(bz)
            to_x.append(np.max(df.tables[p] + bz[None, :], axis=1) - df.offset)
    return BeliefState(_collect(g, to_x), tuple(to_z), "decomposed")


def decode(s: BeliefState) -> Assignment:
    """Per-variable argmax, ties to the smallest state."""
    return tuple(int(np.argmax(b)) for b in s.node_beliefs)


def run_max_product(g: FactorGraph, k: int, mode: str = "direct", cavity: bool = False) -> tuple[BeliefState, Assignment]:
    if k < 0:
        raise ValueError("iteration count must be >= 0")
    if mode == "decomposed":
        if cavity:
            raise ValueError("the cavity variant is only available in direct mode")
        d = decompose_graph(g)
        s = bp_init(g, "decomposed", d)
        for _ in range(k):
            s = bp_iterate_decomposed(g, d, s)
    else:
        s = bp_init(g, mode)
        for _ in range(k):
            s = bp_iterate(g, s, cavity=cavity)
    return s, decode(s)


def belief_offsets(g: FactorGraph, unary_shift: Sequence[float], factor_shift: Sequence[float], k: int) -> list[float]:
    """Per-variable constants separating beliefs of two graphs.

    If ``g2`` equals ``g`` with ``unary_shift[i]`` subtracted from every
    entry of theta_i and ``factor_shift[c]`` from every entry of theta_c,
    then after ``k`` direct iterations ``b_i(g) - b_i(g2)`` is the
    constant returned for ``i``.
    """
    delta = list(map(float, unary_shift))
    for _ in range(k):
        new = list(map(float, unary_shift))
        for c, scope in enumerate(g.scopes):
            others = sum(delta[j] for j in scope)
            for i in scope:
                new[i] += factor_shift[c] + others - delta[i]
        delta = new
    return delta

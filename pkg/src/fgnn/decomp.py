"""Max-of-rank-1 decomposition of factor log-potentials.

A factor table theta_c over scope s(c) (r variables) is rewritten as

    theta_c(x) = max_z sum_{i in s(c)} phi_i(x_i, z)

with one auxiliary value z per joint configuration of the scope, in
row-major order. ``phi_i(x_i, z)`` is ``theta_c(x^z) / r`` when ``x_i``
agrees with configuration ``z`` and ``-P`` otherwise, with
``P = r * max|theta_c| + 1`` so a mismatched ``z`` can never win.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .numkit import Tensor
from .pgm import FactorGraph, FactorNode


@dataclass(frozen=True)
class DecomposedFactor:
    """Per-scope-variable tables of shape (K_i, z_cardinality).

    ``offset`` is the constant that was added to the factor before
    decomposing; ``reconstruct`` returns the table including it.
    """

    factor_id: int
    z_cardinality: int
    tables: tuple[np.ndarray, ...]
    penalty: float
    offset: float = 0.0

    @property
    def arity(self) -> int:
        return len(self.tables)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(t.shape[0] for t in self.tables)


def decompose_factor(f: FactorNode, offset: float = 0.0) -> DecomposedFactor:
    """Decompose a factor whose log-potentials are all >= 1."""
    theta = f.log_potential.values
    if theta.min() < 1.0:
        raise DomainError(f"factor {f.id}: decomposition needs log-potentials >= 1, min is {theta.min()}")
    shape = f.log_potential.shape
    r = len(shape)
    n_z = math.prod(shape)
    penalty = r * float(np.abs(theta).max()) + 1.0
    configs = np.unravel_index(np.arange(n_z), shape)
    tables = []
    for i, k in enumerate(shape):
        t = np.full((k, n_z), -penalty)
        t[configs[i], np.arange(n_z)] = theta / r
        t.setflags(write=False)
        tables.append(t)
    return DecomposedFactor(f.id, n_z, tuple(tables), penalty, offset)


def reconstruct(d: DecomposedFactor) -> Tensor:
    """max over z of the broadcast sum of the per-variable tables."""
    r = d.arity
    total = np.zeros(d.cardinalities + (d.z_cardinality,))
    for i, t in enumerate(d.tables):
        shape = [1] * r + [d.z_cardinality]
        shape[i] = t.shape[0]
        total = total + t.reshape(shape)
    return Tensor.from_array(total.max(axis=-1))


def decompose_graph(g: FactorGraph) -> list[DecomposedFactor]:
    """Decompose every factor, lifting tables to a minimum of 1 first.

    The lift for each factor is recorded in ``offset`` so callers can
    subtract it from anything computed with the decomposed tables.
    """
    out = []
    for f in g.factors:
        lift = max(0.0, 1.0 - float(f.log_potential.values.min()))
        lifted = f if lift == 0.0 else FactorNode(
            f.id, f.scope, Tensor(f.log_potential.shape, f.log_potential.values + lift))
        out.append(decompose_factor(lifted, offset=lift))
    return out

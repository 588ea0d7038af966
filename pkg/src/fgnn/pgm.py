"""Discrete factor graphs, MAP scoring and exact MAP oracles.

A graph holds variables with unary log-potentials and factors whose
log-potential tables are indexed in scope order. Assignments are tuples
of state indices aligned with ``FactorGraph.variables``.

Ties are always broken toward the lexicographically smallest assignment
(variable 0 most significant).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import CapacityError, StructureError
from .numkit import Tensor

PENALTY = -1.0e4
MAX_BRUTE_STATES = 2 ** 24
GRAPH_FORMAT = "fgnn-pgm-v1"

Assignment = tuple


@dataclass(frozen=True)
class VariableNode:
    id: int
    cardinality: int
    log_potential: np.ndarray

    def __post_init__(self):
        lp = np.array(self.log_potential, dtype=np.float64).reshape(-1)
        if self.cardinality < 2:
            raise StructureError(f"variable {self.id}: cardinality must be >= 2")
        if lp.shape != (self.cardinality,):
            raise StructureError(f"variable {self.id}: {lp.size} potentials for {self.cardinality} states")
        if not np.all(np.isfinite(lp)):
            raise StructureError(f"variable {self.id}: non-finite log-potential")
        lp.setflags(write=False)
        object.__setattr__(self, "log_potential", lp)


@dataclass(frozen=True)
class FactorNode:
    id: int
    scope: tuple[int, ...]
    log_potential: Tensor

    def __post_init__(self):
        scope = tuple(int(v) for v in self.scope)
        if len(set(scope)) != len(scope):
            raise StructureError(f"factor {self.id}: duplicate variable in scope {scope}")
        if not scope:
            raise StructureError(f"factor {self.id}: empty scope")
        lp = self.log_potential
        if not isinstance(lp, Tensor):
            lp = Tensor.from_array(lp)
        if len(lp.shape) != len(scope):
            raise StructureError(f"factor {self.id}: table rank {len(lp.shape)} for scope {scope}")
        if not np.all(np.isfinite(lp.values)):
            raise StructureError(f"factor {self.id}: non-finite log-potential")
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "log_potential", lp)

    @property
    def table(self) -> np.ndarray:
        return self.log_potential.as_array()


@dataclass(frozen=True)
class FactorGraph:
    variables: tuple[VariableNode, ...]
    factors: tuple[FactorNode, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "factors", tuple(self.factors))
        ids = [v.id for v in self.variables]
        if len(set(ids)) != len(ids):
            raise StructureError("duplicate variable id")
        fids = [f.id for f in self.factors]
        if len(set(fids)) != len(fids):
            raise StructureError("duplicate factor id")
        pos = {vid: k for k, vid in enumerate(ids)}
        for f in self.factors:
            for vid in f.scope:
                if vid not in pos:
                    raise StructureError(f"factor {f.id} refers to unknown variable {vid}")
            expected = tuple(self.variables[pos[vid]].cardinality for vid in f.scope)
            if f.log_potential.shape != expected:
                raise StructureError(
                    f"factor {f.id}: table shape {f.log_potential.shape} but cardinalities {expected}")

    @cached_property
    def var_pos(self) -> dict[int, int]:
        return {v.id: k for k, v in enumerate(self.variables)}

    @cached_property
    def scopes(self) -> tuple[tuple[int, ...], ...]:
        """Factor scopes as variable positions."""
        return tuple(tuple(self.var_pos[v] for v in f.scope) for f in self.factors)

    @cached_property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """(factor position, variable position), factor-major then scope order.

        The index of an edge in this tuple is its global edge index.
        """
        return tuple((c, i) for c, scope in enumerate(self.scopes) for i in scope)

    @cached_property
    def incident(self) -> tuple[tuple[int, ...], ...]:
        """Edge indices incident to each variable, in edge order."""
        out = [[] for _ in self.variables]
        for e, (_, i) in enumerate(self.edges):
            out[i].append(e)
        return tuple(tuple(x) for x in out)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(v.cardinality for v in self.variables)

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    def joint_states(self) -> int:
        return math.prod(self.cardinalities)

    def replace(self, variables=None, factors=None) -> "FactorGraph":
        return FactorGraph(self.variables if variables is None else variables,
                           self.factors if factors is None else factors)


def _check_assignment(g: FactorGraph, a: Sequence[int]) -> tuple[int, ...]:
    a = tuple(int(x) for x in a)
    if len(a) != g.n_variables:
        raise IndexError(f"assignment has {len(a)} states for {g.n_variables} variables")
    for x, v in zip(a, g.variables):
        if not 0 <= x < v.cardinality:
            raise IndexError(f"state {x} out of range for variable {v.id} (K={v.cardinality})")
    return a


def score(g: FactorGraph, a: Sequence[int]) -> float:
    """Sum of factor log-potentials then unary log-potentials, in graph order."""
    a = _check_assignment(g, a)
    s = 0.0
    for f, scope in zip(g.factors, g.scopes):
        s += f.table[tuple(a[i] for i in scope)]
    for v, x in zip(g.variables, a):
        s += v.log_potential[x]
    return float(s)


def brute_force_map(g: FactorGraph, chunk: int = 1 << 16) -> tuple[Assignment, float]:
    """Exact MAP by enumeration, in blocks of ``chunk`` assignments.

    Scores are accumulated in the same order as :func:`score`, so the
    returned value is bit-identical to ``score(g, argmax)``.
    """
    n_states = g.joint_states()
    if n_states > MAX_BRUTE_STATES:
        raise CapacityError(f"{n_states} joint states exceed the enumeration limit {MAX_BRUTE_STATES}")
    cards = g.cardinalities
    best_val = -math.inf
    best_idx = 0
    for start in range(0, n_states, chunk):
        flat = np.arange(start, min(start + chunk, n_states))
        states = np.unravel_index(flat, cards) if cards else ()
        total = np.zeros(flat.size)
        for f, scope in zip(g.factors, g.scopes):
            total += f.table[tuple(states[i] for i in scope)]
        for v, x in zip(g.variables, states):
            total += v.log_potential[x]
        k = int(np.argmax(total))
        if total[k] > best_val:
            best_val, best_idx = float(total[k]), start + k
    best = tuple(int(x) for x in np.unravel_index(best_idx, cards)) if cards else ()
    return best, best_val


def window_dp_map(g: FactorGraph, window: int) -> tuple[Assignment, float]:
    """Exact MAP for binary chains whose factors cover consecutive windows.

    Variable positions are the chain order. Every factor scope must be an
    increasing run of consecutive positions of width at most ``window``.
    The DP state is the last ``window - 1`` values. Values are computed
    backward and the assignment is read forward, taking the smaller
    state whenever both continuations tie, which yields the
    lexicographically smallest maximiser.
    """
    if window < 1:
        raise StructureError("window must be positive")
    if any(k != 2 for k in g.cardinalities):
        raise StructureError("window DP requires binary variables")
    L = g.n_variables
    ending = [[] for _ in range(L)]
    for f, scope in zip(g.factors, g.scopes):
        if list(scope) != list(range(scope[0], scope[0] + len(scope))):
            raise StructureError(f"factor {f.id}: scope {f.scope} is not a consecutive run")
        if len(scope) > window:
            raise StructureError(f"factor {f.id}: width {len(scope)} exceeds window {window}")
        ending[scope[-1]].append((f.table, len(scope)))

    mem = window - 1
    n_mem = 1 << mem
    mask = n_mem - 1
    prev = np.arange(n_mem)

    def local(t: int) -> np.ndarray:
        # score of terms completed at position t, shape (n_mem, 2):
        # rows index the state before t (bit j holds x[t-1-j]), cols x[t]
        out = np.zeros((n_mem, 2))
        for x in (0, 1):
            out[:, x] += g.variables[t].log_potential[x]
            for table, width in ending[t]:
                idx = [(prev >> j) & 1 for j in range(width - 2, -1, -1)] + [np.full(n_mem, x)]
                out[:, x] += table[tuple(idx)]
        return out

    nxt = ((prev[:, None] << 1) | np.arange(2)[None, :]) & mask
    locals_ = [local(t) for t in range(L)]
    value = [None] * (L + 1)
    value[L] = np.zeros(n_mem)
    for t in range(L - 1, -1, -1):
        value[t] = np.max(locals_[t] + value[t + 1][nxt], axis=1)

    state = 0
    a = []
    for t in range(L):
        cand = locals_[t][state] + value[t + 1][nxt[state]]
        x = 0 if cand[0] >= cand[1] else 1
        a.append(x)
        state = int(nxt[state, x])
    a = tuple(a)
    return a, score(g, a)


def viterbi_chain_map(g: FactorGraph) -> tuple[Assignment, float]:
    """Exact MAP for a pairwise chain over any cardinalities.

    Factors may be unary or pairwise on consecutive positions. Same
    backward-value / forward-readout scheme and tie rule as
    :func:`window_dp_map`.
    """
    L = g.n_variables
    unary = [np.array(v.log_potential) for v in g.variables]
    pair = [np.zeros((g.cardinalities[t], g.cardinalities[t + 1])) for t in range(L - 1)]
    for f, scope in zip(g.factors, g.scopes):
        if len(scope) == 1:
            unary[scope[0]] = unary[scope[0]] + f.table
        elif len(scope) == 2 and scope[1] == scope[0] + 1:
            pair[scope[0]] = pair[scope[0]] + f.table
        else:
            raise StructureError(f"factor {f.id}: scope {f.scope} is not a consecutive pair")
    value = [None] * L
    value[L - 1] = unary[L - 1]
    for t in range(L - 2, -1, -1):
        value[t] = unary[t] + np.max(pair[t] + value[t + 1][None, :], axis=1)
    a = [int(np.argmax(value[0]))]
    for t in range(1, L):
        a.append(int(np.argmax(pair[t - 1][a[-1]] + value[t])))
    a = tuple(a)
    return a, score(g, a)


def nonneg_shift(g: FactorGraph) -> FactorGraph:
    """Subtract each potential's minimum so every log-potential is >= 0.

    Every assignment's score drops by the same constant
    (:func:`shift_constant`), so the MAP set is unchanged.
    """
    return offset_graph(g, unary=0.0, factor=0.0)


def offset_graph(g: FactorGraph, unary: float = 0.0, factor: float = 0.0) -> FactorGraph:
    """Shift to minimum zero, then add ``unary`` / ``factor`` to every entry."""
    variables = [VariableNode(v.id, v.cardinality, v.log_potential - v.log_potential.min() + unary)
                 for v in g.variables]
    factors = [FactorNode(f.id, f.scope, Tensor(f.log_potential.shape,
                                                f.log_potential.values - f.log_potential.values.min() + factor))
               for f in g.factors]
    return FactorGraph(variables, factors)


def shift_constant(g: FactorGraph) -> float:
    """Amount :func:`nonneg_shift` removes from every score."""
    return float(sum(v.log_potential.min() for v in g.variables)
                 + sum(f.log_potential.values.min() for f in g.factors))


def random_graph(rng: np.random.Generator, n_vars: int, scopes: Sequence[Sequence[int]],
                 cardinality: int | Sequence[int] = 2, low: float = -1.0, high: float = 1.0) -> FactorGraph:
    """Graph with uniform random potentials on the given factor scopes."""
    if isinstance(cardinality, int):
        cardinality = [cardinality] * n_vars
    variables = [VariableNode(i, k, rng.uniform(low, high, k)) for i, k in enumerate(cardinality)]
    factors = [FactorNode(c, tuple(s), Tensor.from_array(rng.uniform(low, high, [cardinality[i] for i in s])))
               for c, s in enumerate(scopes)]
    return FactorGraph(variables, factors)


def graph_to_json(g: FactorGraph) -> dict:
    return {
        "format": GRAPH_FORMAT,
        "variables": [{"id": v.id, "cardinality": v.cardinality, "log_potential": v.log_potential.tolist()}
                      for v in g.variables],
        "factors": [{"id": f.id, "scope": list(f.scope),
                     "log_potential": {"shape": list(f.log_potential.shape),
                                       "values": f.log_potential.values.tolist()}}
                    for f in g.factors],
    }


def graph_from_json(obj: dict) -> FactorGraph:
    if obj.get("format") != GRAPH_FORMAT:
        raise ValueError(f"expected format {GRAPH_FORMAT!r}, got {obj.get('format')!r}")
    variables = [VariableNode(d["id"], d["cardinality"], d["log_potential"]) for d in obj["variables"]]
    factors = [FactorNode(d["id"], tuple(d["scope"]),
                          Tensor(tuple(d["log_potential"]["shape"]), d["log_potential"]["values"]))
               for d in obj["factors"]]
    return FactorGraph(variables, factors)


def dump_graph(g: FactorGraph, path) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_json(g), fh)


def load_graph(path) -> FactorGraph:
    with open(path) as fh:
        return graph_from_json(json.load(fh))

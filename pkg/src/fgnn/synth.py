"""Synthetic chain PGMs with budget constraints and exact MAP labels.

Every instance is a binary chain of length L with

* unary log-potentials theta_i(0), theta_i(1) ~ U[0, 1];
* a pairwise factor on each (i, i+1): fixed table [[0, 0.1], [0.2, 1]]
  for dataset 1, [[0, 0], [0, u]] with u ~ U[0, 2] for datasets 2 and 3;
* a budget factor on each full window i..i+window-1 whose table is 0
  when at most k of its variables are 1 and ``PENALTY`` otherwise.
  Datasets 1 and 2 use one k for all windows; dataset 3 draws k per
  window uniformly from 1..window.

Random numbers come from SplitMix64 seeded with the instance seed,
drawn in this order: unaries (variable-major, state 0 then 1), pairwise
(1,1) values, then budget k values. A uniform double is
``(next_u64() >> 11) * 2**-53``; an integer in [lo, hi] is
``lo + next_u64() % (hi - lo + 1)``.

Factors are ordered pairwise first, then budget windows by start index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import FeatureSet
from .numkit import Tensor
from .pgm import (PENALTY, FactorGraph, FactorNode, VariableNode, graph_from_json, graph_to_json,
                  window_dp_map)

DATASET_FORMAT = "fgnn-dataset-v1"
DATASET1_PAIRWISE = ((0.0, 0.1), (0.2, 1.0))
_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def integer(self, lo: int, hi: int) -> int:
        return lo + self.next_u64() % (hi - lo + 1)


@dataclass(frozen=True)
class DatasetInstance:
    graph: FactorGraph
    features: FeatureSet
    label: tuple
    meta: dict = field(default_factory=dict)


def budget_table(window: int, k: int) -> np.ndarray:
    counts = np.indices([2] * window).sum(axis=0)
    return np.where(counts <= k, 0.0, PENALTY)


def feature_dims(dataset_id: int, window: int) -> tuple[int, int, int]:
    """(node, factor, edge) feature widths for a dataset schema."""
    factor = 2 + (1 if dataset_id >= 2 else 0) + (window if dataset_id == 3 else 0)
    return 2, factor, window + 2


def gen_instance(dataset_id: int, seed: int, L: int, window: int, k_budget: int | None = 5) -> DatasetInstance:
    """Generate one chain instance and label it with its exact MAP.

    Feature schema. Node: the two unary log-potentials. Factor:
    [is_pairwise, is_budget], then the pairwise (1,1) value for datasets
    2-3 (0 on budget factors), then a one-hot of k over 1..window for
    dataset 3 (zeros on pairwise factors). Edge: one-hot over
    (pairwise, position 0..1) and (budget, position 0..window-1).
    """
    if dataset_id not in (1, 2, 3):
        raise ValueError(f"dataset must be 1, 2 or 3, got {dataset_id}")
    if not L >= window >= 2:
        raise ValueError(f"need L >= window >= 2, got L={L}, window={window}")
    if dataset_id != 3 and (k_budget is None or not 0 <= k_budget <= window):
        raise ValueError(f"budget k must lie in 0..{window}, got {k_budget}")
    rng = SplitMix64(seed)
    unary = [(rng.uniform(), rng.uniform()) for _ in range(L)]
    if dataset_id == 1:
        pair_vals = [DATASET1_PAIRWISE[1][1]] * (L - 1)
        pair_tables = [np.array(DATASET1_PAIRWISE)] * (L - 1)
    else:
        pair_vals = [rng.uniform(0.0, 2.0) for _ in range(L - 1)]
        pair_tables = [np.array([[0.0, 0.0], [0.0, u]]) for u in pair_vals]
    n_budget = L - window + 1
    if dataset_id == 3:
        ks = [rng.integer(1, window) for _ in range(n_budget)]
    else:
        ks = [int(k_budget)] * n_budget

    variables = [VariableNode(i, 2, u) for i, u in enumerate(unary)]
    factors = [FactorNode(i, (i, i + 1), Tensor.from_array(t)) for i, t in enumerate(pair_tables)]
    factors += [FactorNode(L - 1 + s, tuple(range(s, s + window)), Tensor.from_array(budget_table(window, k)))
                for s, k in enumerate(ks)]
    g = FactorGraph(variables, factors)
    label, _ = window_dp_map(g, window)
    for s, k in enumerate(ks):
        if sum(label[s:s + window]) > k:
            raise AssertionError(f"label violates the budget of window {s}")

    dn, dg, dt = feature_dims(dataset_id, window)
    node = np.array(unary)
    factor = np.zeros((len(factors), dg))
    factor[:L - 1, 0] = 1.0
    factor[L - 1:, 1] = 1.0
    if dataset_id >= 2:
        factor[:L - 1, 2] = pair_vals
    if dataset_id == 3:
        for s, k in enumerate(ks):
            factor[L - 1 + s, 3 + k - 1] = 1.0
    edge = np.zeros((len(g.edges), dt))
    e = 0
    for f in factors:
        for p in range(len(f.scope)):
            edge[e, p if f.id < L - 1 else 2 + p] = 1.0
            e += 1
    meta = {"dataset_id": dataset_id, "seed": seed, "chain_length": L, "window": window, "budget_k": ks}
    return DatasetInstance(g, FeatureSet(node, factor, edge), label, meta)


def instance_seed(seed: int, index: int) -> int:
    return seed * 10 ** 6 + index


def gen_dataset(dataset_id: int, seed: int, n_train: int, n_val: int, n_test: int, L: int, window: int,
                k_budget: int | None = 5):
    """Train, validation and test lists; instance ``index`` counts across all
    three splits so no two instances share a stream."""
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be >= 0")
    if n_train + n_val + n_test > 10 ** 6:
        raise ValueError("at most 10**6 instances per seed")
    out = []
    start = 0
    for n in (n_train, n_val, n_test):
        out.append([gen_instance(dataset_id, instance_seed(seed, start + j), L, window, k_budget)
                    for j in range(n)])
        start += n
    return tuple(out)


def instance_to_json(inst: DatasetInstance) -> dict:
    return {"graph": graph_to_json(inst.graph), "features": inst.features.to_json(),
            "label": list(inst.label), "meta": inst.meta}


def instance_from_json(obj: dict) -> DatasetInstance:
    return DatasetInstance(graph_from_json(obj["graph"]), FeatureSet.from_json(obj["features"]),
                           tuple(obj["label"]), obj["meta"])


def write_dataset(path, instances, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, **header}) + "\n")
        for inst in instances:
            fh.write(json.dumps(instance_to_json(inst)) + "\n")


def read_dataset(path) -> tuple[dict, list[DatasetInstance]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: expected format {DATASET_FORMAT!r}")
        return header, [instance_from_json(json.loads(line)) for line in fh if line.strip()]

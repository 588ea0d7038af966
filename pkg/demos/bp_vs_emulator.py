"""
Max-product inside a neural network
===================================

Max-product belief propagation on a factor graph can be written exactly
as a stack of FGNN layers with hand-set weights. Here we run both on the
same graph and compare their beliefs iteration by iteration.
"""

import numpy as np

from fgnn.exactparam import EmulatorLayout, build_bp_emulator, emulator_beliefs, prepare_graph
from fgnn.maxprod import run_max_product
from fgnn.pgm import brute_force_map, random_graph

# A small loopy graph: a 4-cycle of pairwise factors plus one triple.
rng = np.random.default_rng(3)
g = random_graph(rng, 4, [(0, 1), (1, 2), (2, 3), (0, 3), (0, 1, 2)])

# The network wants non-negative unaries and factor values of at least 1.
# The shift moves each belief by a constant, so decoding is unchanged.
g = prepare_graph(g)
lay = EmulatorLayout.for_graph(g)
print("max arity", lay.R, "max states", lay.Kx, "max z states", lay.Zx)

# %%
# Compare beliefs for a few iteration counts.
for k in range(5):
    state, decoded = run_max_product(g, k)
    emu = emulator_beliefs(g, k)
    gap = max(np.abs(a - b).max() for a, b in zip(state.node_beliefs, emu))
    print(f"k={k}  max belief gap {gap:.2e}  decode {decoded}")

# %%
# The network itself is an ordinary FGNN stack.
stack = build_bp_emulator(g, 3)
print(len(stack.layers), "layers for 3 iterations")
print("exact MAP", brute_force_map(g)[0])

"""
Factors as maxima of rank-1 tables
==================================

A factor over a few discrete variables can be rewritten as a max over an
auxiliary variable z of a sum of one table per variable. Once that holds,
max-product messages only ever touch one variable at a time.
"""

import itertools

import numpy as np

from fgnn.decomp import decompose_factor, reconstruct
from fgnn.numkit import Tensor
from fgnn.pgm import FactorNode

# A random pairwise factor on a 2-state and a 3-state variable. Values must
# be at least 1 before decomposing, so draw them from [1, 5).
rng = np.random.default_rng(0)
table = rng.uniform(1, 5, (2, 3))
f = FactorNode(0, (0, 1), Tensor.from_array(table))
d = decompose_factor(f)
print("z takes", d.z_cardinality, "values, penalty", d.penalty)

# Each z names one joint configuration. Its own row of every table sums to
# the factor value; every other row is pushed down by the penalty.
for x in itertools.product(range(2), range(3)):
    sums = d.tables[0][x[0]] + d.tables[1][x[1]]
    print(x, "best z =", int(np.argmax(sums)), "value", round(sums.max(), 6), "table", round(table[x], 6))

# Taking the max over z gives the table back.
err = np.abs(reconstruct(d).as_array() - table).max()
print("reconstruction error", err)

"""
Filter norms and the activation noise bound
============================================

How much can an additive input perturbation move one convolutional
activation? The answer is capped by the filter's l1 norm times the size of
the perturbation. This script checks the cap on a random kernel, shows the
convolution written as a matrix product, and ranks the filters.
"""

import math

import numpy as np

from featregen.conv_analysis import (
    ConvKernel,
    circulant_matrix,
    conv2d,
    l1_rank_filters,
    max_perturbation_bruteforce,
    perturbation_bound,
)

rng = np.random.default_rng(0)

# four 3x3 filters over two input channels
kernel = ConvKernel(rng.normal(size=(4, 2, 3, 3)))
print("l1 norms:", np.round(kernel.l1_norms(), 3))

# ranking: highest l1 first, ties go to the lower index
ranking = l1_rank_filters(kernel, "demo")
print("ranking:", ranking.order.tolist())

# the convolution as one matrix: every row holds a shifted copy of a filter
x = rng.normal(size=(2, 5, 5))
M = circulant_matrix(kernel, x.shape)
print("matrix shape:", M.shape)
print("max |M x - conv(x)|:", np.abs(M @ x.ravel() - conv2d(x, kernel).ravel()).max())

# empirical noise against the bound for an l-inf perturbation
xi = 10 / 255
r = rng.uniform(-xi, xi, size=x.shape)
delta = np.abs(conv2d(x + r, kernel) - conv2d(x, kernel))
for m in range(kernel.out_channels):
    bound = perturbation_bound(kernel, m, math.inf, np.abs(r).max())
    print(f"filter {m}: observed {delta[m].max():.4f}  bound {bound:.4f}")

# with valid convolution the worst case perturbation (the sign pattern of
# the filter) reaches the bound exactly
single = ConvKernel(kernel.weights[:1, :1])
print("worst case:", max_perturbation_bruteforce(single, (1, 4, 4), xi),
      "bound:", xi * single.l1_norms()[0])

"""
Synthetic universal perturbations
=================================

Start from a handful of universal perturbations and draw new ones as
random convex combinations until the result is at least as large (in l2)
as the smallest of the originals. Each output stays inside the coordinate
box spanned by its inputs and zero.
"""

import numpy as np
import torch

from featregen.synth_perturb import SynthConfig, default_threshold, synthesize, synthesize_pool
from featregen.uap_attacks import UniversalPerturbation

xi = 10 / 255
g = torch.Generator().manual_seed(0)
V = [UniversalPerturbation((torch.rand(3, 32, 32, generator=g) * 2 - 1) * xi, "inf", xi) for _ in range(5)]

eta = default_threshold(V)
print("threshold (smallest l2 norm):", round(eta, 4))

one = synthesize(V, SynthConfig(eta=eta, seed=1))
print("iterations:", one.meta["iterations"], " l2:", round(one.norm(2), 4), " linf:", round(one.norm("inf"), 4))

pool = synthesize_pool(V, 200, seed=2)
norms = np.array([p.norm(2) for p in pool])
print("pool of", len(pool), " l2 range:", norms.min().round(4), "-", norms.max().round(4))

# every synthetic perturbation sits inside the box spanned by the inputs and 0
stack = torch.stack([v.v for v in V])
lo = torch.minimum(stack.min(0).values, torch.zeros(()))
hi = torch.maximum(stack.max(0).values, torch.zeros(()))
print("all inside box:", all(bool(((p.v >= lo) & (p.v <= hi)).all()) for p in pool))

"""
The bottleneck trade-off on one element
=======================================

The fused value is ``fused = lam * manifold + (1 - lam) * eps``. Keeping more of manifold
(lam -> 1) costs information loss, while drifting from the clean target costs
reconstruction. A brute-force sweep of the gate shows how a larger compression
weight pushes the optimum towards discarding more of manifold.
"""

import numpy as np
import torch

from didface.mib import fuse, info_loss_elementwise

manifold, eps, target, normed = 1.0, 0.0, 0.9, 1.5
lam = torch.arange(1, 1000, dtype=torch.float64) / 1000
fused = fuse(torch.full_like(lam, manifold), torch.full_like(lam, eps), lam)
info = info_loss_elementwise(lam, torch.full_like(lam, normed))
rec = (fused - target) ** 2

for beta in (0.0001, 0.001, 0.01, 0.1, 1.0):
    obj = beta * info + rec
    i = int(torch.argmin(obj))
    print(f"beta {beta:<7g} best gate {float(lam[i]):.3f}   info {float(info[i]):.4f}   rec {float(rec[i]):.5f}")

# the information term alone grows without bound as the gate opens
for g in (0.5, 0.9, 0.99, 0.999999):
    print(f"gate {g:<9g} info {float(info_loss_elementwise(torch.tensor([g]), torch.tensor([0.0]))):.3f}")

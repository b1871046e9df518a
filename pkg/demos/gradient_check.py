"""
Checking the hand-written gradients
===================================

Every layer's backward pass is compared with central finite differences in
64-bit precision, first op by op and then through the whole network loss.
"""

import numpy as np

from expobracket import autodiff as ad
from expobracket import tmrnet as tm
from expobracket import train as tr

rng = np.random.default_rng(0)
with ad.precision(np.float64):
    x = ad.tensor(rng.normal(size=(1, 3, 6, 6)), requires_grad=True)
    w = ad.tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    b = ad.tensor(rng.normal(size=4), requires_grad=True)
    target = rng.normal(size=(1, 4, 6, 6))

    def probe(x, w, b):
        return ad.sum(ad.mul(ad.conv2d(x, w, b), ad.tensor(target)))

    print("conv2d: max relative error", ad.grad_check(probe, [x, w, b], eps=1e-3))

# kinks of leaky-relu and the L1 loss are skipped rather than differenced across
for seed in range(3):
    err, checked, skipped = tr.network_grad_check(tm.TMRNetConfig(), seed)
    print(f"network seed {seed}: {err:.2e} over {checked} coordinates ({skipped} skipped at kinks)")

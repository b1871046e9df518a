"""
Training the desk-scale network
===============================

Pre-trains the recurrent fusion network on eight scenes of 64x64 raw pixels and then
reads out its prefix outputs: the model is asked to reconstruct the target
after seeing only the first ``r`` frames, for ``r = 1..5``.

Pass a step count as the first argument (the default 2000 steps take about
twenty minutes on one core).
"""

import sys
import time

import numpy as np

from expobracket import evalkit as ek
from expobracket import simpipe as sp
from expobracket import tmrnet as tm
from expobracket import train as tr

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

isp = sp.IspParams()
data = sp.make_dataset(8, 64, sp.SimConfig(seed=0), isp)
net = tm.TMRNetConfig()
cfg = tr.TrainConfig(lr=2e-3, steps=steps, batch=24, patch=16, seed=0)

start = time.time()
state = None
for stop in np.linspace(steps / 4, steps, 4).astype(int):
    state = tr.pretrain(data, cfg, net, state, stop=int(stop))
    recent = np.mean([float(line.split()[2]) for line in state.log[-50:]])
    print(f"step {state.step:5d}  loss {recent:.4f}  ({time.time() - start:.0f} s)")

baseline = np.mean([ek.score_pair(ex.stack[0], ex.gt, isp)[0] for ex in data])
print(f"frame 1 alone: {baseline:.2f} dB")


def prefix_model(r):
    def predict(ex):
        cond = tm.condition_stack(ex.stack[None], ex.indices, ex.ratio)
        return tm.predict(cond, state.params, net, r=r)[0]

    return predict


# more frames should never hurt: each prefix output only adds information
for r in range(1, 6):
    report = ek.evaluate(prefix_model(r), data, isp)
    print(f"r = {r}: {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}")

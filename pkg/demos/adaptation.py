"""
Self-supervised adaptation to unseen noise
==========================================

Takes a pre-trained checkpoint (for example ``last.brkw`` written by
``expobracket pretrain``), synthesizes a split whose noise levels lie above
the training range, and fine-tunes on it without targets. The self loss
pulls short-prefix outputs towards the full-stack output while the EMA
loss keeps the full-stack output near a slowly moving copy of the weights.
"""

import sys

from expobracket import simpipe as sp
from expobracket import train as tr

if len(sys.argv) < 2:
    sys.exit("usage: adaptation.py CHECKPOINT")

state, net = tr.checkpoint_load(sys.argv[1])
shifted = sp.SimConfig(seed=7, shot_range=(0.006, 0.012))
data = sp.make_dataset(4, 64, shifted, sp.IspParams(), first_index=500)

cfg = tr.TrainConfig(adapt_epochs=10, seed=0)
before = tr.mean_self_loss(state.params, net, data, cfg)
adapted = tr.adapt(data, state.params, cfg, net)
after = tr.mean_self_loss(adapted.params, net, data, cfg)
print(f"mean self loss: {before:.5f} -> {after:.5f} ({after / before:.0%} of the start)")

# without the EMA anchor the self loss alone is trivially minimized by collapse
try:
    tr.adapt(data, state.params, tr.TrainConfig(use_ema=False), net)
except Exception as exc:  # noqa: BLE001
    print("refused:", exc)

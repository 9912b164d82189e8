"""Occlusion importance for one predicted pixel.

Uses the checkpoint written by ``train_and_map.py``:

    python walkthroughs/explain_pixel.py
"""
import numpy as np

from wscifusion import attribution, data, synth, training
from wscifusion.core import RngStream

ckpt = training.load_checkpoint("walkthrough.wscm")
world = synth.SyntheticWorld(seed=0, size=192)
stack, _, sparse = synth.synth_generate(world, 0)
pos = [(r, c) for r in range(0, 192 - 39, 16) for c in range(0, 192 - 39, 16)]
chips = data.sample_chips(stack, sparse, world.grid, 0, pos, min_valid=1)

bg = attribution.background(chips, rng=RngStream(0))
report = attribution.attribute(ckpt.model, chips.inputs[0], (16, 16), bg,
                               chip_id=int(chips.records["id"][0]))
for name, v in sorted(zip(report.channels, report.channel_importance), key=lambda t: -t[1]):
    print(f"{name:>14s} {v:.4f}")
decay = report.decay
print("influence by distance (px):", np.round(decay[:16] / decay[0], 3).tolist())
report.save("explain.json", "explain_influence.f32", float(chips.records["lon"][0]),
            float(chips.records["lat"][0]))

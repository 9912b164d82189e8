"""Train a small model on a synthetic world and map it wall to wall.

Runs in a couple of minutes on one core:

    python walkthroughs/train_and_map.py
"""
import logging

import numpy as np

from wscifusion import data, evaluation, inference, network, synth, training
from wscifusion.core import RngStream

logging.basicConfig(level=logging.INFO, format="%(message)s")

world = synth.SyntheticWorld(seed=0, size=192)
pos = [(r, c) for r in range(0, 192 - 39, 8) for c in range(0, 192 - 39, 8)]
sets = []
for q in (0, 1):
    stack, truth, sparse = synth.synth_generate(world, q)
    sets.append(data.sample_chips(stack, sparse, world.grid, q, pos, block_meters=1600,
                                  contained=True))
chips = data.ChipSet.concat(sets).with_split(0.2, seed=0)
train_set = chips.only("train")
print(f"{len(chips)} chips, {len(train_set)} for training")

# normalization constants come from the training split only
mean, std = data.compute_norm_constants(train_set, None)
model = network.build_model(network.desk_spec().with_norm(mean, std), RngStream(1))
config = training.TrainConfig(epochs=8, batch_size=32, lr=2e-3, milestones=(0.6, 0.8, 0.9),
                              steps_per_epoch=10)
model, history = training.train(model, train_set, config)
training.save_checkpoint("walkthrough.wscm", training.Checkpoint(model, config.epochs,
                                                                 config.to_dict()))

rep, _, _ = evaluation.validate_sparse(model, chips.only("test"))
print("sparse test:", rep.to_json())

jobs = inference.plan_tiles(192, 192, 96, quarter=0)
mosaic, run = inference.run_tiles(model, jobs, world.layers(0), world.grid, workers=2, seed=0)
print(f"mosaic: {run.pixels} px at {run.pixels_per_second:.0f} px/s")
dense = evaluation.validate_dense(model, world, 0, mosaic=mosaic, site_size=64)
print("dense:", dense.overall.to_json())
print("never observed:", dense.unobserved.to_json())
print("site cross-I:", np.round([s.cross_i for s in dense.sites], 3).tolist())
mosaic.save("walkthrough_mosaic.f32", world.grid)

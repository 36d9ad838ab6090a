"""Walk through the diffusion oracle: one scenario from field to point cloud."""
import numpy as np

from aptnet.datagen import DatagenConfig, generate_field, generate_samples, make_scenario, solve_diffusion

#%% A correlated log-normal diffusivity field on the 64 x 64 oracle grid

field = generate_field("gaussian-continuous", {"mean": np.log(0.02), "std": 1.0, "corr_len": 0.15}, seed=7, n=64)
print("kappa range", field.values.min(), field.values.max())

#%% One scenario: the field, a well, and 10 snapshots at irregular steps

cfg = DatagenConfig()
scen = make_scenario(cfg, "gaussian-continuous", seed=7)
sol = solve_diffusion(scen)
print("snapshot times", np.round(sol.times, 3))
print("mass minus injected", np.max(np.abs(sol.mass - sol.injected)))

#%% Static point clouds: one node set for every snapshot, wells included

data = generate_samples(DatagenConfig(n_samples=10, split=(8, 1, 1)))
s = data["train"][0]
print("nodes", s.coords.shape, "features", s.features.shape, "fields", s.fields.shape)
print("well anchors", s.anchors)

#%% Adaptive clouds: node sets follow the gradient and change per snapshot

adaptive = generate_samples(DatagenConfig(n_samples=10, split=(8, 1, 1), mode="adaptive"))
print("nodes per snapshot", adaptive["train"][0].node_counts())

"""Train a small model on oracle data and score it at two resolutions.

Under a minute on one core. At this size the fit is rough (held-out R2 near
0.2); the desk-scale recipe (256 training scenarios, 200 epochs, R2 above
0.9) is in desk_scale.cfg.
"""
import numpy as np

from aptnet import APT, ModelConfig
from aptnet.datagen import DatagenConfig, generate_samples
from aptnet.protocols import run_plain, run_superres
from aptnet.tensor import precision
from aptnet.training import TrainConfig, TrainData, train

#%% Data: 64 scenarios, 256 training nodes, plus a 1024-node copy of each cloud

data = generate_samples(DatagenConfig(n_samples=64, n_nodes_full=1024))
print({k: len(v) for k, v in data.items()})

#%% Model and training (32-bit for speed)

with precision("float32"):
    td = TrainData.from_raw("demo", data["train"], data["val"])
    model = APT(ModelConfig(d_a=2, scalar_names=("rate",), d_h=48, n_supernodes=64, n_latent=32))
    print("parameters", model.num_parameters())
    result, _ = train(model, [td], TrainConfig(epochs=30, lr=2e-3, batch_size=16, val_every=5))
    model.load_state_dict(result.best_state)
print("best validation rel-L2", round(result.best_val, 4), "at epoch", result.best_epoch)

#%% Held-out scores in physical units

with precision("float32"):
    plain = run_plain(model, td.stats, data["test"])
print(plain.table())

#%% The same model queried on the 1024-node clouds

with precision("float32"):
    sr = run_superres(model, td.stats, data["test"], data["test_full"])
print(sr.table())
print("delta R2 (full - train resolution)", float(sr.metadata["delta_r2"]))

"""Adaptive physics transformer: a mesh-agnostic neural operator on point clouds.

Subpackages are plain modules: ``tensor`` (autograd), ``geometry``,
``attention``, ``encoder``, ``latent``, ``model``, ``training``,
``datagen``, ``metrics``, ``protocols``, ``dataio``, ``config`` and ``cli``.
"""

from .datagen import DatagenConfig, build_dataset, generate_field, generate_samples, sample_observations, solve_diffusion
from .dataio import load_checkpoint, read_dataset, save_checkpoint, write_dataset
from .geometry import PointCloudSample, build_radius_graph, sample_supernodes
from .metrics import plume_error, r_squared, rel_l2, rel_pressure_error
from .model import APT, ModelConfig, forward
from .protocols import EvalReport, run_ablation, run_crossdataset, run_ood, run_superres
from .tensor import Tensor, get_precision, no_grad, precision, set_precision
from .training import NormalizationStats, TrainConfig, TrainData, fit_normalization, relative_lp_loss, train

__version__ = "0.1.0"

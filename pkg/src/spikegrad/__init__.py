"""Spiking neural networks trained with surrogate gradients on a small numpy autodiff engine."""

from .architectures import build, deep_dense, mnist_2conv, scaling
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, load_idx, load_mnist, synth_features, synth_images, synth_twoclass
from .errors import (CheckpointError, ContractError, CorruptHeaderError, DimensionError, FormatError,
                     ShapeMismatchError, SpikegradError, TopologyError, TrainingError, VersionMismatchError)
from .gamma import balance_ratio, fsq_mean, profile_gradients, tune_gamma
from .losses import convolved_energy_loss, count_threshold_loss, cross_entropy, energy_loss
from .network import Network, NetworkSpec, firing_rate, unroll_forward
from .neuron import NeuronConfig, if_step, integrate_fire, surrogate
from .normalization import BatchNormState, batchnorm_currents, normalize_thresholds
from .optim import OptimizerState, adamw_step, one_cycle_lr
from .tensor import Tape, Tensor, backward, no_grad, precision
from .trainer import TrainConfig, evaluate, lr_range_test, train

__version__ = "0.1.0"

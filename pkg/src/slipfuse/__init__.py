"""Visuotactile slip detection: windowed GelSight and camera streams, frozen
image features, a fusion layer and an LSTM, plus a synthetic grasp generator
and a marker/texture threshold baseline for comparison."""

from .dataset import Format, GraspTrial, Label, SequenceSample, load_dataset, make_samples, make_splits, to_difference
from .features import Backbone, FeatureExtractorSpec, Modality
from .model import ModelConfig, forward, init_model, load_checkpoint, save_checkpoint
from .synthgrasp import Scenario, SynthParams, generate_dataset, generate_trial
from .training import TrainConfig, train

__version__ = "0.1.0"

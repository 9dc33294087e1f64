"""Evaluation of feature-attribution methods on beat-annotated 1D ECG signals."""

from .attributions import AttributionMap, MethodId, MethodParams, SignMode, attribute
from .engine import Network, Tensor, backward, forward, grad_check
from .metrics import (EvalConfig, MetricRecord, degradation_curve, degradation_score, localization_score,
                      pointing_game_accuracy, pointing_game_hit, window_partition)
from .model import NetworkConfig, TrainConfig, build_network, predict, select_eval_examples, standardize, train
from .synth import BeatAnnotation, BeatClass, Dataset, Example, GeneratorParams, gen_dataset, gen_example

__version__ = "0.1.0"

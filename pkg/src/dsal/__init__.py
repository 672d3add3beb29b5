"""Deeply supervised active learning for binary image segmentation."""

__version__ = "0.1.0"

from .active import ALState, QueryPolicy, RoundMetrics, TrainConfig, init_state, run_experiment, run_round, score_pool, select
from .data import DatasetConfig, Sample, load_pair, make_dataset, normalize_intensity, save_pair, synth_sample
from .estimator import DeeplySupervisedSegmenter
from .metrics import ScoreRecord, consistency_scores, dsc, evaluate, spearman_rank
from .segnet import LossWeights, Model, ModelConfig, PredictionSet, build_model, forward, loss, predict_mask, train_step

__all__ = [
    "ALState", "QueryPolicy", "RoundMetrics", "TrainConfig", "init_state", "run_experiment", "run_round",
    "score_pool", "select", "DatasetConfig", "Sample", "load_pair", "make_dataset", "normalize_intensity",
    "save_pair", "synth_sample", "DeeplySupervisedSegmenter", "ScoreRecord", "consistency_scores", "dsc",
    "evaluate", "spearman_rank", "LossWeights", "Model", "ModelConfig", "PredictionSet", "build_model",
    "forward", "loss", "predict_mask", "train_step",
]

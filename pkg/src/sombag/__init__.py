"""Noise-robust bag-level training with a self-organizing key/value memory."""

from .data import (
    Bag,
    Dataset,
    DatasetError,
    ImageGroup,
    Instance,
    Kind,
    NoiseFlag,
    SynthConfig,
    area_score,
    build_bags,
    ingest_jsonl,
    init_weights,
    synth_generate,
)
from .memory import (
    MemoryState,
    WinnerResult,
    cosine,
    d_value_step,
    grid_geo,
    init_memory,
    memory_loss,
    neighborhood,
    prototypical_score,
    r_value_step,
    som_key_step,
    winner,
)
from .model import ClassifierState, classify, cls_loss_and_grads, encode, sgd_step
from .trainer import (
    RunReport,
    TrainConfig,
    TrainState,
    bag_feature,
    compute_roi_weights,
    curriculum_stages,
    predict,
    train,
    warmup,
)
from .evaluate import EvalReport, accuracy, kmeans_memory, noise_auc, run_suite

__version__ = "0.1.0"

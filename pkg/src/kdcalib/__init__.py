"""Teacher logit calibration and desk-scale knowledge distillation."""

from .analyze import MisinstructionStats, RunMetrics, RunReport, compare_runs, misinstruction_ratio, topk_accuracy
from .calibrate import (
    BatchStats,
    CalibrationConfig,
    CalibrationOutcome,
    LogitCalibrator,
    apply_policy,
    calibrate_batch,
    calibrate_loca,
    is_misinstructed,
    sigma_threshold,
)
from .losses import LossConfig, LossValue, ce_loss, combined_loss, kd_loss, loss_for_batch
from .nn import (
    Dataset,
    DistilledClassifier,
    DistillMetrics,
    MlpClassifier,
    MlpModel,
    TeacherMetrics,
    TrainConfig,
    TrainingDivergedError,
    distill_student,
    forward,
    gen_synthetic,
    train_teacher,
)
from .probvec import argmax_index, one_hot, softmax, validate_prob

__version__ = "0.1.0"

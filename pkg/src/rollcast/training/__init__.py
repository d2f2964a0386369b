from .losses import combined_loss, loss_amse, loss_pcc
from .rollout import RolloutResult, TeacherForcingSchedule, build_rollout_graph, flat_weights, rollout, rollout_inputs
from .trainer import (
    DivergenceError,
    MultistageResult,
    StageConfig,
    StagePlan,
    TrainingData,
    TrainRecord,
    naive_stage,
    run_multistage,
    save_model,
    train_naive_baseline,
    train_stage,
)

__all__ = [
    "DivergenceError",
    "MultistageResult",
    "RolloutResult",
    "StageConfig",
    "StagePlan",
    "TeacherForcingSchedule",
    "TrainRecord",
    "TrainingData",
    "build_rollout_graph",
    "combined_loss",
    "flat_weights",
    "loss_amse",
    "loss_pcc",
    "naive_stage",
    "rollout",
    "rollout_inputs",
    "run_multistage",
    "save_model",
    "train_naive_baseline",
    "train_stage",
]

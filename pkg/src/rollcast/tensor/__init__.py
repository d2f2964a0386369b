from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .graph import (
    PRIMITIVES,
    Graph,
    GraphError,
    GraphShapeError,
    Node,
    backward_grad,
    forward_eval,
)
from .optim import AdamWState, LrSchedule, NonFiniteGradientError, adamw_step, lr_at, warmup_steps_for

__all__ = [
    "PRIMITIVES",
    "AdamWState",
    "CheckpointError",
    "Graph",
    "GraphError",
    "GraphShapeError",
    "LrSchedule",
    "Node",
    "NonFiniteGradientError",
    "adamw_step",
    "backward_grad",
    "forward_eval",
    "lr_at",
    "read_checkpoint",
    "warmup_steps_for",
    "write_checkpoint",
]

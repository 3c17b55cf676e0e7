"""Slim UNet branches with manual reverse-mode gradients."""

from .gradcheck import GradCheckReport, check_gradients, grad_check, relative_error
from .model import (
    ForwardCache,
    Model,
    ModelConfig,
    backward,
    forward,
    init_model,
    load_checkpoint,
    read_blobs,
    save_checkpoint,
    write_blobs,
)

__all__ = [
    "ForwardCache", "GradCheckReport", "Model", "ModelConfig", "backward", "check_gradients",
    "forward", "grad_check", "init_model", "load_checkpoint", "read_blobs", "relative_error",
    "save_checkpoint", "write_blobs",
]

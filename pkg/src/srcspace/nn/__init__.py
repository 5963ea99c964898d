"""Minimal numpy layer engine and the model families."""
from .engine import ParamStore
from .graph import GraphSpec, build_graph
from .models import (
    FAMILIES,
    Geometry,
    Model,
    ModelSpec,
    adamw_step,
    bce_with_logits,
    build_model,
    count_params,
    loss_and_grad,
    solve_width,
)

__all__ = [
    "FAMILIES", "Geometry", "GraphSpec", "Model", "ModelSpec", "ParamStore", "adamw_step",
    "bce_with_logits", "build_graph", "build_model", "count_params", "loss_and_grad", "solve_width",
]

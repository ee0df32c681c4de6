"""CKKS configuration search for encrypted neural-network inference."""

from .config_space import Direction, DirectionKind, FheConfig, GlobalConfig, LayerOverride, Scope
from .model_ir import ModelGraph, parse_model, summarize_model
from .orchestrator import RunConfig, RunReport, optimize

__all__ = [
    "Direction",
    "DirectionKind",
    "FheConfig",
    "GlobalConfig",
    "LayerOverride",
    "ModelGraph",
    "RunConfig",
    "RunReport",
    "Scope",
    "optimize",
    "parse_model",
    "summarize_model",
]
__version__ = "0.1.0"

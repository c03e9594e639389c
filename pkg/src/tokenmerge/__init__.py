"""Differentiable token merging for parameter-efficient ViT tuning."""

from .adapters import AdapterWeights, adaptformer_branch, lora_delta, refine_keys, trainable_partition
from .autodiff import Node, Tape, ste, stop_gradient
from .flops import FlopsReport, layer_flops, model_flops
from .merging import (
    MatchResult,
    SplitAssignment,
    bdm_match,
    bdm_merge,
    bsm_match,
    bsm_merge,
    merge_apply,
    pool_merge,
    similarity,
    split,
)
from .model import VitConfig, VitModel, token_schedule
from .state import TokenState

__version__ = "0.1.0"

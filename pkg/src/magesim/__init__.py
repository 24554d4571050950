"""Mask-guided sparse attention simulator for block-diffusion decoding."""

from .config import ModelConfig, read_config_file
from .decoder import DecodeConfig, DenoiseTrace, denoise_block, generate, unmask_step
from .kvcache import KVCache, PageMeta, build_page_meta
from .mage import SelectionPlan, UnionStats, build_plan
from .model import BlockState, Model, build_model, forward_block

__all__ = [
    "BlockState", "DecodeConfig", "DenoiseTrace", "KVCache", "Model",
    "ModelConfig", "PageMeta", "SelectionPlan", "UnionStats",
    "build_model", "build_page_meta", "build_plan", "denoise_block",
    "forward_block", "generate", "read_config_file", "unmask_step",
]

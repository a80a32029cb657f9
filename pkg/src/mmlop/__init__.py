"""Low-rank deep prompts shared across the towers of a frozen toy image-text encoder."""

from .data import TaskSpec, gen_synthetic, split_base_novel
from .encoder import BackboneConfig, build_anchor, build_backbone, encode_image, encode_text
from .prompts import PromptConfig, PromptStack, count_params, init_stack, materialize
from .trainer import TrainConfig, evaluate, harmonic_mean, train, train_and_evaluate
from .udc import apply_udc

__all__ = [
    "BackboneConfig",
    "PromptConfig",
    "PromptStack",
    "TaskSpec",
    "TrainConfig",
    "apply_udc",
    "build_anchor",
    "build_backbone",
    "count_params",
    "encode_image",
    "encode_text",
    "evaluate",
    "gen_synthetic",
    "harmonic_mean",
    "init_stack",
    "materialize",
    "split_base_novel",
    "train",
    "train_and_evaluate",
]

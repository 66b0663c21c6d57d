"""Configuration management for the syntax-augmented attention toolkit."""

from config.model_config import (
    DELTA_PAIR,
    DELTA_SINGLE,
    FINETUNE_LEARNING_RATE,
    NUM_UPOS,
    PRETRAIN_LEARNING_RATE,
    ModelConfig,
    RunConfig,
    TrainingConfig,
    load_config_document,
)
from config.settings import Settings, get_settings, reset_settings

__all__ = [
    "DELTA_PAIR",
    "DELTA_SINGLE",
    "FINETUNE_LEARNING_RATE",
    "NUM_UPOS",
    "PRETRAIN_LEARNING_RATE",
    "ModelConfig",
    "RunConfig",
    "Settings",
    "TrainingConfig",
    "get_settings",
    "load_config_document",
    "reset_settings",
]

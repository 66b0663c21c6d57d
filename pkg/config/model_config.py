"""Architecture, training and run documents.

Field names double as CLI flag names (underscores become hyphens) and as JSON keys
of the ``--config`` document and of the ``resolved_config.json`` written by each run.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

NUM_UPOS = 18

# delta defaults: single-sentence inputs vs sentence pairs / passages
DELTA_SINGLE = 1
DELTA_PAIR = 4

PRETRAIN_LEARNING_RATE = 5e-4
FINETUNE_LEARNING_RATE = 1e-4


class ModelConfig(BaseModel):
    """Every architectural hyperparameter of the encoder, the GAT and the probe."""

    model_config = ConfigDict(extra="forbid")

    # Transformer encoder
    num_layers: int = Field(2, ge=1)
    num_heads: int = Field(2, ge=1)
    d_model: int = Field(32, ge=1)
    d_k: int = Field(16, ge=1)
    d_v: int = Field(16, ge=1)
    d_ff: Optional[int] = Field(None, ge=1)
    vocab_size: int = Field(128, ge=5)
    max_len: int = Field(64, ge=2)
    num_upos: int = NUM_UPOS

    # Graph attention network
    gat_layers: int = Field(4, ge=1)
    gat_heads: int = Field(4, ge=1)
    d_g: int = Field(64, ge=1)
    delta: int = Field(DELTA_SINGLE, ge=1)

    # Fusion
    syntax_layers: Optional[List[int]] = None
    syntax_heads: List[int] = Field(default_factory=lambda: [0])
    intervene_self_attention: bool = False

    # Probe and task head
    alpha: float = Field(0.5, ge=0.0)
    probe_rank: Optional[int] = Field(None, ge=1)
    num_labels: int = Field(2, ge=1)

    init_std: float = Field(0.02, gt=0.0)
    layer_norm_eps: float = Field(1e-12, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _resolve_defaults(self) -> "ModelConfig":
        if self.num_upos != NUM_UPOS:
            raise ValueError(f"num_upos is fixed at {NUM_UPOS}")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.syntax_layers is None:
            self.syntax_layers = list(range(self.num_layers))
        if self.probe_rank is None:
            self.probe_rank = self.gat_width
        self.syntax_layers = sorted(set(self.syntax_layers))
        self.syntax_heads = sorted(set(self.syntax_heads))
        bad_layers = [l for l in self.syntax_layers if not 0 <= l < self.num_layers]
        if bad_layers:
            raise ValueError(f"syntax_layers {bad_layers} outside [0, {self.num_layers})")
        bad_heads = [h for h in self.syntax_heads if not 0 <= h < self.num_heads]
        if bad_heads:
            raise ValueError(f"syntax_heads {bad_heads} outside [0, {self.num_heads})")
        return self

    @property
    def gat_width(self) -> int:
        """Width of the GAT output, k * d_g."""
        return self.gat_heads * self.d_g

    def is_syntax_head(self, layer: int, head: int) -> bool:
        return layer in self.syntax_layers and head in self.syntax_heads


class TrainingConfig(BaseModel):
    """Optimizer, schedule and objective switches."""

    model_config = ConfigDict(extra="forbid")

    learning_rate: Optional[float] = Field(None, gt=0.0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(5, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    warmup_fraction: float = Field(0.1, ge=0.0, le=1.0)
    linear_decay: bool = False
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    eval_interval: int = Field(50, ge=1)
    checkpoint_every: int = Field(100, ge=1)
    word_positions_only: bool = False
    probe_stop_gradient: bool = False
    strict_wordpieces: bool = False
    seed: int = 0

    def resolved_learning_rate(self, stage: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return PRETRAIN_LEARNING_RATE if stage == "pretrain" else FINETUNE_LEARNING_RATE


class RunConfig(BaseModel):
    """Fully resolved description of one CLI run."""

    model_config = ConfigDict(extra="forbid")

    subcommand: str
    input: Optional[str] = None
    output: Optional[str] = None
    vocab: Optional[str] = None
    checkpoint: Optional[str] = None
    gat_checkpoint: Optional[str] = None
    seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    options: Dict[str, Any] = Field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def write(self, directory: Union[str, Path]) -> Path:
        """Write ``resolved_config.json`` into ``directory``."""
        path = Path(directory) / "resolved_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def load_config_document(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a ``--config`` JSON document ({"model": {...}, "training": {...}})."""
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(document, dict):
        raise ValueError("config document must be a JSON object")
    unknown = set(document) - {"model", "training"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return document

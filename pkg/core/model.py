"""Transformer encoder, dependency graph attention network and their fusion.

All forward functions accept either a single sequence (ids of shape ``(n,)``, masks
``(n, n)``) or a padded batch (ids ``(B, n)``, masks ``(B, n, n)``).
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.model_config import ModelConfig
from core.checkpoint import read_container, write_container
from core.errors import CheckpointFormatError, ShapeMismatch
from core.numcore import (
    ParameterStore,
    Tensor,
    add,
    concat,
    embedding,
    gelu,
    layer_norm,
    matmul,
    normal_init,
    row_softmax,
    scale,
    select_position,
    transpose,
    xavier_uniform,
)

logger = logging.getLogger(__name__)

MODEL_KIND = "model"

# Parameters touched by GAT pre-training
GAT_PREFIXES = ("embeddings.token", "gat.", "probe.")


def attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    M: Optional[Union[Tensor, np.ndarray]],
    d: int,
    return_weights: bool = False,
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """softmax((Q K^T + M) / sqrt(d)) V.

    ``M`` may be ``None`` for the zero mask.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeMismatch(f"attention: query width {Q.shape[-1]} != key width {K.shape[-1]}")
    scores = matmul(Q, transpose(K))
    if M is not None:
        mask = M if isinstance(M, Tensor) else Tensor(M)
        if mask.shape[-2:] != scores.shape[-2:]:
            raise ShapeMismatch(f"attention: mask {mask.shape} does not fit scores {scores.shape}")
        scores = add(scores, mask)
    weights = row_softmax(scale(scores, 1.0 / math.sqrt(d)))
    out = matmul(weights, V)
    return (out, weights) if return_weights else out


@dataclass
class EncoderState:
    """Activations of one forward pass."""
    hidden: List[Tensor] = field(default_factory=list)  # H^0 .. H^L
    gat_output: Optional[Tensor] = None  # G, last GAT layer only

    @property
    def final(self) -> Tensor:
        return self.hidden[-1]


def _parameter_specs(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """(name, shape, init) for every parameter, in registration order."""
    d, kdg = config.d_model, config.gat_width
    specs: List[Tuple[str, Tuple[int, ...], str]] = [
        ("embeddings.token", (config.vocab_size, d), "normal"),
        ("embeddings.position", (config.max_len, d), "normal"),
        ("embeddings.segment", (2, d), "normal"),
        ("gat.pos", (config.num_upos, d), "normal"),
    ]
    for l in range(config.gat_layers):
        width_in = d if l == 0 else kdg
        for j in range(config.gat_heads):
            specs.append((f"gat.layer{l}.head{j}.T", (width_in, config.d_g), "xavier"))
            specs.append((f"gat.layer{l}.head{j}.V", (width_in, config.d_g), "xavier"))
    for l in range(config.num_layers):
        prefix = f"encoder.layer{l}"
        for j in range(config.num_heads):
            specs.append((f"{prefix}.head{j}.query", (d, config.d_k), "xavier"))
            specs.append((f"{prefix}.head{j}.key", (d, config.d_k), "xavier"))
            specs.append((f"{prefix}.head{j}.value", (d, config.d_v), "xavier"))
            if config.is_syntax_head(l, j) and not config.intervene_self_attention:
                specs.append((f"{prefix}.head{j}.syntax_query", (kdg, config.d_k), "xavier"))
                specs.append((f"{prefix}.head{j}.syntax_key", (kdg, config.d_k), "xavier"))
        specs += [
            (f"{prefix}.output", (config.num_heads * config.d_v, d), "xavier"),
            (f"{prefix}.attn_norm.gamma", (d,), "ones"),
            (f"{prefix}.attn_norm.beta", (d,), "zeros"),
            (f"{prefix}.ffn.w1", (d, config.d_ff), "xavier"),
            (f"{prefix}.ffn.b1", (config.d_ff,), "zeros"),
            (f"{prefix}.ffn.w2", (config.d_ff, d), "xavier"),
            (f"{prefix}.ffn.b2", (d,), "zeros"),
            (f"{prefix}.ffn_norm.gamma", (d,), "ones"),
            (f"{prefix}.ffn_norm.beta", (d,), "zeros"),
        ]
    specs += [
        ("classifier.weight", (d, config.num_labels), "xavier"),
        ("classifier.bias", (config.num_labels,), "zeros"),
        ("probe.distance", (config.probe_rank, kdg), "xavier"),
        ("probe.depth", (config.probe_rank, kdg), "xavier"),
    ]
    return specs


def parameter_counts(config: ModelConfig) -> Dict[str, int]:
    """Exact parameter counts per component, without allocating the model."""
    groups = {"embeddings": 0, "gat": 0, "encoder": 0, "classifier": 0, "probe": 0}
    for name, shape, _ in _parameter_specs(config):
        groups[name.split(".", 1)[0]] += int(np.prod(shape))
    groups["total"] = sum(groups.values())
    return groups


class SyntaxAugmentedEncoder:
    """Transformer encoder whose syntax heads are biased by a dependency GAT."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.params = ParameterStore()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        for name, shape, init in _parameter_specs(config):
            if init == "normal":
                value = normal_init(rng, shape, config.init_std)
            elif init == "xavier":
                value = xavier_uniform(rng, shape[0], shape[1])
            elif init == "ones":
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            self.params.add(name, value)
        logger.debug(f"Initialized {len(self.params)} parameter tensors ({self.params.count()} values)")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # Embeddings

    def embed_tokens(
        self,
        token_ids: np.ndarray,
        position_ids: Optional[np.ndarray] = None,
        segment_ids: Optional[np.ndarray] = None,
    ) -> Tensor:
        """H^0 = W_e[token] + W_p[position] (+ segment embedding for sentence pairs)."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if position_ids is None:
            position_ids = np.broadcast_to(np.arange(token_ids.shape[-1]), token_ids.shape)
        out = add(embedding(self.params["embeddings.token"], token_ids),
                  embedding(self.params["embeddings.position"], position_ids))
        if segment_ids is not None:
            out = add(out, embedding(self.params["embeddings.segment"], segment_ids))
        return out

    def gat_embed(self, token_ids: np.ndarray, pos_tag_ids: np.ndarray) -> Tensor:
        """Token embedding (shared table) plus UPOS embedding; no position term."""
        return add(embedding(self.params["embeddings.token"], token_ids),
                   embedding(self.params["gat.pos"], pos_tag_ids))

    # Graph attention network

    def gat_layer(self, layer: int, inputs: Tensor, mask: Union[Tensor, np.ndarray]) -> Tensor:
        """One GAT layer: per head, T serves as both query and key; heads are concatenated."""
        expected = self.config.d_model if layer == 0 else self.config.gat_width
        if inputs.shape[-1] != expected:
            raise ShapeMismatch(f"GAT layer {layer} expects width {expected}, got {inputs.shape[-1]}")
        heads = []
        for j in range(self.config.gat_heads):
            T = matmul(inputs, self.params[f"gat.layer{layer}.head{j}.T"])
            V = matmul(inputs, self.params[f"gat.layer{layer}.head{j}.V"])
            heads.append(attention(T, T, V, mask, self.config.d_g))
        return concat(heads)

    def gat_forward(self, token_ids: np.ndarray, pos_tag_ids: np.ndarray,
                    mask: Union[Tensor, np.ndarray]) -> Tensor:
        """G: output of the last GAT layer."""
        g = self.gat_embed(token_ids, pos_tag_ids)
        for l in range(self.config.gat_layers):
            g = self.gat_layer(l, g, mask)
        return g

    # Transformer encoder

    def fused_attention_head(
        self,
        hidden: Tensor,
        gat_output: Optional[Tensor],
        layer: int,
        head: int,
        attn_mask: Optional[np.ndarray] = None,
        dep_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """One attention head; syntax heads add G G^Q_l and G G^K_l to queries and keys."""
        prefix = f"encoder.layer{layer}.head{head}"
        Q = matmul(hidden, self.params[f"{prefix}.query"])
        K = matmul(hidden, self.params[f"{prefix}.key"])
        V = matmul(hidden, self.params[f"{prefix}.value"])
        mask = attn_mask
        if self.config.is_syntax_head(layer, head):
            if self.config.intervene_self_attention:
                if dep_mask is not None:
                    mask = dep_mask
            elif gat_output is not None:
                if gat_output.shape[-1] != self.config.gat_width:
                    raise ShapeMismatch(f"G width {gat_output.shape[-1]} != {self.config.gat_width}")
                Q = add(Q, matmul(gat_output, self.params[f"{prefix}.syntax_query"]))
                K = add(K, matmul(gat_output, self.params[f"{prefix}.syntax_key"]))
        return attention(Q, K, V, mask, self.config.d_k)

    def encoder_layer(
        self,
        layer: int,
        hidden: Tensor,
        gat_output: Optional[Tensor],
        attn_mask: Optional[np.ndarray] = None,
        dep_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        prefix = f"encoder.layer{layer}"
        eps = self.config.layer_norm_eps
        heads = [self.fused_attention_head(hidden, gat_output, layer, j, attn_mask, dep_mask)
                 for j in range(self.config.num_heads)]
        attended = matmul(concat(heads), self.params[f"{prefix}.output"])
        x = layer_norm(add(hidden, attended),
                       self.params[f"{prefix}.attn_norm.gamma"], self.params[f"{prefix}.attn_norm.beta"], eps)
        inner = gelu(add(matmul(x, self.params[f"{prefix}.ffn.w1"]), self.params[f"{prefix}.ffn.b1"]))
        ffn = add(matmul(inner, self.params[f"{prefix}.ffn.w2"]), self.params[f"{prefix}.ffn.b2"])
        return layer_norm(add(x, ffn),
                          self.params[f"{prefix}.ffn_norm.gamma"], self.params[f"{prefix}.ffn_norm.beta"], eps)

    def encoder_forward(
        self,
        token_ids: np.ndarray,
        position_ids: Optional[np.ndarray] = None,
        pos_tag_ids: Optional[np.ndarray] = None,
        dep_mask: Optional[np.ndarray] = None,
        attn_mask: Optional[np.ndarray] = None,
        segment_ids: Optional[np.ndarray] = None,
    ) -> EncoderState:
        """Run the GAT once (when a dependency mask is given), then every encoder layer.

        ``dep_mask`` is the GAT mask (delta mask plus padding); ``attn_mask`` is the
        transformer's own mask, zero apart from padding.
        """
        state = EncoderState()
        if dep_mask is not None:
            if pos_tag_ids is None:
                raise ShapeMismatch("pos_tag_ids are required when a dependency mask is given")
            state.gat_output = self.gat_forward(token_ids, pos_tag_ids, dep_mask)
        hidden = self.embed_tokens(token_ids, position_ids, segment_ids)
        state.hidden.append(hidden)
        for l in range(self.config.num_layers):
            hidden = self.encoder_layer(l, hidden, state.gat_output, attn_mask, dep_mask)
            state.hidden.append(hidden)
        return state

    # Task head

    def classify_logits(self, hidden: Tensor) -> Tensor:
        """W_c H^L[0] + b_c; position 0 is [CLS]."""
        projected = matmul(hidden, self.params["classifier.weight"])
        return add(select_position(projected, 0), self.params["classifier.bias"])

    def classify(self, hidden: Tensor) -> Tensor:
        """Label distribution from the [CLS] representation."""
        return row_softmax(self.classify_logits(hidden))

    # Persistence

    def save(self, path: Union[str, Path], vocab_pieces: Optional[Sequence[str]] = None,
             extra: Optional[Dict[str, Any]] = None) -> Path:
        metadata: Dict[str, Any] = {"kind": MODEL_KIND, "config": self.config.model_dump(mode="json")}
        if vocab_pieces is not None:
            metadata["vocab"] = list(vocab_pieces)
        if extra:
            metadata.update(extra)
        return write_container(path, self.params.to_arrays(), metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["SyntaxAugmentedEncoder", Dict[str, Any]]:
        """Rebuild a model from a checkpoint; returns the model and the header."""
        arrays, metadata = read_container(path)
        if "config" not in metadata:
            raise CheckpointFormatError("checkpoint header has no model config", source=str(path))
        model = cls(ModelConfig(**metadata["config"]))
        model.load_parameters(arrays, source=str(path))
        return model, metadata

    def load_parameters(self, arrays: Dict[str, np.ndarray], source: Optional[str] = None) -> None:
        """Copy every parameter from ``arrays``; entries that are not parameters are ignored."""
        try:
            self.params.load_arrays({k: v for k, v in arrays.items() if k in self.params}, strict=True)
        except KeyError as e:
            raise CheckpointFormatError(f"checkpoint does not match the model: {e.args[0]}", source=source) from None

    def load_gat_weights(self, path: Union[str, Path]) -> List[str]:
        """Copy shared embeddings, GAT and probe parameters from a pre-training checkpoint."""
        arrays, _ = read_container(path)
        wanted = {name: value for name, value in arrays.items()
                  if name.startswith(GAT_PREFIXES) and name in self.params}
        if not wanted:
            raise CheckpointFormatError("checkpoint holds no GAT parameters", source=str(path))
        loaded = self.params.load_arrays(wanted, strict=False)
        logger.info(f"Loaded {len(loaded)} GAT/probe tensors from {path}")
        return loaded

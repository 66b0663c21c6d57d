"""GAT pre-training, joint fine-tuning and the Adam optimizer.

Training state (parameters, Adam moments, step, RNG state and loss history) lives in
one checkpoint container, so an interrupted run resumes on the same trajectory.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.model_config import ModelConfig, TrainingConfig
from core.batching import Batch, BatchLoader, EncodedExample
from core.checkpoint import read_container, write_container
from core.errors import CheckpointFormatError, EmptyCorpus, LabelOutOfRange, NonFiniteGradient
from core.model import GAT_PREFIXES, SyntaxAugmentedEncoder
from core.numcore import Tensor, Tape, cross_entropy, no_grad
from core.probe import combined_loss, depth_loss, distance_loss, pred_sq_depths, pred_sq_distances, ProbeParams

logger = logging.getLogger(__name__)

TRAIN_STATE_KIND = "train_state"
METRIC_KEYS = ("step", "l_task", "l_dist", "l_depth", "accuracy")


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""
    stage: str
    step: int = 0
    total_steps: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    epoch_rng_state: Optional[Dict[str, Any]] = None
    losses: List[float] = field(default_factory=list)
    history: List[Dict[str, Any]] = field(default_factory=list)

    @classmethod
    def fresh(cls, stage: str, seed: int) -> "TrainState":
        return cls(stage=stage, rng=np.random.default_rng(seed))


@dataclass
class LossTerms:
    """Losses of one batch; ``total`` carries the tape."""
    total: Tensor
    l_task: Optional[float] = None
    l_dist: Optional[float] = None
    l_depth: Optional[float] = None
    accuracy: Optional[float] = None


def learning_rate_at(step: int, base_lr: float, total_steps: int, warmup_fraction: float,
                     linear_decay: bool = False) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then constant.

    With ``linear_decay`` the rate falls linearly after warmup, reaching
    ``base_lr / (total_steps - warmup)`` on the last step.
    """
    warmup = math.ceil(warmup_fraction * total_steps)
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if linear_decay and total_steps > warmup:
        return base_lr * (total_steps - step) / (total_steps - warmup)
    return base_lr


def optimizer_step(state: TrainState, params: Dict[str, Tensor], config: TrainingConfig,
                   base_lr: float) -> TrainState:
    """One Adam update from the gradients stored on ``params``."""
    for name, tensor in params.items():
        if tensor.grad is None or not np.all(np.isfinite(tensor.grad)):
            raise NonFiniteGradient(f"gradient of {name} is missing or not finite at step {state.step}")
    lr = learning_rate_at(state.step, base_lr, state.total_steps, config.warmup_fraction,
                          config.linear_decay)
    t = state.step + 1
    correction1 = 1.0 - config.beta1 ** t
    correction2 = 1.0 - config.beta2 ** t
    for name, tensor in params.items():
        g = tensor.grad
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
    state.step = t
    return state


# Losses

def probe_losses(model: SyntaxAugmentedEncoder, G: Tensor, batch: Batch,
                 config: TrainingConfig) -> Tuple[Tensor, Tensor]:
    """Distance and depth losses of the probe on GAT output ``G``."""
    probe = ProbeParams.from_store(model.params)
    source = G.detach() if config.probe_stop_gradient else G
    valid = batch.valid_positions(config.word_positions_only)
    l_dist = distance_loss(pred_sq_distances(probe.distance, source), batch.distances, valid)
    l_depth = depth_loss(pred_sq_depths(probe.depth, source), batch.depths, valid)
    return l_dist, l_depth


def pretrain_losses(model: SyntaxAugmentedEncoder, batch: Batch, config: TrainingConfig) -> LossTerms:
    """L_dist + L_depth; only the GAT runs."""
    G = model.gat_forward(batch.token_ids, batch.pos_tag_ids, batch.dep_mask)
    l_dist, l_depth = probe_losses(model, G, batch, config)
    return LossTerms(total=l_dist + l_depth, l_dist=l_dist.item(), l_depth=l_depth.item())


def joint_losses(model: SyntaxAugmentedEncoder, batch: Batch, config: TrainingConfig,
                 alpha: Optional[float] = None) -> LossTerms:
    """L_task + alpha (L_dist + L_depth) on a labeled batch."""
    if not batch.has_labels:
        raise LabelOutOfRange("fine-tuning needs a label on every example",
                              sentence_id=batch.sentence_ids[int(np.argmin(batch.labels))])
    alpha = model.config.alpha if alpha is None else alpha
    state = model.encoder_forward(batch.token_ids, batch.position_ids, batch.pos_tag_ids,
                                  dep_mask=batch.dep_mask, attn_mask=batch.attn_mask,
                                  segment_ids=batch.segment_ids)
    logits = model.classify_logits(state.final)
    l_task = cross_entropy(logits, batch.labels)
    l_dist, l_depth = probe_losses(model, state.gat_output, batch, config)
    accuracy = float(np.mean(np.argmax(logits.data, axis=-1) == batch.labels))
    return LossTerms(total=combined_loss(l_task, l_dist, l_depth, alpha), l_task=l_task.item(),
                     l_dist=l_dist.item(), l_depth=l_depth.item(), accuracy=accuracy)


# Loops

def _metric_record(step: int, window: List[LossTerms], tags: Dict[str, Any]) -> Dict[str, Any]:
    record: Dict[str, Any] = {"step": step}
    for key in METRIC_KEYS[1:]:
        values = [getattr(t, key) for t in window if getattr(t, key) is not None]
        record[key] = float(np.mean(values)) if values else None
    record.update(tags)
    return record


def _run(
    model: SyntaxAugmentedEncoder,
    examples: Sequence[EncodedExample],
    config: TrainingConfig,
    stage: str,
    loss_fn,
    trainable: Dict[str, Tensor],
    state: Optional[TrainState] = None,
    metrics=None,
    tags: Optional[Dict[str, Any]] = None,
    num_workers: int = 0,
    prefetch: int = 2,
    checkpoint_path: Optional[Union[str, Path]] = None,
    vocab_pieces: Optional[Sequence[str]] = None,
) -> TrainState:
    if not examples:
        raise EmptyCorpus(f"{stage}: the corpus is empty")
    loader = BatchLoader(examples, config.batch_size, seed=config.seed, shuffle=True,
                         num_workers=num_workers, prefetch=prefetch)
    per_epoch = len(loader)
    total = config.epochs * per_epoch
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    state = state or TrainState.fresh(stage, config.seed)
    state.total_steps = total
    base_lr = config.resolved_learning_rate(stage)
    tags = dict(tags or {})
    logger.info(f"{stage}: {len(examples)} examples, {per_epoch} batches/epoch, {total} steps, lr {base_lr}")

    window: List[LossTerms] = []
    while state.step < total:
        epoch, skip = divmod(state.step, per_epoch)
        if skip == 0 or state.epoch_rng_state is None:
            state.epoch_rng_state = copy.deepcopy(state.rng.bit_generator.state)
        else:
            state.rng.bit_generator.state = copy.deepcopy(state.epoch_rng_state)
        epoch_terms: List[LossTerms] = []
        for batch in loader.iter_epoch(epoch, rng=state.rng, skip=skip):
            with Tape() as tape:
                terms = loss_fn(batch)
                tape.backward(terms.total, params=trainable.values())
            optimizer_step(state, trainable, config, base_lr)
            state.losses.append(terms.total.item())
            window.append(terms)
            epoch_terms.append(terms)
            logger.debug(f"{stage} step {state.step}: loss {state.losses[-1]:.6f}")
            if state.step % config.eval_interval == 0 or state.step == total:
                record = _metric_record(state.step, window, tags)
                state.history.append(record)
                if metrics is not None:
                    metrics.write(record)
                window = []
            if checkpoint_path is not None and state.step % config.checkpoint_every == 0:
                save_train_state(checkpoint_path, model, state, config, vocab_pieces)
                logger.debug(f"Saved training state at step {state.step} to {checkpoint_path}")
            if state.step >= total:
                break
        mean = float(np.mean([t.total.item() for t in epoch_terms])) if epoch_terms else float("nan")
        logger.info(f"{stage} epoch {epoch + 1}: mean loss {mean:.6f} (step {state.step}/{total})")
    return state


def pretrain_gat(
    model: SyntaxAugmentedEncoder,
    examples: Sequence[EncodedExample],
    config: TrainingConfig,
    state: Optional[TrainState] = None,
    metrics=None,
    num_workers: int = 0,
    prefetch: int = 2,
    checkpoint_path: Optional[Union[str, Path]] = None,
    vocab_pieces: Optional[Sequence[str]] = None,
) -> TrainState:
    """Fit shared embeddings, GAT and probe to tree distances and depths."""
    trainable = model.params.subset(GAT_PREFIXES)
    return _run(model, examples, config, "pretrain", lambda b: pretrain_losses(model, b, config),
                trainable, state=state, metrics=metrics, tags={"run": "pretrain"},
                num_workers=num_workers, prefetch=prefetch,
                checkpoint_path=checkpoint_path, vocab_pieces=vocab_pieces)


def finetune(
    model: SyntaxAugmentedEncoder,
    examples: Sequence[EncodedExample],
    config: TrainingConfig,
    state: Optional[TrainState] = None,
    metrics=None,
    run: str = "syntax",
    num_workers: int = 0,
    prefetch: int = 2,
    checkpoint_path: Optional[Union[str, Path]] = None,
    vocab_pieces: Optional[Sequence[str]] = None,
) -> TrainState:
    """Minimize L_task + alpha (L_dist + L_depth) over every parameter."""
    trainable = dict(model.params.items())
    tags = {"alpha": model.config.alpha, "run": run}
    return _run(model, examples, config, "finetune", lambda b: joint_losses(model, b, config),
                trainable, state=state, metrics=metrics, tags=tags,
                num_workers=num_workers, prefetch=prefetch,
                checkpoint_path=checkpoint_path, vocab_pieces=vocab_pieces)


def finetune_with_baseline(
    model: SyntaxAugmentedEncoder,
    examples: Sequence[EncodedExample],
    config: TrainingConfig,
    metrics=None,
    num_workers: int = 0,
    prefetch: int = 2,
    checkpoint_path: Optional[Union[str, Path]] = None,
    vocab_pieces: Optional[Sequence[str]] = None,
) -> Tuple[TrainState, SyntaxAugmentedEncoder, TrainState]:
    """Fine-tune, then repeat from the same initialization with alpha = 0.

    Only the first run writes periodic training state.
    """
    initial = model.params.to_arrays()
    state = finetune(model, examples, config, metrics=metrics, run="syntax",
                     num_workers=num_workers, prefetch=prefetch,
                     checkpoint_path=checkpoint_path, vocab_pieces=vocab_pieces)
    baseline = SyntaxAugmentedEncoder(model.config.model_copy(update={"alpha": 0.0}))
    baseline.params.load_arrays(initial)
    baseline_state = finetune(baseline, examples, config, metrics=metrics, run="alpha0",
                              num_workers=num_workers, prefetch=prefetch)
    return state, baseline, baseline_state


def evaluate_accuracy(model: SyntaxAugmentedEncoder, batches: Iterable[Batch]) -> float:
    """Fraction of examples whose argmax label matches."""
    correct = 0
    seen = 0
    with no_grad():
        for batch in batches:
            state = model.encoder_forward(batch.token_ids, batch.position_ids, batch.pos_tag_ids,
                                          dep_mask=batch.dep_mask, attn_mask=batch.attn_mask,
                                          segment_ids=batch.segment_ids)
            predicted = np.argmax(model.classify_logits(state.final).data, axis=-1)
            correct += int(np.sum(predicted == batch.labels))
            seen += len(batch)
    if seen == 0:
        raise EmptyCorpus("no examples to evaluate")
    return correct / seen


# Persistence

def save_train_state(path: Union[str, Path], model: SyntaxAugmentedEncoder, state: TrainState,
                     training: TrainingConfig, vocab_pieces: Optional[Sequence[str]] = None) -> Path:
    arrays = model.params.to_arrays()
    arrays.update({f"adam.m/{k}": v for k, v in state.m.items()})
    arrays.update({f"adam.v/{k}": v for k, v in state.v.items()})
    arrays["history.losses"] = np.asarray(state.losses, dtype=np.float64)
    metadata = {
        "kind": TRAIN_STATE_KIND,
        "stage": state.stage,
        "step": state.step,
        "total_steps": state.total_steps,
        "rng_state": state.rng.bit_generator.state,
        "epoch_rng_state": state.epoch_rng_state,
        "history": state.history,
        "config": model.config.model_dump(mode="json"),
        "training": training.model_dump(mode="json"),
    }
    if vocab_pieces is not None:
        metadata["vocab"] = list(vocab_pieces)
    return write_container(path, arrays, metadata)


def load_train_state(path: Union[str, Path]) -> Tuple[SyntaxAugmentedEncoder, TrainState, Dict[str, Any]]:
    """Rebuild the model and its training state; returns the header as well."""
    arrays, metadata = read_container(path)
    if metadata.get("kind") != TRAIN_STATE_KIND:
        raise CheckpointFormatError(f"not a training state (kind={metadata.get('kind')!r})", source=str(path))
    model = SyntaxAugmentedEncoder(ModelConfig(**metadata["config"]))
    model.load_parameters(arrays, source=str(path))
    rng = np.random.default_rng()
    rng.bit_generator.state = metadata["rng_state"]
    state = TrainState(
        stage=metadata["stage"],
        step=int(metadata["step"]),
        total_steps=int(metadata["total_steps"]),
        m={k[len("adam.m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")},
        v={k[len("adam.v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")},
        rng=rng,
        epoch_rng_state=metadata.get("epoch_rng_state"),
        losses=arrays["history.losses"].tolist(),
        history=list(metadata.get("history", [])),
    )
    return model, state, metadata

"""Encoding examples to model inputs, padding them into batches and batch files."""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.model_config import ModelConfig
from core.checkpoint import read_container, write_container
from core.conllu import (
    CLS,
    SEP,
    SPECIAL_UPOS_ID,
    ParsedSentence,
    Vocabulary,
    wordpiece_tokenize,
)
from core.deptree import (
    DepGraph,
    PositionKind,
    SPECIAL_KINDS,
    depth_vector,
    distance_matrix,
    mask_from_distance,
    merge_graphs,
    sentence_piece_graph,
)
from core.errors import CheckpointFormatError, EmptyCorpus, LabelOutOfRange, SequenceTooLong

logger = logging.getLogger(__name__)

BATCH_FILE_KIND = "batches"
NO_LABEL = -1
_KIND_CODES = {kind: i for i, kind in enumerate(PositionKind)}
_KINDS_BY_CODE = list(PositionKind)


@dataclass
class EncodedExample:
    """One (possibly multi-sentence) example as model inputs plus its gold structure."""
    sentence_ids: Tuple[str, ...]
    pieces: Tuple[str, ...]
    token_ids: np.ndarray
    pos_tag_ids: np.ndarray
    graph: DepGraph
    distances: np.ndarray
    depths: np.ndarray
    dep_mask: np.ndarray
    label: int = NO_LABEL
    segment_ids: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def example_id(self) -> str:
        return "+".join(self.sentence_ids)


def encode_example(
    sentences: Sequence[ParsedSentence],
    vocab: Vocabulary,
    config: ModelConfig,
    strict: bool = False,
) -> EncodedExample:
    """Tokenize, build the position graph and derive distances, depths and the delta mask."""
    pieces: List[str] = [CLS]
    pos_tags: List[int] = [SPECIAL_UPOS_ID]
    segments: List[int] = [0]
    graphs: List[DepGraph] = []
    for index, sentence in enumerate(sentences):
        align = wordpiece_tokenize(sentence.words, vocab, strict=strict)
        graphs.append(sentence_piece_graph(sentence, align))
        for word, (start, stop) in enumerate(align.word_spans):
            pos_tags.extend([sentence.upos[word]] * (stop - start))
        pieces.extend(align.pieces)
        pieces.append(SEP)
        pos_tags.append(SPECIAL_UPOS_ID)
        segments.extend([index % 2] * (len(align.pieces) + 1))

    first = sentences[0]
    if len(pieces) > config.max_len:
        raise SequenceTooLong(f"{len(pieces)} positions exceed max_len {config.max_len}",
                              sentence_id=first.sentence_id)
    label = NO_LABEL if first.label is None else int(first.label)
    if label != NO_LABEL and not 0 <= label < config.num_labels:
        raise LabelOutOfRange(f"label {label} outside [0, {config.num_labels})",
                              sentence_id=first.sentence_id)

    graph = merge_graphs(graphs)
    distances = distance_matrix(graph)
    return EncodedExample(
        sentence_ids=tuple(s.sentence_id for s in sentences),
        pieces=tuple(pieces),
        token_ids=np.asarray(vocab.ids(pieces), dtype=np.int64),
        pos_tag_ids=np.asarray(pos_tags, dtype=np.int64),
        graph=graph,
        distances=distances,
        depths=depth_vector(graph),
        dep_mask=mask_from_distance(distances, config.delta),
        label=label,
        segment_ids=np.asarray(segments, dtype=np.int64) if len(sentences) > 1 else None,
    )


@dataclass
class Batch:
    """Padded model inputs for a group of examples.

    Padding rows may attend only to themselves; valid rows never attend to padding.
    """
    token_ids: np.ndarray
    position_ids: np.ndarray
    pos_tag_ids: np.ndarray
    lengths: np.ndarray
    distances: np.ndarray
    depths: np.ndarray
    dep_mask: np.ndarray
    attn_mask: np.ndarray
    labels: np.ndarray
    word_mask: np.ndarray
    graphs: List[DepGraph] = field(default_factory=list)
    sentence_ids: List[str] = field(default_factory=list)
    segment_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def n_max(self) -> int:
        return int(self.token_ids.shape[1])

    def valid_positions(self, word_positions_only: bool = False) -> np.ndarray:
        """Boolean (B, n) mask of positions that take part in probe losses."""
        within = np.arange(self.n_max)[None, :] < self.lengths[:, None]
        return within & self.word_mask if word_positions_only else within

    @property
    def has_labels(self) -> bool:
        return bool(np.all(self.labels != NO_LABEL))


def make_batch(examples: Sequence[EncodedExample], n_max: Optional[int] = None, pad_id: int = 0) -> Batch:
    """Pad examples to a common length (the longest one unless ``n_max`` is given)."""
    if not examples:
        raise EmptyCorpus("cannot batch zero examples")
    longest = max(e.length for e in examples)
    n_max = longest if n_max is None else n_max
    if n_max < longest:
        raise SequenceTooLong(f"n_max {n_max} is shorter than the longest example ({longest})")
    size = len(examples)

    token_ids = np.full((size, n_max), pad_id, dtype=np.int64)
    pos_tag_ids = np.full((size, n_max), SPECIAL_UPOS_ID, dtype=np.int64)
    distances = np.zeros((size, n_max, n_max), dtype=np.int64)
    depths = np.zeros((size, n_max), dtype=np.int64)
    dep_mask = np.full((size, n_max, n_max), -np.inf)
    attn_mask = np.full((size, n_max, n_max), -np.inf)
    word_mask = np.zeros((size, n_max), dtype=bool)
    any_segments = any(e.segment_ids is not None for e in examples)
    segment_ids = np.zeros((size, n_max), dtype=np.int64) if any_segments else None
    diagonal = np.arange(n_max)

    for b, example in enumerate(examples):
        n = example.length
        token_ids[b, :n] = example.token_ids
        pos_tag_ids[b, :n] = example.pos_tag_ids
        distances[b, :n, :n] = example.distances
        depths[b, :n] = example.depths
        dep_mask[b, :n, :n] = example.dep_mask
        attn_mask[b, :n, :n] = 0.0
        pad = diagonal[n:]
        dep_mask[b, pad, pad] = 0.0
        attn_mask[b, pad, pad] = 0.0
        word_mask[b, :n] = [k not in SPECIAL_KINDS for k in example.graph.position_kind]
        if segment_ids is not None and example.segment_ids is not None:
            segment_ids[b, :n] = example.segment_ids

    return Batch(
        token_ids=token_ids,
        position_ids=np.broadcast_to(diagonal, (size, n_max)).copy(),
        pos_tag_ids=pos_tag_ids,
        lengths=np.asarray([e.length for e in examples], dtype=np.int64),
        distances=distances,
        depths=depths,
        dep_mask=dep_mask,
        attn_mask=attn_mask,
        labels=np.asarray([e.label for e in examples], dtype=np.int64),
        word_mask=word_mask,
        graphs=[e.graph for e in examples],
        sentence_ids=[e.example_id for e in examples],
        segment_ids=segment_ids,
    )


# Batch files

def save_batch_file(path: Union[str, Path], examples: Sequence[EncodedExample],
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Store encoded examples in the checkpoint container."""
    arrays: Dict[str, np.ndarray] = {}
    records = []
    for i, example in enumerate(examples):
        key = f"example{i:06d}"
        arrays[f"{key}.token_ids"] = example.token_ids
        arrays[f"{key}.pos_tag_ids"] = example.pos_tag_ids
        arrays[f"{key}.parent"] = np.asarray(example.graph.parent, dtype=np.int64)
        arrays[f"{key}.kinds"] = np.asarray([_KIND_CODES[k] for k in example.graph.position_kind],
                                            dtype=np.int64)
        if example.segment_ids is not None:
            arrays[f"{key}.segment_ids"] = example.segment_ids
        records.append({"sentence_ids": list(example.sentence_ids), "pieces": list(example.pieces),
                        "label": example.label})
    header = dict(metadata or {})
    header.update({"kind": BATCH_FILE_KIND, "examples": records})
    return write_container(path, arrays, header)


def load_batch_file(path: Union[str, Path], delta: Optional[int] = None) -> Tuple[List[EncodedExample], Dict[str, Any]]:
    """Read examples back; distances, depths and masks are rebuilt from the stored graphs.

    ``delta`` overrides the radius recorded in the file.
    """
    arrays, metadata = read_container(path)
    if metadata.get("kind") != BATCH_FILE_KIND:
        raise CheckpointFormatError(f"not a batch file (kind={metadata.get('kind')!r})", source=str(path))
    radius = delta if delta is not None else metadata.get("delta", 1)
    examples = []
    for i, record in enumerate(metadata["examples"]):
        key = f"example{i:06d}"
        graph = DepGraph(parent=tuple(arrays[f"{key}.parent"].tolist()),
                         position_kind=tuple(_KINDS_BY_CODE[c] for c in arrays[f"{key}.kinds"].tolist()))
        distances = distance_matrix(graph)
        examples.append(EncodedExample(
            sentence_ids=tuple(record["sentence_ids"]),
            pieces=tuple(record["pieces"]),
            token_ids=arrays[f"{key}.token_ids"],
            pos_tag_ids=arrays[f"{key}.pos_tag_ids"],
            graph=graph,
            distances=distances,
            depths=depth_vector(graph),
            dep_mask=mask_from_distance(distances, radius),
            label=int(record["label"]),
            segment_ids=arrays.get(f"{key}.segment_ids"),
        ))
    logger.info(f"Loaded {len(examples)} examples from {path}")
    return examples, metadata


class BatchLoader:
    """Epoch-wise batch iterator with a fixed-seed order.

    With ``num_workers > 0`` batches are padded on a thread pool up to
    ``prefetch`` batches ahead and still yielded in order.
    """

    def __init__(
        self,
        examples: Sequence[EncodedExample],
        batch_size: int,
        seed: int = 0,
        shuffle: bool = True,
        num_workers: int = 0,
        prefetch: int = 2,
        pad_id: int = 0,
    ):
        if not examples:
            raise EmptyCorpus("no examples to load")
        self.examples = list(examples)
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.num_workers = num_workers
        self.prefetch = max(1, prefetch)
        self.pad_id = pad_id

    def __len__(self) -> int:
        return -(-len(self.examples) // self.batch_size)

    def epoch_order(self, epoch: int, rng: Optional[np.random.Generator] = None) -> List[List[int]]:
        """Index groups for one epoch; ``rng`` replaces the (seed, epoch) generator."""
        order = np.arange(len(self.examples))
        if self.shuffle:
            generator = rng if rng is not None else np.random.default_rng([self.seed, epoch])
            order = generator.permutation(len(self.examples))
        return [order[i:i + self.batch_size].tolist() for i in range(0, len(order), self.batch_size)]

    def _assemble(self, indices: List[int]) -> Batch:
        return make_batch([self.examples[i] for i in indices], pad_id=self.pad_id)

    def iter_epoch(self, epoch: int = 0, rng: Optional[np.random.Generator] = None,
                   skip: int = 0) -> Iterator[Batch]:
        """Batches of one epoch, leaving out the first ``skip``."""
        groups = self.epoch_order(epoch, rng)[skip:]
        if self.num_workers <= 0:
            for group in groups:
                yield self._assemble(group)
            return
        with ThreadPoolExecutor(max_workers=self.num_workers, thread_name_prefix="batch") as pool:
            pending: Deque = deque()
            upcoming = iter(groups)
            for group in upcoming:
                pending.append(pool.submit(self._assemble, group))
                if len(pending) >= self.prefetch:
                    break
            while pending:
                batch = pending.popleft().result()
                nxt = next(upcoming, None)
                if nxt is not None:
                    pending.append(pool.submit(self._assemble, nxt))
                yield batch

    def __iter__(self) -> Iterator[Batch]:
        return self.iter_epoch(0)

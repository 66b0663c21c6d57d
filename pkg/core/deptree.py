"""Dependency graphs over model positions and the structures derived from them.

A sentence's word-level tree is moved onto wordpieces (continuation pieces hang off
their word's head piece) and closed with special symbols: [CLS] roots the graph and
parents every sentence root and every [SEP]. Distances are shortest paths on the
undirected tree.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple, Union

import numpy as np

from core.conllu import ROOT, ParsedSentence, WordpieceAlignment, check_tree
from core.errors import EmptySentence, LengthMismatch

logger = logging.getLogger(__name__)

# D as an (n, n) integer array, M as an (n, n) float array of 0 / -inf,
# depths as an (n,) integer array.
DistanceMatrix = np.ndarray
AttentionMask = np.ndarray
DepthVector = np.ndarray

NEG_INF = -math.inf


class PositionKind(str, Enum):
    """Role of a model position."""
    CLS = "cls"
    SEP = "sep"
    HEAD_PIECE = "head"
    CONTINUATION = "continuation"


SPECIAL_KINDS = (PositionKind.CLS, PositionKind.SEP)


@dataclass(frozen=True)
class DepGraph:
    """Rooted tree over positions; ``parent[i]`` is ROOT for the root position."""
    parent: Tuple[int, ...]
    position_kind: Tuple[PositionKind, ...]

    def __post_init__(self):
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        object.__setattr__(self, "position_kind", tuple(PositionKind(k) for k in self.position_kind))
        if len(self.parent) != len(self.position_kind):
            raise LengthMismatch("parent and position_kind differ in length")

    @property
    def n_positions(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return self.parent.index(ROOT)

    def edges(self) -> List[Tuple[int, int]]:
        """Undirected edges as (min, max) index pairs, sorted."""
        return sorted((min(i, p), max(i, p)) for i, p in enumerate(self.parent) if p != ROOT)

    def children(self, node: int) -> List[int]:
        return [i for i, p in enumerate(self.parent) if p == node]

    def adjacency(self) -> List[List[int]]:
        neighbours: List[List[int]] = [[] for _ in range(self.n_positions)]
        for child, parent in enumerate(self.parent):
            if parent != ROOT:
                neighbours[child].append(parent)
                neighbours[parent].append(child)
        return neighbours

    def word_positions(self) -> List[int]:
        return [i for i, k in enumerate(self.position_kind) if k not in SPECIAL_KINDS]

    def sentence_roots(self) -> List[int]:
        """Head pieces of sentence roots: the non-[SEP] children of the root."""
        if self.position_kind[self.root] != PositionKind.CLS:
            return [self.root]
        return [c for c in self.children(self.root) if self.position_kind[c] != PositionKind.SEP]


def validate_graph(graph: DepGraph) -> DepGraph:
    """Check the tree invariants (single root, acyclic, connected)."""
    check_tree(graph.parent)
    return graph


def word_graph(sentence: ParsedSentence) -> DepGraph:
    """The sentence's own word tree, without wordpieces or special symbols."""
    kinds = [PositionKind.HEAD_PIECE] * len(sentence)
    return DepGraph(parent=sentence.heads, position_kind=tuple(kinds))


def sentence_piece_graph(sentence: ParsedSentence, align: WordpieceAlignment) -> DepGraph:
    """Word tree moved onto wordpieces, without [CLS]/[SEP].

    A word-level edge h -> d links the head pieces of h and d; every continuation
    piece's parent is its word's head piece. The sentence root's head piece keeps the
    root sentinel.
    """
    if len(align) != len(sentence):
        raise LengthMismatch(
            f"alignment covers {len(align)} words but the sentence has {len(sentence)}",
            sentence_id=sentence.sentence_id,
        )
    parent = [ROOT] * len(align.pieces)
    kinds = [PositionKind.CONTINUATION] * len(align.pieces)
    for word, (start, stop) in enumerate(align.word_spans):
        head = sentence.heads[word]
        kinds[start] = PositionKind.HEAD_PIECE
        parent[start] = ROOT if head == ROOT else align.head_piece(head)
        for piece in range(start + 1, stop):
            parent[piece] = start
    return DepGraph(parent=tuple(parent), position_kind=tuple(kinds))


def merge_graphs(graphs: Sequence[DepGraph]) -> DepGraph:
    """Join sentence graphs under one [CLS]: ``[CLS] s1 [SEP] s2 [SEP] ...``.

    [CLS] parents every sentence root and every [SEP].
    """
    if not graphs:
        raise EmptySentence("no sentence graph to merge")
    parent: List[int] = [ROOT]
    kinds: List[PositionKind] = [PositionKind.CLS]
    for graph in graphs:
        if graph.n_positions == 0:
            raise EmptySentence("cannot merge an empty sentence graph")
        validate_graph(graph)
        offset = len(parent)
        for p in graph.parent:
            parent.append(0 if p == ROOT else p + offset)
        kinds.extend(graph.position_kind)
        parent.append(0)
        kinds.append(PositionKind.SEP)
    return DepGraph(parent=tuple(parent), position_kind=tuple(kinds))


def merge_pair_graph(g1: DepGraph, g2: DepGraph) -> DepGraph:
    """Sentence-pair graph: ``[CLS] s1 [SEP] s2 [SEP]``."""
    return merge_graphs([g1, g2])


def build_position_graph(sentence: ParsedSentence, align: WordpieceAlignment) -> DepGraph:
    """Single-sentence graph: ``[CLS] pieces [SEP]``."""
    return merge_graphs([sentence_piece_graph(sentence, align)])


def distance_matrix(graph: DepGraph) -> DistanceMatrix:
    """All-pairs shortest path lengths by BFS on the undirected tree."""
    n = graph.n_positions
    neighbours = graph.adjacency()
    D = np.full((n, n), -1, dtype=np.int64)
    for source in range(n):
        row = D[source]
        row[source] = 0
        queue = deque([source])
        while queue:
            node = queue.popleft()
            for nxt in neighbours[node]:
                if row[nxt] < 0:
                    row[nxt] = row[node] + 1
                    queue.append(nxt)
    return D


def mask_from_distance(D: DistanceMatrix, delta: Union[int, float]) -> AttentionMask:
    """0 where ``D_ij <= delta``, negative infinity elsewhere."""
    if not delta >= 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    return np.where(np.asarray(D) <= delta, 0.0, NEG_INF)


def depth_vector(graph: DepGraph) -> DepthVector:
    """Distance of every position from the root."""
    depths = np.full(graph.n_positions, -1, dtype=np.int64)
    depths[graph.root] = 0
    order = deque([graph.root])
    children: List[List[int]] = [[] for _ in range(graph.n_positions)]
    for child, parent in enumerate(graph.parent):
        if parent != ROOT:
            children[parent].append(child)
    while order:
        node = order.popleft()
        for child in children[node]:
            depths[child] = depths[node] + 1
            order.append(child)
    return depths

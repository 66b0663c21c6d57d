"""Structural probe over GAT outputs.

Squared distances ``|theta_1 (g_i - g_j)|^2`` approximate squared tree distances and
squared norms ``|theta_2 g_i|^2`` approximate squared depths. Losses are mean absolute
errors; metrics decode a tree as the minimum spanning tree of predicted distances.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from core.deptree import DepGraph, distance_matrix
from core.errors import IndexMisalignment, ShapeMismatch
from core.numcore import (
    Tensor,
    add,
    as_tensor,
    matmul,
    mul,
    no_grad,
    pairwise_sq_dist,
    scale,
    square,
    sub,
    tensor_abs,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]


@dataclass
class ProbeParams:
    """Distance transform theta_1 and depth transform theta_2, both (m, k*d_g)."""
    distance: Tensor
    depth: Tensor

    def __post_init__(self):
        if self.distance.ndim != 2 or self.distance.shape != self.depth.shape:
            raise ShapeMismatch(f"probe matrices must share one 2-D shape, got "
                                f"{self.distance.shape} and {self.depth.shape}")

    @property
    def rank(self) -> int:
        return self.distance.shape[0]

    @classmethod
    def from_store(cls, params) -> "ProbeParams":
        return cls(distance=params["probe.distance"], depth=params["probe.depth"])


def _check_width(theta: Tensor, width: int) -> None:
    if theta.shape[-1] != width:
        raise ShapeMismatch(f"probe expects vectors of width {theta.shape[-1]}, got {width}")


def pred_sq_distance(theta: Tensor, g_i: Tensor, g_j: Tensor) -> Tensor:
    """Squared norm of ``theta (g_i - g_j)`` for one pair of vectors."""
    g_i, g_j = as_tensor(g_i), as_tensor(g_j)
    if g_i.shape != g_j.shape:
        raise ShapeMismatch(f"pair vectors differ in shape: {g_i.shape} vs {g_j.shape}")
    _check_width(theta, g_i.shape[-1])
    projected = tensor_sum(mul(theta, sub(g_i, g_j)), axis=-1)
    return tensor_sum(square(projected))


def pred_sq_depth(theta: Tensor, g: Tensor) -> Tensor:
    """Squared norm of ``theta g``."""
    g = as_tensor(g)
    _check_width(theta, g.shape[-1])
    return tensor_sum(square(tensor_sum(mul(theta, g), axis=-1)))


def pred_sq_distances(theta: Tensor, G: Tensor) -> Tensor:
    """All-pairs predicted squared distances: (..., n, w) -> (..., n, n)."""
    _check_width(theta, G.shape[-1])
    return pairwise_sq_dist(matmul(G, transpose(theta)))


def pred_sq_depths(theta: Tensor, G: Tensor) -> Tensor:
    """Predicted squared depths: (..., n, w) -> (..., n)."""
    _check_width(theta, G.shape[-1])
    return tensor_sum(square(matmul(G, transpose(theta))), axis=-1)


def _position_weights(shape: Tuple[int, ...], valid: Optional[np.ndarray], pairwise: bool) -> np.ndarray:
    """Per-entry loss weights: 1 / (n_b^k * B) on valid entries, 0 on the rest."""
    lead = shape[:-2] if pairwise else shape[:-1]
    n = shape[-1]
    if valid is None:
        valid = np.ones(lead + (n,), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != lead + (n,):
        raise IndexMisalignment(f"position mask {valid.shape} does not match predictions {shape}")
    counts = valid.sum(axis=-1, keepdims=True).astype(np.float64)
    batch = float(np.prod(lead)) if lead else 1.0
    if pairwise:
        entry = valid[..., :, None] & valid[..., None, :]
        norm = (counts ** 2)[..., None]
    else:
        entry = valid
        norm = counts
    with np.errstate(divide="ignore", invalid="ignore"):
        weights = np.where(entry, 1.0 / (norm * batch), 0.0)
    return weights


def distance_loss(pred: Tensor, gold_distances: np.ndarray, valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean |D_ij^2 - pred_ij| over all ordered pairs (i = j included), batch-averaged.

    ``valid`` marks the positions of each sequence that take part (padding excluded).
    """
    gold = np.asarray(gold_distances, dtype=np.float64)
    if pred.shape != gold.shape or pred.ndim < 2 or pred.shape[-1] != pred.shape[-2]:
        raise IndexMisalignment(f"predicted distances {pred.shape} vs gold {gold.shape}")
    weights = _position_weights(pred.shape, valid, pairwise=True)
    errors = tensor_abs(sub(pred, Tensor(gold * gold)))
    return tensor_sum(mul(errors, Tensor(weights)))


def depth_loss(pred: Tensor, gold_depths: np.ndarray, valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean |depth_i^2 - pred_i| over positions, batch-averaged."""
    gold = np.asarray(gold_depths, dtype=np.float64)
    if pred.shape != gold.shape or pred.ndim < 1:
        raise IndexMisalignment(f"predicted depths {pred.shape} vs gold {gold.shape}")
    weights = _position_weights(pred.shape, valid, pairwise=False)
    errors = tensor_abs(sub(pred, Tensor(gold * gold)))
    return tensor_sum(mul(errors, Tensor(weights)))


def combined_loss(l_task: Tensor, l_dist: Tensor, l_depth: Tensor, alpha: float) -> Tensor:
    """L_task + alpha * (L_dist + L_depth)."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return l_task
    return add(l_task, scale(add(l_dist, l_depth), alpha))


# Tree decoding and metrics

@dataclass(frozen=True)
class DecodedTree:
    """Undirected edges of the minimum spanning tree over predicted distances."""
    edges: Tuple[Edge, ...]
    ties_broken: bool = False


class _DisjointSet:
    def __init__(self, items: Iterable[int]):
        self.parent = {i: i for i in items}

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def decode_tree(pred: np.ndarray, positions: Optional[Sequence[int]] = None) -> DecodedTree:
    """Kruskal over the symmetric prediction matrix, restricted to ``positions``.

    Equal weights are ordered by (i, j); when a tie separates an accepted edge from a
    rejected one the result is flagged and a warning is logged.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[0] != pred.shape[1]:
        raise ShapeMismatch(f"decode_tree needs a square matrix, got {pred.shape}")
    nodes = list(range(pred.shape[0])) if positions is None else sorted(positions)
    candidates = sorted(
        (0.5 * (pred[i, j] + pred[j, i]), i, j)
        for a, i in enumerate(nodes) for j in nodes[a + 1:]
    )
    forest = _DisjointSet(nodes)
    chosen: List[Edge] = []
    ties_broken = False
    group_weight, group_accepted, group_rejected = None, False, False
    for weight, i, j in candidates:
        if weight != group_weight:
            group_weight, group_accepted, group_rejected = weight, False, False
        if forest.union(i, j):
            chosen.append((i, j))
            group_accepted = True
        else:
            group_rejected = True
        if group_accepted and group_rejected:
            ties_broken = True
    if ties_broken:
        logger.warning("Tied predicted distances while decoding; kept the lowest index pairs")
    return DecodedTree(edges=tuple(sorted(chosen)), ties_broken=ties_broken)


def gold_edges(graph: DepGraph, positions: Optional[Sequence[int]] = None) -> List[Edge]:
    if positions is None:
        return graph.edges()
    keep = set(positions)
    return [(i, j) for i, j in graph.edges() if i in keep and j in keep]


def uuas(decoded: DecodedTree, gold: Sequence[Edge]) -> float:
    """Fraction of gold undirected edges present in the decoded tree."""
    if not gold:
        return 1.0
    found = set(decoded.edges)
    return sum(1 for e in gold if e in found) / len(gold)


def predicted_root(pred_depths: np.ndarray, graph: DepGraph) -> int:
    """Word position with the smallest predicted depth (lowest index on ties)."""
    words = graph.word_positions() or list(range(graph.n_positions))
    depths = np.asarray(pred_depths, dtype=np.float64)
    return min(words, key=lambda i: (depths[i], i))


def distance_spearman(pred: np.ndarray, gold_distances: np.ndarray,
                      positions: Optional[Sequence[int]] = None) -> float:
    """Spearman correlation over unordered pairs; NaN when undefined."""
    idx = np.arange(pred.shape[0]) if positions is None else np.asarray(sorted(positions))
    rows, cols = np.triu_indices(len(idx), k=1)
    predicted = np.asarray(pred)[idx[rows], idx[cols]]
    gold = np.asarray(gold_distances)[idx[rows], idx[cols]]
    if predicted.size < 2 or np.ptp(predicted) == 0 or np.ptp(gold) == 0:
        return math.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = spearmanr(predicted, gold).correlation
    return float(rho)


@dataclass
class ProbeMetrics:
    """Probe quality on one sequence."""
    sentence_id: str
    uuas: float
    root_correct: bool
    spearman: float
    ties_broken: bool = False


def probe_metrics(
    decoded: DecodedTree,
    graph: DepGraph,
    pred_distances: np.ndarray,
    pred_depths: np.ndarray,
    positions: Optional[Sequence[int]] = None,
    sentence_id: str = "",
) -> ProbeMetrics:
    """UUAS, root correctness and distance Spearman against the gold graph."""
    n = graph.n_positions
    if np.shape(pred_distances) != (n, n) or np.shape(pred_depths) != (n,):
        raise IndexMisalignment(
            f"predictions {np.shape(pred_distances)}/{np.shape(pred_depths)} do not cover {n} positions",
            sentence_id=sentence_id or None,
        )
    root = predicted_root(pred_depths, graph)
    return ProbeMetrics(
        sentence_id=sentence_id,
        uuas=uuas(decoded, gold_edges(graph, positions)),
        root_correct=root in graph.sentence_roots(),
        spearman=distance_spearman(pred_distances, distance_matrix(graph), positions),
        ties_broken=decoded.ties_broken,
    )


@dataclass
class ProbeReport:
    """Per-sequence metrics plus their aggregate."""
    sequences: List[ProbeMetrics] = field(default_factory=list)

    @property
    def mean_uuas(self) -> float:
        return float(np.mean([m.uuas for m in self.sequences])) if self.sequences else math.nan

    @property
    def root_accuracy(self) -> float:
        return float(np.mean([m.root_correct for m in self.sequences])) if self.sequences else math.nan

    @property
    def mean_spearman(self) -> float:
        values = [m.spearman for m in self.sequences if not math.isnan(m.spearman)]
        skipped = len(self.sequences) - len(values)
        if skipped:
            logger.warning(f"Skipped {skipped} undefined Spearman values")
        return float(np.mean(values)) if values else math.nan

    def summary(self) -> Dict[str, float]:
        return {"uuas": self.mean_uuas, "root_accuracy": self.root_accuracy,
                "spearman": self.mean_spearman}


def probe_predictions(model, batch, stop_gradient: bool = False) -> Tuple[Tensor, Tensor, Tensor]:
    """GAT output and both probe predictions for a batch."""
    G = model.gat_forward(batch.token_ids, batch.pos_tag_ids, batch.dep_mask)
    probe = ProbeParams.from_store(model.params)
    source = G.detach() if stop_gradient else G
    return G, pred_sq_distances(probe.distance, source), pred_sq_depths(probe.depth, source)


def evaluate_probe(model, batches: Iterable, word_positions_only: bool = False) -> ProbeReport:
    """Decode every sequence of every batch and score it against its gold tree."""
    report = ProbeReport()
    with no_grad():
        for batch in batches:
            _, distances, depths = probe_predictions(model, batch)
            for b, graph in enumerate(batch.graphs):
                n = graph.n_positions
                positions = graph.word_positions() if word_positions_only else None
                pred_d = distances.data[b, :n, :n]
                decoded = decode_tree(pred_d, positions)
                report.sequences.append(probe_metrics(
                    decoded, graph, pred_d, depths.data[b, :n], positions,
                    sentence_id=batch.sentence_ids[b],
                ))
    logger.info(f"Probe evaluation over {len(report.sequences)} sequences: "
                f"UUAS {report.mean_uuas:.4f}, root accuracy {report.root_accuracy:.4f}")
    return report

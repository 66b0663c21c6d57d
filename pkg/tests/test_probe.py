"""Tests for the structural probe: predictions, losses, decoding and metrics."""

import itertools
import math
from unittest.mock import patch

import networkx as nx
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from config import TrainingConfig
from core.batching import BatchLoader, encode_example
from core.conllu import build_vocab
from core.deptree import DepGraph, PositionKind, depth_vector, distance_matrix
from core.errors import IndexMisalignment, ShapeMismatch
from core.model import SyntaxAugmentedEncoder
from core.numcore import Tape, Tensor
from core.probe import (
    DecodedTree,
    ProbeMetrics,
    ProbeParams,
    ProbeReport,
    combined_loss,
    decode_tree,
    depth_loss,
    distance_loss,
    distance_spearman,
    evaluate_probe,
    gold_edges,
    pred_sq_depth,
    pred_sq_depths,
    pred_sq_distance,
    pred_sq_distances,
    probe_metrics,
    uuas,
)
from core.structure_task import make_tree_corpus, random_heads
from core.train import pretrain_losses

ROOT = -1


@pytest.fixture
def sentence_graph() -> DepGraph:
    """[CLS] dog likes play [SEP] with likes as the sentence root."""
    kinds = [PositionKind.CLS] + [PositionKind.HEAD_PIECE] * 3 + [PositionKind.SEP]
    return DepGraph(parent=(ROOT, 2, 0, 2, 0), position_kind=tuple(kinds))


@pytest.fixture
def tree_examples(tiny_config):
    corpus = make_tree_corpus(seed=2, size=5, max_words=6)
    vocab = build_vocab(w for s in corpus for w in s.words)
    config = tiny_config.model_copy(update={"vocab_size": len(vocab)})
    return config, [encode_example([s], vocab, config) for s in corpus]


def _brute_force_spanning_tree(weights: np.ndarray):
    """Cheapest spanning tree found by trying every (n - 1)-edge subset."""
    n = weights.shape[0]
    pairs = list(itertools.combinations(range(n), 2))
    best, best_weight = None, math.inf
    for subset in itertools.combinations(pairs, n - 1):
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                x = parent[x]
            return x

        acyclic = True
        for i, j in subset:
            ri, rj = find(i), find(j)
            if ri == rj:
                acyclic = False
                break
            parent[ri] = rj
        if not acyclic:
            continue
        total = sum(weights[i, j] for i, j in subset)
        if total < best_weight:
            best, best_weight = subset, total
    return tuple(sorted(best))


class TestPredictions:
    """Test predicted squared distances and depths."""

    def test_equal_vectors(self):
        theta = Tensor(np.eye(2))
        assert pred_sq_distance(theta, Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_identity_distance(self):
        assert pred_sq_distance(Tensor(np.eye(2)), Tensor([3.0, 4.0]), Tensor([0.0, 0.0])).item() == 25.0

    def test_zero_vector_depth(self):
        assert pred_sq_depth(Tensor(np.eye(2)), Tensor([0.0, 0.0])).item() == 0.0

    def test_identity_depth(self):
        assert pred_sq_depth(Tensor(np.eye(2)), Tensor([1.0, 2.0])).item() == 5.0

    def test_batched_forms_agree(self, rng):
        theta = Tensor(rng.normal(size=(3, 5)))
        G = Tensor(rng.normal(size=(4, 5)))
        distances = pred_sq_distances(theta, G).data
        depths = pred_sq_depths(theta, G).data
        assert_allclose(distances[1, 3], pred_sq_distance(theta, Tensor(G.data[1]), Tensor(G.data[3])).item())
        assert_allclose(depths[2], pred_sq_depth(theta, Tensor(G.data[2])).item())
        assert_array_equal(np.diag(distances), np.zeros(4))

    def test_orthogonal_rotation_keeps_distances(self, rng):
        theta = rng.normal(size=(4, 6))
        G = Tensor(rng.normal(size=(5, 6)))
        rotation, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert_allclose(pred_sq_distances(Tensor(rotation @ theta), G).data,
                        pred_sq_distances(Tensor(theta), G).data, atol=1e-10)
        assert_allclose(pred_sq_depths(Tensor(rotation @ theta), G).data,
                        pred_sq_depths(Tensor(theta), G).data, atol=1e-10)

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            pred_sq_distances(Tensor(np.eye(3)), Tensor(rng.normal(size=(2, 4))))

    def test_probe_params_shapes(self):
        with pytest.raises(ShapeMismatch):
            ProbeParams(distance=Tensor(np.zeros((2, 4))), depth=Tensor(np.zeros((3, 4))))


class TestLosses:
    """Test the L1 probe losses and their combination."""

    def test_exact_distances(self, sentence_graph):
        D = distance_matrix(sentence_graph)
        assert distance_loss(Tensor(D.astype(float) ** 2), D).item() == 0.0

    def test_two_positions(self):
        loss = distance_loss(Tensor(np.zeros((2, 2))), np.array([[0, 1], [1, 0]]))
        assert loss.item() == pytest.approx(0.5)

    def test_exact_depths(self, sentence_graph):
        depths = depth_vector(sentence_graph)
        assert depth_loss(Tensor(depths.astype(float) ** 2), depths).item() == 0.0

    def test_root_only_depth(self):
        assert depth_loss(Tensor([0.3]), np.array([0])).item() == pytest.approx(0.3)

    def test_padding_is_ignored(self):
        """A padded batch averages the per-sequence losses."""
        pred = np.zeros((2, 3, 3))
        gold = np.zeros((2, 3, 3), dtype=int)
        gold[0, :2, :2] = [[0, 1], [1, 0]]
        gold[1] = [[0, 1, 2], [1, 0, 1], [2, 1, 0]]
        pred[0, 2, :] = 99.0
        valid = np.array([[True, True, False], [True, True, True]])
        loss = distance_loss(Tensor(pred), gold, valid).item()
        assert loss == pytest.approx((0.5 + 12.0 / 9.0) / 2)

    def test_misaligned(self):
        with pytest.raises(IndexMisalignment):
            distance_loss(Tensor(np.zeros((3, 3))), np.zeros((2, 2)))
        with pytest.raises(IndexMisalignment):
            depth_loss(Tensor(np.zeros(3)), np.zeros(3), valid=np.ones(2, dtype=bool))

    def test_alpha_zero_is_task_loss(self):
        task = Tensor(1.25)
        assert combined_loss(task, Tensor(3.0), Tensor(4.0), 0.0) is task

    def test_alpha_weighting(self):
        assert combined_loss(Tensor(1.0), Tensor(3.0), Tensor(4.0), 0.5).item() == pytest.approx(4.5)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            combined_loss(Tensor(1.0), Tensor(1.0), Tensor(1.0), -0.1)

    def test_stop_gradient_keeps_gat_fixed(self, tree_examples):
        """With the stop-gradient switch the probe losses only reach the probe."""
        config, examples = tree_examples
        model = SyntaxAugmentedEncoder(config)
        batch = next(iter(BatchLoader(examples, 3, shuffle=False)))
        for stop, expect_gat in ((True, False), (False, True)):
            with Tape() as tape:
                terms = pretrain_losses(model, batch, TrainingConfig(probe_stop_gradient=stop))
                tape.backward(terms.total, params=model.params.values())
            assert np.any(model["probe.distance"].grad != 0)
            assert np.any(model["gat.layer0.head0.T"].grad != 0) == expect_gat


class TestDecoding:
    """Test minimum spanning tree decoding."""

    def test_gold_distances_recover_tree(self, sentence_graph):
        D = distance_matrix(sentence_graph)
        decoded = decode_tree(D.astype(float) ** 2)
        assert list(decoded.edges) == sentence_graph.edges()
        assert not decoded.ties_broken

    def test_matches_networkx_spanning_tree(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 10))
            weights = rng.random((n, n))
            weights = weights + weights.T
            oracle = nx.Graph()
            for i in range(n):
                for j in range(i + 1, n):
                    oracle.add_edge(i, j, weight=weights[i, j])
            expected = sorted(tuple(sorted(e)) for e in nx.minimum_spanning_edges(oracle, algorithm="kruskal",
                                                                                 data=False))
            assert list(decode_tree(weights).edges) == expected

    def test_matches_exhaustive_search(self, rng):
        for n in range(2, 8):
            for _ in range(3):
                weights = rng.random((n, n))
                weights = weights + weights.T
                assert decode_tree(weights).edges == _brute_force_spanning_tree(weights)

    def test_random_trees_from_gold_distances(self, rng):
        for n in (4, 6, 7, 8):
            for _ in range(5):
                graph = DepGraph(parent=random_heads(rng, n), position_kind=(PositionKind.HEAD_PIECE,) * n)
                D = distance_matrix(graph).astype(float)
                for weights in (D, D ** 2):
                    decoded = decode_tree(weights)
                    assert list(decoded.edges) == graph.edges()
                    assert not decoded.ties_broken
                    if n <= 7:
                        assert decoded.edges == _brute_force_spanning_tree(weights)

    def test_restricted_positions(self, sentence_graph):
        D = distance_matrix(sentence_graph).astype(float) ** 2
        decoded = decode_tree(D, positions=[1, 2, 3])
        assert decoded.edges == ((1, 2), (2, 3))

    def test_constant_predictions(self):
        with patch("core.probe.logger") as mock_logger:
            decoded = decode_tree(np.ones((4, 4)))
        assert len(decoded.edges) == 3
        assert decoded.ties_broken
        mock_logger.warning.assert_called_once()

    def test_non_square(self):
        with pytest.raises(ShapeMismatch):
            decode_tree(np.ones((2, 3)))


class TestMetrics:
    """Test UUAS, root accuracy and distance Spearman."""

    def test_perfect_predictions(self, sentence_graph):
        D = distance_matrix(sentence_graph).astype(float)
        depths = depth_vector(sentence_graph).astype(float)
        metrics = probe_metrics(decode_tree(D ** 2), sentence_graph, D ** 2, depths ** 2, sentence_id="s")
        assert metrics.uuas == 1.0
        assert metrics.root_correct
        assert metrics.spearman == pytest.approx(1.0)

    def test_wrong_root(self, sentence_graph):
        D = distance_matrix(sentence_graph).astype(float)
        metrics = probe_metrics(decode_tree(D ** 2), sentence_graph, D ** 2, np.array([0.0, 0.1, 5.0, 5.0, 0.0]))
        assert not metrics.root_correct

    def test_uuas_counts_gold_edges(self):
        decoded = DecodedTree(edges=((0, 1), (1, 2)))
        assert uuas(decoded, [(0, 1), (0, 2)]) == 0.5
        assert uuas(decoded, []) == 1.0

    def test_gold_edges_restricted(self, sentence_graph):
        assert gold_edges(sentence_graph, [1, 2, 3]) == [(1, 2), (2, 3)]

    def test_spearman_undefined(self):
        assert math.isnan(distance_spearman(np.ones((3, 3)), np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]])))
        assert math.isnan(distance_spearman(np.zeros((2, 2)), np.zeros((2, 2))))

    def test_misaligned_predictions(self, sentence_graph):
        with pytest.raises(IndexMisalignment):
            probe_metrics(DecodedTree(edges=()), sentence_graph, np.zeros((3, 3)), np.zeros(3))

    def test_report_skips_nan(self):
        report = ProbeReport(sequences=[
            ProbeMetrics("a", 1.0, True, 0.5),
            ProbeMetrics("b", 0.5, False, math.nan),
        ])
        assert report.mean_uuas == 0.75
        assert report.root_accuracy == 0.5
        assert report.mean_spearman == 0.5

    def test_evaluate_probe(self, tree_examples):
        config, examples = tree_examples
        model = SyntaxAugmentedEncoder(config)
        report = evaluate_probe(model, BatchLoader(examples, 2, shuffle=False), word_positions_only=True)
        assert [m.sentence_id for m in report.sequences] == [e.example_id for e in examples]
        assert all(0.0 <= m.uuas <= 1.0 for m in report.sequences)
        assert set(report.summary()) == {"uuas", "root_accuracy", "spearman"}

"""Tests for the encoder, the dependency GAT and their fusion."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from config import ModelConfig, TrainingConfig
from core.batching import encode_example, make_batch
from core.checkpoint import read_container, write_container
from core.conllu import NUM_UPOS, build_vocab
from core.deptree import DepGraph, PositionKind, distance_matrix, mask_from_distance
from core.errors import CheckpointFormatError, ShapeMismatch
from core.model import GAT_PREFIXES, SyntaxAugmentedEncoder, attention, parameter_counts
from core.numcore import Tensor, grad_check, grad_check_parameters, no_grad, square, tensor_sum
from core.structure_task import make_structure_task, random_heads
from core.train import joint_losses

NEG_INF = -math.inf


def run_head(model, hidden, gat_output, layer=0, head=0, **masks):
    with no_grad():
        return model.fused_attention_head(hidden, gat_output, layer, head, **masks).data


@pytest.fixture
def tiny_model(tiny_config):
    return SyntaxAugmentedEncoder(tiny_config)


@pytest.fixture
def tiny_batch(tiny_config):
    """Two labeled sentences padded into one batch."""
    corpus = make_structure_task(seed=4, size=2)
    vocab = build_vocab(w for s in corpus for w in s.words)
    config = tiny_config.model_copy(update={"vocab_size": len(vocab)})
    return config, make_batch([encode_example([s], vocab, config) for s in corpus])


class TestAttention:
    """Test scaled masked attention."""

    def test_hand_example(self):
        out = attention(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor(np.eye(2)), np.zeros((1, 2)), 2)
        assert_allclose(out.data, [[0.6698, 0.3302]], atol=1e-4)

    def test_self_only_mask(self, rng):
        V = rng.normal(size=(3, 2))
        M = np.where(np.eye(3) == 1, 0.0, NEG_INF)
        out = attention(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2))), Tensor(V), M, 2)
        assert_array_equal(out.data, V)

    def test_saturated_query(self):
        """A large query aligned with one orthonormal key selects that key's value."""
        V = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = attention(Tensor([[200.0, 0.0]]), Tensor(np.eye(2)), Tensor(V), np.zeros((1, 2)), 2)
        assert_allclose(out.data, V[:1], atol=1e-12)

    def test_returns_weights(self):
        _, weights = attention(Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.eye(2)), None, 2,
                               return_weights=True)
        assert_allclose(weights.data.sum(axis=-1), [1.0, 1.0])

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatch):
            attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), None, 2)


class TestEmbeddings:
    """Test token, position and GAT input embeddings."""

    def test_zero_tables(self, tiny_model):
        for name in ("embeddings.token", "embeddings.position"):
            tiny_model[name].data[:] = 0.0
        assert_array_equal(tiny_model.embed_tokens(np.array([3, 4, 5])).data, np.zeros((3, 8)))

    def test_single_token(self, tiny_model):
        out = tiny_model.embed_tokens(np.array([7]))
        expected = tiny_model["embeddings.token"].data[7] + tiny_model["embeddings.position"].data[0]
        assert_array_equal(out.data[0], expected)

    def test_gat_embed_without_pos(self, tiny_model):
        tiny_model["gat.pos"].data[:] = 0.0
        ids = np.array([4, 9])
        out = tiny_model.gat_embed(ids, np.array([1, 2]))
        assert_array_equal(out.data, tiny_model["embeddings.token"].data[ids])

    def test_token_table_is_shared(self, tiny_model):
        ids, tags = np.array([4, 9]), np.array([1, 2])
        before_enc = tiny_model.embed_tokens(ids).data.copy()
        before_gat = tiny_model.gat_embed(ids, tags).data.copy()
        tiny_model["embeddings.token"].data[4] += 1.0
        assert not np.array_equal(tiny_model.embed_tokens(ids).data, before_enc)
        assert not np.array_equal(tiny_model.gat_embed(ids, tags).data, before_gat)

    def test_segment_term_only_when_given(self, tiny_model):
        ids = np.array([4, 9])
        plain = tiny_model.embed_tokens(ids).data
        paired = tiny_model.embed_tokens(ids, segment_ids=np.array([0, 1])).data
        assert_allclose(paired - plain, tiny_model["embeddings.segment"].data)


    def test_permuting_tokens_keeps_positions(self, tiny_model):
        ids = np.array([4, 9, 13])
        order = np.array([2, 0, 1])
        positions = tiny_model["embeddings.position"].data[:3]
        original = tiny_model.embed_tokens(ids).data
        permuted = tiny_model.embed_tokens(ids[order]).data
        assert_allclose(permuted - positions, (original - positions)[order], atol=1e-15)
        assert not np.allclose(permuted, original[order])

    def test_gat_embed_is_permutation_equivariant(self, tiny_model):
        ids, tags = np.array([4, 9, 13, 2]), np.array([1, 7, 0, 17])
        order = np.array([3, 1, 0, 2])
        assert_array_equal(tiny_model.gat_embed(ids[order], tags[order]).data,
                           tiny_model.gat_embed(ids, tags).data[order])


class TestGraphAttention:
    """Test the GAT layers."""

    def test_saturated_mask_equals_unmasked(self, tiny_model, rng):
        x = Tensor(rng.normal(size=(4, 8)))
        with no_grad():
            masked = tiny_model.gat_layer(0, x, np.zeros((4, 4))).data
            unmasked = tiny_model.gat_layer(0, x, None).data
        assert_array_equal(masked, unmasked)

    def test_single_position(self, tiny_model, rng):
        x = Tensor(rng.normal(size=(1, 8)))
        with no_grad():
            out = tiny_model.gat_layer(0, x, np.zeros((1, 1))).data
        values = [x.data @ tiny_model[f"gat.layer0.head{j}.V"].data for j in range(2)]
        assert_allclose(out, np.concatenate(values, axis=-1), atol=1e-14)

    def test_output_width(self, tiny_model, rng):
        with no_grad():
            G = tiny_model.gat_forward(np.array([4, 5, 6]), np.array([0, 1, 2]), np.zeros((3, 3)))
        assert G.shape == (3, tiny_model.config.gat_width)

    def test_permutation_equivariance(self, tiny_model, rng):
        """Relabeling positions, with the mask conjugated alike, permutes the output rows."""
        for _ in range(20):
            n = int(rng.integers(2, 9))
            graph = DepGraph(parent=random_heads(rng, n), position_kind=(PositionKind.HEAD_PIECE,) * n)
            mask = mask_from_distance(distance_matrix(graph), 1)
            ids = rng.integers(4, 64, size=n)
            tags = rng.integers(0, NUM_UPOS, size=n)
            order = rng.permutation(n)
            with no_grad():
                G = tiny_model.gat_forward(ids, tags, mask).data
                permuted = tiny_model.gat_forward(ids[order], tags[order], mask[np.ix_(order, order)]).data
            assert_allclose(permuted, G[order], atol=1e-12)

    def test_wrong_input_width(self, tiny_model, rng):
        with pytest.raises(ShapeMismatch):
            tiny_model.gat_layer(1, Tensor(rng.normal(size=(2, 8 + 1))), None)


class TestFusion:
    """Test syntax-biased attention heads."""

    def test_zero_bias_matches_baseline(self, tiny_model, rng):
        prefix = "encoder.layer0.head0"
        tiny_model[f"{prefix}.syntax_query"].data[:] = 0.0
        tiny_model[f"{prefix}.syntax_key"].data[:] = 0.0
        hidden = Tensor(rng.normal(size=(4, 8)))
        G = Tensor(rng.normal(size=(4, 8)))
        assert_allclose(run_head(tiny_model, hidden, G), run_head(tiny_model, hidden, None), atol=1e-12)

    def test_zero_gat_output_matches_baseline(self, tiny_model, rng):
        hidden = Tensor(rng.normal(size=(4, 8)))
        assert_allclose(run_head(tiny_model, hidden, Tensor(np.zeros((4, 8)))),
                        run_head(tiny_model, hidden, None), atol=1e-12)

    def test_bias_effect_vanishes_with_scale(self, tiny_model, rng):
        prefix = "encoder.layer0.head0"
        query = tiny_model[f"{prefix}.syntax_query"].data.copy()
        key = tiny_model[f"{prefix}.syntax_key"].data.copy()
        hidden = Tensor(rng.normal(size=(4, 8)))
        G = Tensor(rng.normal(size=(4, 8)))
        baseline = run_head(tiny_model, hidden, None)
        gaps = []
        for factor in (0.1, 0.01, 0.001):
            tiny_model[f"{prefix}.syntax_query"].data[:] = factor * query
            tiny_model[f"{prefix}.syntax_key"].data[:] = factor * key
            gaps.append(np.abs(run_head(tiny_model, hidden, G) - baseline).max())
        assert gaps[0] > 1e-8
        assert gaps == sorted(gaps, reverse=True)
        assert gaps[-1] < 0.05 * gaps[0]

    def test_non_syntax_head_ignores_gat(self, tiny_model, rng):
        hidden = Tensor(rng.normal(size=(4, 8)))
        G = Tensor(rng.normal(size=(4, 8)))
        assert_array_equal(run_head(tiny_model, hidden, G, head=1), run_head(tiny_model, hidden, None, head=1))
        assert "encoder.layer0.head1.syntax_query" not in tiny_model.params

    def test_no_syntax_layers_is_plain_encoder(self, tiny_batch):
        config, batch = tiny_batch
        model = SyntaxAugmentedEncoder(config.model_copy(update={"syntax_layers": []}))
        with no_grad():
            fused = model.encoder_forward(batch.token_ids, batch.position_ids, batch.pos_tag_ids,
                                          dep_mask=batch.dep_mask, attn_mask=batch.attn_mask)
            plain = model.encoder_forward(batch.token_ids, batch.position_ids, attn_mask=batch.attn_mask)
        assert fused.gat_output is not None
        assert plain.gat_output is None
        assert_array_equal(fused.final.data, plain.final.data)

    def test_zeroed_syntax_model_matches_plain_model(self, tiny_batch):
        config, batch = tiny_batch
        plain = SyntaxAugmentedEncoder(config.model_copy(update={"syntax_layers": []}))
        fused = SyntaxAugmentedEncoder(config)
        fused.params.load_arrays(plain.params.to_arrays(), strict=False)
        for name in fused.params:
            if ".syntax_" in name:
                fused[name].data[:] = 0.0
        with no_grad():
            a = fused.encoder_forward(batch.token_ids, batch.position_ids, batch.pos_tag_ids,
                                      dep_mask=batch.dep_mask, attn_mask=batch.attn_mask).final.data
            b = plain.encoder_forward(batch.token_ids, batch.position_ids, batch.pos_tag_ids,
                                      dep_mask=batch.dep_mask, attn_mask=batch.attn_mask).final.data
        assert_allclose(a, b, atol=1e-12)

    def test_zero_bias_reduction_on_random_inputs(self, tiny_config, rng):
        """With every syntax projection zeroed the fused encoder equals the plain one built from the same weights."""
        plain = SyntaxAugmentedEncoder(tiny_config.model_copy(update={"syntax_layers": []}))
        fused = SyntaxAugmentedEncoder(tiny_config)
        fused.params.load_arrays(plain.params.to_arrays(), strict=False)
        for name in fused.params:
            if ".syntax_" in name:
                fused[name].data[:] = 0.0
        for _ in range(100):
            n = int(rng.integers(1, tiny_config.max_len + 1))
            graph = DepGraph(parent=random_heads(rng, n), position_kind=(PositionKind.HEAD_PIECE,) * n)
            mask = mask_from_distance(distance_matrix(graph), int(rng.integers(1, 4)))
            ids = rng.integers(0, tiny_config.vocab_size, size=n)
            tags = rng.integers(0, NUM_UPOS, size=n)
            with no_grad():
                a = fused.encoder_forward(ids, None, tags, dep_mask=mask).final.data
                b = plain.encoder_forward(ids).final.data
            assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_intervention_uses_dependency_mask(self, tiny_batch):
        config, batch = tiny_batch
        model = SyntaxAugmentedEncoder(config.model_copy(update={"intervene_self_attention": True}))
        assert not any(".syntax_" in name for name in model.params)
        hidden = model.embed_tokens(batch.token_ids, batch.position_ids)
        with no_grad():
            restricted = model.fused_attention_head(hidden, None, 0, 0, batch.attn_mask, batch.dep_mask).data
            unrestricted = model.fused_attention_head(hidden, None, 0, 0, batch.attn_mask, None).data
        assert not np.allclose(restricted, unrestricted)


class TestClassifier:
    """Test the [CLS] task head."""

    def test_zero_weights_give_uniform(self, tiny_model, rng):
        tiny_model["classifier.weight"].data[:] = 0.0
        with no_grad():
            probs = tiny_model.classify(Tensor(rng.normal(size=(3, 5, 8)))).data
        assert_allclose(probs, np.full((3, 2), 0.5))

    def test_reads_position_zero(self, tiny_model, rng):
        hidden = rng.normal(size=(4, 8))
        changed = hidden.copy()
        changed[1:] += 5.0
        with no_grad():
            a = tiny_model.classify_logits(Tensor(hidden)).data
            b = tiny_model.classify_logits(Tensor(changed)).data
        assert_array_equal(a, b)


class TestParameters:
    """Test parameter bookkeeping and persistence."""

    def test_counts_match_store(self, tiny_config, tiny_model):
        counts = parameter_counts(tiny_config)
        assert counts["total"] == tiny_model.params.count()
        assert counts["gat"] == tiny_model.params.count("gat.")
        assert counts["probe"] == tiny_model.params.count("probe.")

    def test_default_gat_size(self):
        """Four layers of four 64-wide heads over a 32-wide input."""
        counts = parameter_counts(ModelConfig())
        first = 4 * 2 * 32 * 64
        later = 3 * 4 * 2 * 256 * 64
        assert counts["gat"] == 18 * 32 + first + later

    def test_same_seed_same_weights(self, tiny_config):
        a = SyntaxAugmentedEncoder(tiny_config).params.to_arrays()
        b = SyntaxAugmentedEncoder(tiny_config).params.to_arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_save_and_load(self, tmp_path, tiny_model):
        path = tiny_model.save(tmp_path / "m.ckpt", ["[PAD]"], extra={"stage": "pretrain"})
        loaded, metadata = SyntaxAugmentedEncoder.load(path)
        assert metadata["stage"] == "pretrain"
        assert metadata["vocab"] == ["[PAD]"]
        assert loaded.config == tiny_model.config
        for name, tensor in tiny_model.params.items():
            assert_array_equal(loaded[name].data, tensor.data)

    def test_load_missing_parameter(self, tmp_path, tiny_model):
        path = tiny_model.save(tmp_path / "m.ckpt")
        arrays, metadata = read_container(path)
        del arrays["classifier.bias"]
        write_container(path, arrays, metadata)
        with pytest.raises(CheckpointFormatError, match="classifier.bias"):
            SyntaxAugmentedEncoder.load(path)

    def test_load_gat_weights_only(self, tmp_path, tiny_config):
        source = SyntaxAugmentedEncoder(tiny_config)
        target = SyntaxAugmentedEncoder(tiny_config.model_copy(update={"seed": 99}))
        path = source.save(tmp_path / "gat.ckpt")
        loaded = target.load_gat_weights(path)

        assert loaded and all(name.startswith(GAT_PREFIXES) for name in loaded)
        assert_array_equal(target["gat.layer1.head0.T"].data, source["gat.layer1.head0.T"].data)
        assert not np.array_equal(target["encoder.layer0.head0.query"].data,
                                  source["encoder.layer0.head0.query"].data)


class TestGradients:
    """Test analytic gradients of the full model against central differences."""

    def test_fused_layer(self, tiny_batch):
        config, batch = tiny_batch
        model = SyntaxAugmentedEncoder(config)
        with no_grad():
            G = model.gat_forward(batch.token_ids, batch.pos_tag_ids, batch.dep_mask)
            hidden = model.embed_tokens(batch.token_ids, batch.position_ids)

        def loss(_):
            out = model.encoder_layer(0, hidden, G, batch.attn_mask, batch.dep_mask)
            return tensor_sum(square(out))

        assert grad_check(loss, model["encoder.layer0.head0.syntax_query"], eps=1e-5) < 1e-4

    def test_joint_loss(self, tiny_batch):
        config, batch = tiny_batch
        model = SyntaxAugmentedEncoder(config)
        report = grad_check_parameters(lambda: joint_losses(model, batch, TrainingConfig()).total,
                                       model.params, eps=1e-5, coords_per_param=4,
                                       rng=np.random.default_rng(0))
        assert report.max_error < 1e-4

"""Shared fixtures and small builders for the test suite."""

from typing import Optional, Sequence

import numpy as np
import pytest

from config import ModelConfig, TrainingConfig, reset_settings
from core.conllu import ROOT, UPOS_IDS, ParsedSentence, build_vocab


def token_line(index: int, form: str, upos: str, head: int, deprel: str = "dep") -> str:
    """One 10-column CoNLL-U line; ``head`` is 1-based with 0 for the root."""
    return f"{index}\t{form}\t_\t{upos}\t_\t_\t{head}\t{deprel}\t_\t_"


def make_sentence(
    words: Sequence[str],
    heads: Sequence[int],
    sentence_id: str = "s1",
    upos: Optional[Sequence[str]] = None,
    label: Optional[int] = None,
    group_id: Optional[str] = None,
) -> ParsedSentence:
    """Sentence with 0-based heads (ROOT for the root)."""
    tags = upos or ["NOUN"] * len(words)
    return ParsedSentence(
        words=tuple(words),
        upos=tuple(UPOS_IDS[t] for t in tags),
        heads=tuple(heads),
        deprels=tuple("root" if h == ROOT else "dep" for h in heads),
        sentence_id=sentence_id,
        label=label,
        group_id=group_id,
    )


CHAIN_CONLLU = "\n".join([
    "# sent_id = chain",
    token_line(1, "a", "NOUN", 0, "root"),
    token_line(2, "b", "NOUN", 1),
    token_line(3, "c", "NOUN", 2),
    "",
])


@pytest.fixture(autouse=True)
def fresh_settings():
    """Every test reads the environment anew."""
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def tiny_config() -> ModelConfig:
    """A model small enough for finite differences."""
    return ModelConfig(num_layers=2, num_heads=2, d_model=8, d_k=4, d_v=4, vocab_size=64,
                       max_len=16, gat_layers=2, gat_heads=2, d_g=4, alpha=0.5, seed=3)


@pytest.fixture
def training_config() -> TrainingConfig:
    return TrainingConfig(batch_size=2, epochs=2, warmup_fraction=0.0, eval_interval=1, seed=5)


@pytest.fixture
def likes_sentence() -> ParsedSentence:
    """'dog likes play' with likes as root."""
    return make_sentence(["dog", "likes", "play"], [1, ROOT, 1], sentence_id="likes", label=1)


@pytest.fixture
def small_vocab():
    return build_vocab(["dog", "likes", "play", "dogs", "bark", "cat", "sat", "on", "mat"])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

"""Synthetic corpora whose labels depend on tree structure alone.

Every sentence of the structure task holds exactly one NOUN; its label is 1 when that
NOUN sits at even depth and 0 otherwise. Word forms are drawn independently of tags
and structure, so only the tree can reveal the label.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.conllu import ROOT, UPOS_IDS, UPOS_TAGS, ParsedSentence

logger = logging.getLogger(__name__)

MIN_WORDS = 2
MAX_WORDS = 10
LEXICON_SIZE = 24
LETTERS = "abcdefghijklmnop"

NOUN_ID = UPOS_IDS["NOUN"]
_OTHER_TAGS = np.array([UPOS_IDS[t] for t in UPOS_TAGS if t != "NOUN"])


def make_lexicon(rng: np.random.Generator, size: int = LEXICON_SIZE) -> List[str]:
    """Distinct pseudo-words of two to four letters."""
    words: List[str] = []
    seen = set()
    while len(words) < size:
        length = int(rng.integers(2, 5))
        word = "".join(rng.choice(list(LETTERS), size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def random_heads(rng: np.random.Generator, n: int) -> Tuple[int, ...]:
    """Random tree: each node attaches to an earlier one, then positions are shuffled."""
    creation_parent = [ROOT] + [int(rng.integers(0, i)) for i in range(1, n)]
    order = rng.permutation(n)  # creation index -> word position
    heads = [ROOT] * n
    for node, parent in enumerate(creation_parent):
        heads[order[node]] = ROOT if parent == ROOT else int(order[parent])
    return tuple(heads)


def tree_depths(heads: Sequence[int]) -> List[int]:
    depths = []
    for node in range(len(heads)):
        depth = 0
        while heads[node] != ROOT:
            node = heads[node]
            depth += 1
        depths.append(depth)
    return depths


def structure_label(sentence: ParsedSentence) -> int:
    """1 iff the sentence's unique NOUN is at even depth."""
    nouns = [i for i, tag in enumerate(sentence.upos) if tag == NOUN_ID]
    if len(nouns) != 1:
        raise ValueError(f"sentence {sentence.sentence_id} has {len(nouns)} NOUN tokens")
    return int(tree_depths(sentence.heads)[nouns[0]] % 2 == 0)


def _sentence(rng: np.random.Generator, lexicon: Sequence[str], n: int, sentence_id: str,
              label: Optional[int] = None) -> ParsedSentence:
    heads = random_heads(rng, n)
    upos = [int(t) for t in rng.choice(_OTHER_TAGS, size=n)]
    if label is not None:
        depths = tree_depths(heads)
        wanted = 0 if label == 1 else 1
        candidates = [i for i, d in enumerate(depths) if d % 2 == wanted]
        upos[candidates[int(rng.integers(0, len(candidates)))]] = NOUN_ID
    words = [lexicon[int(i)] for i in rng.integers(0, len(lexicon), size=n)]
    deprels = ["root" if h == ROOT else "dep" for h in heads]
    return ParsedSentence(words=words, upos=upos, heads=heads, deprels=deprels,
                          sentence_id=sentence_id, label=label)


def make_structure_task(seed: int, size: int) -> List[ParsedSentence]:
    """Labeled corpus; example ``i`` has label ``(i + 1) % 2``, so classes are balanced."""
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    rng = np.random.default_rng(seed)
    lexicon = make_lexicon(rng)
    corpus = []
    for i in range(size):
        n = int(rng.integers(MIN_WORDS, MAX_WORDS + 1))
        corpus.append(_sentence(rng, lexicon, n, f"synth-{seed}-{i}", label=(i + 1) % 2))
    logger.info(f"Generated {size} structure-task sentences (seed {seed})")
    return corpus


def make_tree_corpus(seed: int, size: int, max_words: int = 12, min_words: int = 1) -> List[ParsedSentence]:
    """Unlabeled random trees for probe pre-training."""
    if size < 1 or not 1 <= min_words <= max_words:
        raise ValueError("need size >= 1 and 1 <= min_words <= max_words")
    rng = np.random.default_rng(seed)
    lexicon = make_lexicon(rng)
    return [
        _sentence(rng, lexicon, int(rng.integers(min_words, max_words + 1)), f"tree-{seed}-{i}")
        for i in range(size)
    ]

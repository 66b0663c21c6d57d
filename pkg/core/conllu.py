"""CoNLL-U ingestion and wordpiece alignment.

Sentences are read from pre-parsed CoNLL-U text with the ``conllu`` package (FORM,
UPOS, HEAD and DEPREL are the columns the model consumes) and each word is
segmented into wordpieces with a greedy longest-match-first tokenizer driven by a
vocabulary file.
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import conllu
from conllu.exceptions import ParseException
from conllu.models import Metadata, Token, TokenList

from core.errors import (
    CharacterMismatch,
    CycleDetected,
    EmptySentence,
    EmptyWord,
    MalformedLine,
    MultipleRoots,
    NonIntegerHead,
    UnknownUpos,
)

logger = logging.getLogger(__name__)

ROOT = -1

UPOS_TAGS: Tuple[str, ...] = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)
UPOS_IDS: Dict[str, int] = {tag: i for i, tag in enumerate(UPOS_TAGS)}
SPECIAL_UPOS_ID = len(UPOS_TAGS)
NUM_UPOS = len(UPOS_TAGS) + 1

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
SPECIAL_PIECES = (PAD, UNK, CLS, SEP)
CONTINUATION_MARKER = "##"

FIELDS = ("id", "form", "lemma", "upos", "xpos", "feats", "head", "deprel", "deps", "misc")
N_COLUMNS = len(FIELDS)


def upos_id(tag: str) -> int:
    """Map a universal POS tag to its id; unknown tags are an error."""
    try:
        return UPOS_IDS[tag]
    except KeyError:
        raise UnknownUpos(f"unknown UPOS tag {tag!r}") from None


@dataclass(frozen=True)
class ParsedSentence:
    """One CoNLL-U block: words, UPOS ids, 0-based heads (ROOT for the root)."""
    words: Tuple[str, ...]
    upos: Tuple[int, ...]
    heads: Tuple[int, ...]
    deprels: Tuple[str, ...]
    sentence_id: str
    label: Optional[int] = None
    group_id: Optional[str] = None

    def __post_init__(self):
        for name in ("words", "upos", "heads", "deprels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lengths = {len(self.words), len(self.upos), len(self.heads), len(self.deprels)}
        if len(lengths) != 1:
            raise MalformedLine(
                "words, upos, heads and deprels differ in length",
                sentence_id=self.sentence_id,
            )
        check_tree(self.heads, self.sentence_id)

    def __len__(self) -> int:
        return len(self.words)

    @property
    def root(self) -> int:
        return self.heads.index(ROOT)

    @property
    def upos_tags(self) -> Tuple[str, ...]:
        return tuple(UPOS_TAGS[i] for i in self.upos)


@dataclass(frozen=True)
class WordpieceAlignment:
    """Pieces of a word sequence and, per word, the half-open span of its pieces."""
    pieces: Tuple[str, ...]
    word_spans: Tuple[Tuple[int, int], ...]
    piece_is_head: Tuple[bool, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(self.pieces))
        object.__setattr__(self, "word_spans", tuple(tuple(s) for s in self.word_spans))
        if not self.piece_is_head:
            flags = [False] * len(self.pieces)
            for start, _ in self.word_spans:
                flags[start] = True
            object.__setattr__(self, "piece_is_head", tuple(flags))
        else:
            object.__setattr__(self, "piece_is_head", tuple(self.piece_is_head))
        expected = 0
        for start, stop in self.word_spans:
            if start != expected or stop <= start:
                raise ValueError(f"word spans must be contiguous and non-empty: {self.word_spans}")
            expected = stop
        if expected != len(self.pieces):
            raise ValueError("word spans do not cover all pieces")

    def __len__(self) -> int:
        return len(self.word_spans)

    def head_piece(self, word_index: int) -> int:
        return self.word_spans[word_index][0]

    def reconstruct_words(self) -> List[str]:
        """Join each span's pieces with continuation markers stripped."""
        words = []
        for start, stop in self.word_spans:
            parts = [p[len(CONTINUATION_MARKER):] if i > start else p
                     for i, p in zip(range(start, stop), self.pieces[start:stop])]
            words.append("".join(parts))
        return words


def check_tree(
    heads: Sequence[int],
    sentence_id: Optional[str] = None,
    line_nos: Optional[Sequence[int]] = None,
) -> None:
    """Raise unless ``heads`` describes a single-rooted, acyclic tree."""
    n = len(heads)
    if n == 0:
        raise EmptySentence("sentence has no tokens", sentence_id=sentence_id)

    def line_of(i: int) -> Optional[int]:
        return line_nos[i] if line_nos is not None else None

    for i, h in enumerate(heads):
        if h != ROOT and not 0 <= h < n:
            raise MalformedLine(
                f"head {h + 1} of token {i + 1} is outside the sentence",
                sentence_id=sentence_id,
                line_no=line_of(i),
            )

    # 0 = unvisited, 1 = on current path, 2 = known to reach the root
    state = [0] * n
    for start in range(n):
        path = []
        node = start
        while node != ROOT and state[node] == 0:
            state[node] = 1
            path.append(node)
            node = heads[node]
        if node != ROOT and state[node] == 1:
            raise CycleDetected(
                f"token {node + 1} lies on a head cycle",
                sentence_id=sentence_id,
                line_no=line_of(node),
            )
        for visited in path:
            state[visited] = 2

    # acyclic, so at least one root exists
    roots = [i for i, h in enumerate(heads) if h == ROOT]
    if len(roots) > 1:
        raise MultipleRoots(
            f"expected exactly one root, found {len(roots)}",
            sentence_id=sentence_id,
            line_no=line_of(roots[1]),
        )


class _FieldParsers:
    """``conllu`` field parsers that validate columns and remember the current line.

    ``conllu`` hands each parser the split columns but not the line number, so the
    token lines of the input are numbered up front and consumed in order as the
    ``id`` column of each line is parsed.
    """

    def __init__(self, token_line_nos: Sequence[int], source: Optional[str]):
        self._line_nos = token_line_nos
        self._cursor = 0
        self.source = source
        self.line_no: Optional[int] = None

    def as_dict(self) -> Dict[str, Callable[[List[str], int], object]]:
        parsers = {name: _raw for name in FIELDS}
        parsers.update(id=self.token_id, upos=self.upos, head=self.head)
        return parsers

    def next_line(self) -> Optional[int]:
        if self._cursor < len(self._line_nos):
            return self._line_nos[self._cursor]
        return None

    def token_id(self, columns: List[str], i: int) -> str:
        self.line_no = self.next_line()
        self._cursor += 1
        if len(columns) != N_COLUMNS:
            raise MalformedLine(
                f"expected {N_COLUMNS} tab-separated columns, found {len(columns)}",
                line_no=self.line_no, source=self.source,
            )
        return columns[i]

    def upos(self, columns: List[str], i: int) -> Optional[int]:
        if not _is_word_id(columns[0]):
            return None
        try:
            return upos_id(columns[i])
        except UnknownUpos as e:
            raise UnknownUpos(e.message, line_no=self.line_no, source=self.source) from None

    def head(self, columns: List[str], i: int) -> Optional[int]:
        if not _is_word_id(columns[0]):
            return None
        value = columns[i]
        if not value.isdecimal():
            raise NonIntegerHead(
                f"HEAD column {value!r} is not an integer",
                line_no=self.line_no, source=self.source,
            )
        return int(value) - 1 if int(value) > 0 else ROOT


def _raw(columns: List[str], i: int) -> str:
    return columns[i]


def _is_word_id(token_id: str) -> bool:
    return "-" not in token_id and "." not in token_id


def _normalize_lines(text: str) -> List[str]:
    # whitespace-only lines separate sentences, as blank lines do
    return [line.rstrip("\r") if line.strip() else "" for line in text.split("\n")]


def parse_conllu(text: str, source: Optional[str] = None) -> List[ParsedSentence]:
    """Parse CoNLL-U text into validated sentences.

    Multiword-token ranges (``3-4``) and empty nodes (``5.1``) are skipped. The
    ``sent_id``, ``label`` and ``pair_id`` comments are captured; other comments are
    ignored.
    """
    lines = _normalize_lines(text)
    token_line_nos = [
        line_no for line_no, line in enumerate(lines, start=1)
        if line and not line.lstrip().startswith("#")
    ]
    parsers = _FieldParsers(token_line_nos, source)

    sentences: List[ParsedSentence] = []
    offset = 0
    token_lists = conllu.parse_incr(io.StringIO("\n".join(lines)), fields=FIELDS,
                                    field_parsers=parsers.as_dict())
    try:
        for token_list in token_lists:
            line_nos = token_line_nos[offset:offset + len(token_list)]
            offset += len(token_list)
            sentences.append(_to_sentence(token_list, line_nos, len(sentences) + 1, source))
    except ParseException as e:
        raise MalformedLine(str(e), line_no=parsers.next_line(), source=source) from None

    logger.debug(f"Parsed {len(sentences)} sentences from {source or 'text'}")
    return sentences


def _to_sentence(
    token_list: TokenList,
    line_nos: Sequence[int],
    ordinal: int,
    source: Optional[str],
) -> ParsedSentence:
    metadata = token_list.metadata
    sentence_id = metadata.get("sent_id") or str(ordinal)
    first_line = line_nos[0] if line_nos else None

    words: List[str] = []
    upos: List[int] = []
    heads: List[int] = []
    deprels: List[str] = []
    word_lines: List[int] = []
    for token, line_no in zip(token_list, line_nos):
        token_id = token["id"]
        if not _is_word_id(token_id):
            continue
        if not token_id.isdecimal() or int(token_id) != len(words) + 1:
            raise MalformedLine(
                f"token id {token_id!r} is not the next word index {len(words) + 1}",
                sentence_id=sentence_id, line_no=line_no, source=source,
            )
        words.append(token["form"])
        upos.append(token["upos"])
        heads.append(token["head"])
        deprels.append(token["deprel"])
        word_lines.append(line_no)

    if not words:
        raise EmptySentence("block contains no word lines", sentence_id=sentence_id,
                            line_no=first_line, source=source)

    try:
        check_tree(heads, sentence_id, word_lines)
    except (MultipleRoots, CycleDetected, MalformedLine) as e:
        e.source = source
        raise

    label = None
    if metadata.get("label") is not None:
        try:
            label = int(metadata["label"])
        except ValueError:
            raise MalformedLine(f"label comment {metadata['label']!r} is not an integer",
                                sentence_id=sentence_id, line_no=first_line, source=source) from None

    return ParsedSentence(
        words=tuple(words),
        upos=tuple(upos),
        heads=tuple(heads),
        deprels=tuple(deprels),
        sentence_id=sentence_id,
        label=label,
        group_id=metadata.get("pair_id"),
    )


def read_conllu_file(path: Union[str, Path]) -> List[ParsedSentence]:
    """Read and parse a UTF-8 CoNLL-U file."""
    path = Path(path)
    return parse_conllu(path.read_text(encoding="utf-8"), source=str(path))


def serialize_conllu(sentences: Iterable[ParsedSentence]) -> str:
    """Write sentences back to CoNLL-U (unused columns become ``_``)."""
    return "".join(_to_token_list(sentence).serialize() for sentence in sentences)


def _to_token_list(sentence: ParsedSentence) -> TokenList:
    metadata = Metadata(sent_id=sentence.sentence_id)
    if sentence.group_id is not None:
        metadata["pair_id"] = sentence.group_id
    if sentence.label is not None:
        metadata["label"] = str(sentence.label)
    tokens = [
        Token(
            id=i + 1, form=word, lemma=None, upos=tag, xpos=None, feats=None,
            head=0 if head == ROOT else head + 1, deprel=deprel, deps=None, misc=None,
        )
        for i, (word, tag, head, deprel) in enumerate(
            zip(sentence.words, sentence.upos_tags, sentence.heads, sentence.deprels)
        )
    ]
    return TokenList(tokens, metadata=metadata)


def group_sentences(sentences: Sequence[ParsedSentence]) -> List[Tuple[ParsedSentence, ...]]:
    """Group consecutive sentences sharing a ``pair_id`` into one example."""
    groups: List[Tuple[ParsedSentence, ...]] = []
    current: List[ParsedSentence] = []
    for sentence in sentences:
        if current and (sentence.group_id is None or sentence.group_id != current[0].group_id):
            groups.append(tuple(current))
            current = []
        current.append(sentence)
    if current:
        groups.append(tuple(current))
    return groups


class Vocabulary:
    """Ordered wordpiece inventory; a piece's id is its line index in the file."""

    def __init__(self, pieces: Sequence[str]):
        self.pieces: List[str] = list(pieces)
        self._ids: Dict[str, int] = {}
        for i, piece in enumerate(self.pieces):
            if piece in self._ids:
                raise MalformedLine(f"duplicate vocabulary piece {piece!r}", line_no=i + 1)
            self._ids[piece] = i
        missing = [p for p in SPECIAL_PIECES if p not in self._ids]
        if missing:
            raise MalformedLine(f"vocabulary lacks special symbols {missing}")

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self._ids

    def id(self, piece: str) -> int:
        return self._ids.get(piece, self._ids[UNK])

    def ids(self, pieces: Iterable[str]) -> List[int]:
        return [self.id(p) for p in pieces]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def cls_id(self) -> int:
        return self._ids[CLS]

    @property
    def sep_id(self) -> int:
        return self._ids[SEP]


def load_vocab(path: Union[str, Path]) -> Vocabulary:
    """Load a vocabulary file with one piece per line."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary([line.rstrip("\r") for line in lines])


def save_vocab(vocab: Vocabulary, path: Union[str, Path]) -> None:
    Path(path).write_text("\n".join(vocab.pieces) + "\n", encoding="utf-8")


def build_vocab(words: Iterable[str]) -> Vocabulary:
    """Specials, then every character, its continuation form and every whole word."""
    inventory = set()
    for word in words:
        inventory.add(word)
        for ch in word:
            inventory.add(ch)
            inventory.add(CONTINUATION_MARKER + ch)
    inventory.difference_update(SPECIAL_PIECES)
    return Vocabulary(list(SPECIAL_PIECES) + sorted(inventory))


def wordpiece_tokenize(
    words: Sequence[str],
    vocab: Union[Vocabulary, Iterable[str]],
    strict: bool = False,
) -> WordpieceAlignment:
    """Greedy longest-match-first segmentation of each word.

    Non-initial pieces carry the ``##`` continuation marker. A word that cannot be
    segmented becomes a single ``[UNK]`` piece, or raises ``CharacterMismatch`` when
    ``strict`` is set.
    """
    known = vocab if isinstance(vocab, Vocabulary) else set(vocab)
    pieces: List[str] = []
    spans: List[Tuple[int, int]] = []

    for word in words:
        if not word:
            raise EmptyWord("cannot tokenize an empty word")
        segmented = _segment(word, known)
        if segmented is None:
            if strict:
                raise CharacterMismatch(f"word {word!r} cannot be built from the vocabulary")
            logger.warning(f"Word {word!r} has no wordpiece segmentation; using {UNK}")
            segmented = [UNK]
        spans.append((len(pieces), len(pieces) + len(segmented)))
        pieces.extend(segmented)

    return WordpieceAlignment(pieces=tuple(pieces), word_spans=tuple(spans))


def _segment(word: str, known) -> Optional[List[str]]:
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = CONTINUATION_MARKER + candidate
            if candidate in known:
                match = candidate
                break
            end -= 1
        if match is None:
            return None
        pieces.append(match)
        start = end
    return pieces

"""Word-level vocabulary, box tokens, prompt grammars and masking policies.

Every sequence the models see is built here:

* dense-caption prompt   ``[BOS] loc loc loc loc [EOS]``
* QA prompt              ``[BOS] <qtype> [TASK_SEP] loc*4 [TASK_SEP] caption... [EOS]``
* QA target              ``[BOS] question... [QA_SEP] answer... [EOS]``
* caption target         ``[BOS] caption... [EOS]``

Positions carry a role tag so that masking policies can address a span.
The token that closes a span (``[QA_SEP]`` after the question, ``[EOS]``
after an answer or caption) gets its own ``*_end`` role; policies include it
so the model learns where a span stops.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS, TASK_SEP, QA_SEP, MASK = (
    "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[TASK_SEP]", "[QA_SEP]", "[MASK]",
)
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, TASK_SEP, QA_SEP, MASK)
DEFAULT_LOC_BINS = 100

# role tags
PROMPT = "prompt"
SEPARATOR = "separator"
QUESTION = "question"
QUESTION_END = "question_end"
ANSWER = "answer"
ANSWER_END = "answer_end"
CAPTION = "caption"
CAPTION_END = "caption_end"


class QuestionType(str, enum.Enum):
    WHAT = "what"
    HOW = "how"
    WHERE = "where"
    WHO = "who"
    WHICH = "which"
    WHY = "why"
    WHEN = "when"
    BINARY = "binary"


DEFAULT_QTYPES = tuple(q.value for q in QuestionType)


class VocabError(ValueError):
    pass


class GrammarError(ValueError):
    pass


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel rectangle."""

    x1: int
    y1: int
    x2: int
    y2: int

    def validate(self, width: int, height: int) -> "BoundingBox":
        if not (0 <= self.x1 <= self.x2 < width and 0 <= self.y1 <= self.y2 < height):
            raise BoxError(f"box {self.as_list()} invalid for a {width}x{height} image")
        return self

    @property
    def area(self) -> int:
        return (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, xs: Sequence[int]) -> "BoundingBox":
        x1, y1, x2, y2 = (int(v) for v in xs)
        return cls(x1, y1, x2, y2)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Immutable token table: specials, then LOC tokens, then question types, then words."""

    def __init__(self, words: Sequence[str], loc_bins: int = DEFAULT_LOC_BINS,
                 qtypes: Sequence[str] = DEFAULT_QTYPES):
        if loc_bins < 2:
            raise VocabError("need at least 2 location bins")
        self.loc_bins = loc_bins
        self.qtypes = tuple(qtypes)
        tokens = list(SPECIAL_TOKENS)
        tokens += [f"[LOC_{i}]" for i in range(loc_bins)]
        tokens += [f"[Q_{q.upper()}]" for q in self.qtypes]
        tokens += list(words)
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens")
        self.tokens = tuple(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.pad, self.unk, self.bos, self.eos, self.task_sep, self.qa_sep, self.mask = range(7)
        self.n_special = len(SPECIAL_TOKENS)
        self.loc_start = self.n_special
        self.qtype_start = self.loc_start + loc_bins
        self.word_start = self.qtype_start + len(self.qtypes)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.loc_bins == other.loc_bins

    @property
    def words(self) -> tuple[str, ...]:
        return self.tokens[self.word_start:]

    def loc(self, bin_index: int) -> int:
        if not 0 <= bin_index < self.loc_bins:
            raise IndexError(bin_index)
        return self.loc_start + bin_index

    def qtype_id(self, qtype: str | QuestionType) -> int:
        q = qtype.value if isinstance(qtype, QuestionType) else str(qtype)
        try:
            return self.qtype_start + self.qtypes.index(q)
        except ValueError:
            raise VocabError(f"unknown question type {q!r}") from None

    def is_word(self, token_id: int) -> bool:
        return token_id >= self.word_start

    def is_special(self, token_id: int) -> bool:
        return token_id < self.word_start

    def word_mask(self) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        m[self.word_start:] = True
        return m

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, self.unk) for w in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def box_tokens(self, box: BoundingBox, width: int, height: int) -> list[int]:
        return [self.loc(b) for b in quantize_box(box, width, height, self.loc_bins)]

    # -- file format -----------------------------------------------------
    def save(self, path: str | Path) -> None:
        lines = [
            f"#specials {self.n_special}",
            f"#loc {self.loc_bins}",
            f"#qtypes {len(self.qtypes)}",
            *self.tokens,
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        header: dict[str, int] = {}
        tokens: list[str] = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("#"):
                key, value = line[1:].split()
                header[key] = int(value)
            elif line:
                tokens.append(line)
        n_special, n_loc, n_q = header["specials"], header["loc"], header["qtypes"]
        if tuple(tokens[:n_special]) != SPECIAL_TOKENS:
            raise VocabError(f"{path}: special tokens do not match")
        qtok = tokens[n_special + n_loc:n_special + n_loc + n_q]
        qtypes = [t[3:-1].lower() for t in qtok]
        return cls(tokens[n_special + n_loc + n_q:], loc_bins=n_loc, qtypes=qtypes)


def build_vocab(corpus: Iterable[str], min_frequency: int = 1, loc_bins: int = DEFAULT_LOC_BINS,
                qtypes: Sequence[str] = DEFAULT_QTYPES) -> Vocab:
    """Words ordered by (frequency desc, lexicographic); rarer words fall back to UNK."""
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(tokenize(text))
    if not counts:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    words = sorted((w for w, c in counts.items() if c >= min_frequency), key=lambda w: (-counts[w], w))
    return Vocab(words, loc_bins=loc_bins, qtypes=qtypes)


def quantize_coord(c: int, extent: int, bins: int) -> int:
    return min(c * bins // extent, bins - 1)


def quantize_box(box: BoundingBox, width: int, height: int, bins: int = DEFAULT_LOC_BINS) -> tuple[int, int, int, int]:
    """Bin indices for (x1, y1, x2, y2); coordinate c over extent L lands in floor(c*B/L)."""
    if bins < 2:
        raise BoxError("need at least 2 bins")
    box.validate(width, height)
    return (
        quantize_coord(box.x1, width, bins),
        quantize_coord(box.y1, height, bins),
        quantize_coord(box.x2, width, bins),
        quantize_coord(box.y2, height, bins),
    )


@dataclass
class TokenSequence:
    ids: list[int]
    roles: list[str]

    def __post_init__(self):
        if len(self.ids) != len(self.roles):
            raise ValueError("ids and roles must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.ids + other.ids, self.roles + other.roles)

    def positions(self, roles: Iterable[str]) -> list[int]:
        wanted = set(roles)
        return [i for i, r in enumerate(self.roles) if r in wanted]


def _words(vocab: Vocab, text_or_ids, what: str) -> list[int]:
    """Word ids of a text span; delimiters are stripped, other specials rejected."""
    ids = vocab.encode(text_or_ids) if isinstance(text_or_ids, str) else list(
        text_or_ids.ids if isinstance(text_or_ids, TokenSequence) else text_or_ids)
    ids = [i for i in ids if i not in (vocab.bos, vocab.eos, vocab.pad)]
    for i in ids:
        if i == vocab.qa_sep:
            raise GrammarError(f"{what} contains [QA_SEP]")
        if vocab.is_special(i) and i != vocab.unk:
            raise GrammarError(f"{what} contains special token {vocab.tokens[i]}")
    return ids


def build_dc_prompt(vocab: Vocab, box: BoundingBox, width: int, height: int) -> TokenSequence:
    ids = [vocab.bos, *vocab.box_tokens(box, width, height), vocab.eos]
    return TokenSequence(ids, [PROMPT] * len(ids))


def build_qa_prompt(vocab: Vocab, qtype: str | QuestionType, box: BoundingBox, width: int, height: int,
                    caption) -> TokenSequence:
    words = _words(vocab, caption, "caption")
    ids = [vocab.bos, vocab.qtype_id(qtype), vocab.task_sep, *vocab.box_tokens(box, width, height),
           vocab.task_sep, *words, vocab.eos]
    return TokenSequence(ids, [PROMPT] * len(ids))


def build_caption_target(vocab: Vocab, caption) -> TokenSequence:
    words = _words(vocab, caption, "caption")
    ids = [vocab.bos, *words, vocab.eos]
    roles = [SEPARATOR, *[CAPTION] * len(words), CAPTION_END]
    return TokenSequence(ids, roles)


def build_qa_target(vocab: Vocab, question, answer) -> TokenSequence:
    q = _words(vocab, question, "question")
    a = _words(vocab, answer, "answer")
    if not q:
        raise GrammarError("empty question")
    ids = [vocab.bos, *q, vocab.qa_sep, *a, vocab.eos]
    roles = [SEPARATOR, *[QUESTION] * len(q), QUESTION_END, *[ANSWER] * len(a), ANSWER_END]
    assert ids.count(vocab.qa_sep) == 1
    return TokenSequence(ids, roles)


@dataclass(frozen=True)
class ParseResult:
    ok: bool
    question: str = ""
    answer: str = ""
    reason: str = ""


def parse_qa_output(vocab: Vocab, ids: Sequence[int]) -> ParseResult:
    """Split a decoded ``[BOS] q [QA_SEP] a [EOS]`` sequence at its first separator."""
    ids = list(ids)
    if vocab.eos in ids:
        ids = ids[:ids.index(vocab.eos)]
    ids = [i for i in ids if i not in (vocab.bos, vocab.pad)]
    if vocab.qa_sep not in ids:
        return ParseResult(False, reason="no separator")
    k = ids.index(vocab.qa_sep)
    q, a = ids[:k], ids[k + 1:]
    if not q:
        return ParseResult(False, reason="empty question")
    if not a:
        return ParseResult(False, vocab.decode(q), "", reason="empty answer")
    return ParseResult(True, vocab.decode(q), vocab.decode(a))


class MaskMode(str, enum.Enum):
    RANDOM = "random_bernoulli"
    FULL = "full"
    NONE = "none"


@dataclass(frozen=True)
class MaskPolicy:
    mode: MaskMode = MaskMode.RANDOM
    probability: float = 0.6
    roles: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("mask probability must lie in [0, 1]")


# role sets addressed by the training tasks
CAPTION_SPAN = frozenset({CAPTION, CAPTION_END})
QUESTION_SPAN = frozenset({QUESTION, QUESTION_END})
ANSWER_SPAN = frozenset({ANSWER, ANSWER_END})


def apply_mask(seq: TokenSequence, policy: MaskPolicy, rng: np.random.Generator,
               mask_id: int) -> tuple[TokenSequence, np.ndarray, np.ndarray]:
    """Replace targeted positions with ``mask_id``.

    Returns (masked sequence, target positions, original ids at those
    positions).  Prompt and separator positions are never touched.
    """
    candidates = np.array(seq.positions(policy.roles - {PROMPT, SEPARATOR}), dtype=np.int64)
    if policy.mode == MaskMode.NONE or candidates.size == 0:
        chosen = np.zeros(0, dtype=np.int64)
    elif policy.mode == MaskMode.FULL:
        chosen = candidates
    else:
        draws = rng.random(candidates.size)
        chosen = candidates[draws < policy.probability]
    ids = list(seq.ids)
    targets = np.array([ids[i] for i in chosen], dtype=np.int64)
    for i in chosen:
        ids[i] = mask_id
    return TokenSequence(ids, list(seq.roles)), chosen, targets

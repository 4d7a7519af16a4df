"""Consistency filter: a VQA model whose beam-searched answer must match the generator's.

The filter reads ``[BOS] question [QA_SEP]`` and decodes the answer with
beam search.  Two conditioning contexts are supported:

``vqa``        box-free image features and no prompt (the standard filter)
``generator``  the generator's box-conditioned features and QA prompt, which
               lets the generator weights act as their own filter
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .generator import Decoder, ANSWER_STAGE
from .model import VisionLanguageModel
from .objectives import answer_policy, batch_mlm_loss, prepare_vqa
from .optim import AdamW
from .vocab import BoundingBox, GrammarError, TokenSequence, Vocab, build_qa_prompt, build_qa_target

VQA_CONTEXT = "vqa"
GENERATOR_CONTEXT = "generator"


@dataclass
class BeamConfig:
    beam_size: int = 3
    max_answer_len: int = 6
    strict: bool = False        # compare raw strings instead of normalized ones
    context: str = VQA_CONTEXT

    def __post_init__(self):
        if self.beam_size < 1 or self.max_answer_len < 1:
            raise ValueError("beam_size and max_answer_len must be at least 1")
        if self.context not in (VQA_CONTEXT, GENERATOR_CONTEXT):
            raise ValueError(f"unknown filter context {self.context!r}")


@dataclass
class QaCandidate:
    image_id: str
    box: BoundingBox
    qtype: str
    question: str
    generator_answer: str
    caption: str = ""
    box_index: int = 0
    caption_index: int = 0
    sample_index: int = 0
    filter_answer: str | None = None
    kept: bool | None = None

    def to_dict(self) -> dict:
        d = {
            "image_id": self.image_id, "box_index": self.box_index, "box": self.box.as_list(),
            "caption_index": self.caption_index, "caption": self.caption, "qtype": self.qtype,
            "sample_index": self.sample_index, "question": self.question,
            "generator_answer": self.generator_answer,
        }
        if self.filter_answer is not None:
            d["filter_answer"] = self.filter_answer
        if self.kept is not None:
            d["kept"] = self.kept
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QaCandidate":
        return cls(d["image_id"], BoundingBox.from_list(d["box"]), d["qtype"], d["question"],
                   d["generator_answer"], d.get("caption", ""), d.get("box_index", 0),
                   d.get("caption_index", 0), d.get("sample_index", 0), d.get("filter_answer"),
                   d.get("kept"))


def normalize_answer(text: str) -> str:
    """Lowercase, trim and collapse internal whitespace."""
    return " ".join(text.lower().split())


def answers_match(generator_answer: str, filter_answer: str, strict: bool = False) -> bool:
    if strict:
        return generator_answer == filter_answer
    return normalize_answer(generator_answer) == normalize_answer(filter_answer)


# -- training ------------------------------------------------------------------


def validate_vqa_items(vocab: Vocab, items: Sequence[tuple]):
    """Split (image_index, question, answer) items into usable ones and rejections."""
    good, rejected = [], []
    for it in items:
        try:
            build_qa_target(vocab, it[1], it[2])
            if not vocab.encode(it[2]):
                raise GrammarError("empty answer")
            good.append(it)
        except GrammarError as exc:
            rejected.append((it, str(exc)))
    return good, rejected


def filter_loss(model: VisionLanguageModel, vocab: Vocab, images: np.ndarray, items: Sequence[tuple],
                rng: np.random.Generator) -> T.Tensor:
    """Answer-span MLM loss on box-free features; ``images`` is already gathered per item."""
    vision = model.encode_images(images, None)
    batch = prepare_vqa(vocab, [(q, a) for _, q, a in items], answer_policy(), rng)
    return batch_mlm_loss(model, batch, vision)


def train_filter_step(model: VisionLanguageModel, optimizer: AdamW, vocab: Vocab, images: np.ndarray,
                      items: Sequence[tuple], rng: np.random.Generator) -> tuple[float | None, list]:
    """One step on (image_index, question, answer) items; returns (loss, rejected)."""
    good, rejected = validate_vqa_items(vocab, items)
    if not good:
        return None, rejected
    loss = filter_loss(model, vocab, images[[it[0] for it in good]], good, rng)
    model.params.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item(), rejected


# -- beam search -----------------------------------------------------------------


@dataclass(order=True)
class Hypothesis:
    sort_key: tuple = field(init=False, repr=False)
    tokens: tuple[int, ...]
    logprob: float
    finished: bool = False

    def __post_init__(self):
        self.sort_key = (-self.score, self.tokens)

    @property
    def score(self) -> float:
        """Mean per-token log-probability (the terminating [EOS] counts as a token)."""
        return self.logprob / max(len(self.tokens), 1)


def _log_softmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    z = np.where(allowed, logits.astype(np.float64), -np.inf)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


class BeamSearcher:
    def __init__(self, model: VisionLanguageModel, vocab: Vocab, cfg: BeamConfig):
        self.model, self.vocab, self.cfg = model, vocab, cfg
        self.decoder = Decoder(model, vocab)
        self.allowed = self.decoder.allowed[ANSWER_STAGE]

    def contexts(self, images: np.ndarray, questions: Sequence[str], boxes=None, captions=None,
                 qtypes=None) -> tuple[np.ndarray, list[TokenSequence], list[list[int]]]:
        model, vocab = self.model, self.vocab
        h, w = model.cfg.image_height, model.cfg.image_width
        with T.no_grad():
            if self.cfg.context == GENERATOR_CONTEXT:
                vision = model.encode_images(images, list(boxes))
                prompts = [build_qa_prompt(vocab, qt, b, w, h, c) for b, c, qt in zip(boxes, captions, qtypes)]
            else:
                vision = model.encode_images(images, None)
                prompts = [TokenSequence([], []) for _ in questions]
        prefixes = [[vocab.bos, *vocab.encode(q), vocab.qa_sep] for q in questions]
        return vision.tokens.data, prompts, prefixes

    def search(self, vision: np.ndarray, prompts: Sequence[TokenSequence],
               prefixes: Sequence[list[int]]) -> list[Hypothesis]:
        """Best hypothesis per row; all rows advance together, one forward per step."""
        b, eos, mask = self.cfg.beam_size, self.vocab.eos, self.vocab.mask
        width = self.model.cfg.max_len
        live = [[Hypothesis((), 0.0)] for _ in prompts]
        done: list[list[Hypothesis]] = [[] for _ in prompts]
        for step in range(self.cfg.max_answer_len):
            rows = [(i, h) for i, hs in enumerate(live) for h in hs
                    if len(prompts[i]) + len(prefixes[i]) + len(h.tokens) < width]
            if not rows:
                break
            logits = self.decoder.slot_logits(
                [list(prompts[i].ids) + prefixes[i] + [mask] * len(h.tokens) for i, h in rows],
                vision[[i for i, _ in rows]])
            logp = _log_softmax(logits, self.allowed)
            expansions: list[list[Hypothesis]] = [[] for _ in prompts]
            for r, (i, h) in enumerate(rows):
                top = np.argsort(-logp[r], kind="stable")[:b]
                for tok in top:
                    if not np.isfinite(logp[r, tok]):
                        continue
                    tok = int(tok)
                    expansions[i].append(Hypothesis(h.tokens + (tok,), h.logprob + float(logp[r, tok]), tok == eos))
            for i, exp in enumerate(expansions):
                exp.sort()
                chosen = exp[:b]
                done[i].extend(x for x in chosen if x.finished)
                live[i] = [x for x in chosen if not x.finished]
        best = []
        for i in range(len(prompts)):
            pool = done[i] + live[i]  # surviving live hypotheses are truncated at the length cap
            best.append(min(pool) if pool else Hypothesis((), 0.0))
        return best

    def answer_text(self, hyp: Hypothesis) -> str:
        return self.vocab.decode([t for t in hyp.tokens if t != self.vocab.eos])


def predict_answers(model: VisionLanguageModel, vocab: Vocab, images: np.ndarray, questions: Sequence[str],
                    cfg: BeamConfig, boxes=None, captions=None, qtypes=None) -> list[str]:
    """Beam-searched answers; ``images`` is preprocessed (B, 3, H, W)."""
    if not len(questions):
        return []
    searcher = BeamSearcher(model, vocab, cfg)
    vision, prompts, prefixes = searcher.contexts(images, questions, boxes, captions, qtypes)
    return [searcher.answer_text(h) for h in searcher.search(vision, prompts, prefixes)]


def predict_answer(model, vocab, image: np.ndarray, question: str, cfg: BeamConfig, box=None, caption=None,
                   qtype=None) -> str:
    extra = {} if cfg.context == VQA_CONTEXT else {"boxes": [box], "captions": [caption], "qtypes": [qtype]}
    return predict_answers(model, vocab, image[None], [question], cfg, **extra)[0]


def sequence_score(model: VisionLanguageModel, vocab: Vocab, image: np.ndarray, question: str,
                   answer_ids: Sequence[int], cfg: BeamConfig, box=None, caption=None, qtype=None) -> float:
    """Mean log-probability the beam scorer assigns to ``answer_ids`` (ending in [EOS])."""
    searcher = BeamSearcher(model, vocab, cfg)
    extra = ({"boxes": [box], "captions": [caption], "qtypes": [qtype]}
             if cfg.context == GENERATOR_CONTEXT else {})
    vision, prompts, prefixes = searcher.contexts(image[None], [question], **extra)
    total = 0.0
    for k, tok in enumerate(answer_ids):
        logits = searcher.decoder.slot_logits([list(prompts[0].ids) + prefixes[0] + [vocab.mask] * k], vision)
        total += float(_log_softmax(logits, searcher.allowed)[0, tok])
    return total / max(len(answer_ids), 1)


# -- filtering ---------------------------------------------------------------------


@dataclass
class FilterStats:
    total: int = 0
    kept: int = 0
    per_qtype: dict = field(default_factory=dict)

    @property
    def retention(self) -> float | None:
        return self.kept / self.total if self.total else None

    def merge(self, other: "FilterStats") -> "FilterStats":
        out = FilterStats(self.total + other.total, self.kept + other.kept)
        for src in (self.per_qtype, other.per_qtype):
            for qt, (n, k) in src.items():
                tn, tk = out.per_qtype.get(qt, (0, 0))
                out.per_qtype[qt] = (tn + n, tk + k)
        return out

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "retention": self.retention,
            "per_qtype": {qt: {"total": n, "kept": k, "retention": k / n if n else None}
                          for qt, (n, k) in sorted(self.per_qtype.items())},
        }


def filter_pairs(candidates: Sequence[QaCandidate], model: VisionLanguageModel, vocab: Vocab,
                 images: dict[str, np.ndarray], cfg: BeamConfig,
                 batch_size: int = 64) -> tuple[list[QaCandidate], FilterStats]:
    """Predict an answer per candidate, set ``filter_answer``/``kept`` and keep the matches.

    ``images`` maps image id to a preprocessed (3, H, W) array.
    """
    for start in range(0, len(candidates), batch_size):
        chunk = candidates[start:start + batch_size]
        pix = np.stack([images[c.image_id] for c in chunk])
        extra = ({"boxes": [c.box for c in chunk], "captions": [c.caption for c in chunk],
                  "qtypes": [c.qtype for c in chunk]} if cfg.context == GENERATOR_CONTEXT else {})
        answers = predict_answers(model, vocab, pix, [c.question for c in chunk], cfg, **extra)
        for c, a in zip(chunk, answers):
            c.filter_answer = a
            c.kept = bool(a) and answers_match(c.generator_answer, a, cfg.strict)
    kept = [c for c in candidates if c.kept]
    totals, hits = Counter(c.qtype for c in candidates), Counter(c.qtype for c in kept)
    stats = FilterStats(len(candidates), len(kept), {qt: (totals[qt], hits[qt]) for qt in totals})
    return kept, stats

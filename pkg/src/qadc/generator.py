"""QA/DC generator: multi-task training and batched two-stage decoding.

Decoding writes ``[MASK]`` at the next slot, reads the logits there and
replaces it with the chosen token.  Dense captions are top-K sampled.  QA
sequences are top-K sampled until ``[QA_SEP]`` appears, then decoded
greedily until ``[EOS]``.  Each sample owns its random stream and every
sequence is laid out in a buffer of the model's full ``max_len``, so a
sample's result does not depend on which other samples share its batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import CAUSAL, VisionFeatureMap, VisionLanguageModel
from .objectives import LossBreakdown, MaskConfig, breakdown, generator_loss, generator_losses
from .optim import AdamW
from .vocab import (
    BoundingBox, GrammarError, ParseResult, TokenSequence, Vocab, build_dc_prompt, build_qa_prompt,
    build_qa_target, parse_qa_output,
)

QUESTION_STAGE = "question_stage"
ANSWER_STAGE = "answer_stage"
CAPTION_STAGE = "caption_stage"
DONE = "done"


@dataclass
class SamplingConfig:
    top_k: int = 10
    max_decode_len: int = 24
    temperature: float = 1.0
    seed: int = 0
    n_q: int = 4
    n_dc: int = 2

    def __post_init__(self):
        if self.top_k < 1 or self.n_q < 1 or self.n_dc < 1:
            raise ValueError("top_k, n_q and n_dc must be at least 1")


@dataclass
class DecodeState:
    tokens: list[int]          # target tokens emitted so far, starting with [BOS]
    mode: str
    finished: bool = False
    truncated: bool = False
    trace: list = field(default_factory=list)  # (mode, candidate ids, chosen) per step when tracing


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for one (seed, key...) tuple; strings are hashed stably."""
    ints = []
    for k in keys:
        if isinstance(k, str):
            ints.append(int.from_bytes(k.encode("utf-8")[:16].ljust(16, b"\0"), "little") % (2**63))
            ints.append(len(k))
        else:
            ints.append(int(k))
    return np.random.default_rng([int(seed), *ints])


def top_k_choice(logits: np.ndarray, allowed: np.ndarray, k: int, temperature: float,
                 rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Sample from the renormalised top-K allowed logits; ties rank lower ids first."""
    z = np.where(allowed, logits.astype(np.float64) / temperature, -np.inf)
    order = np.argsort(-z, kind="stable")
    k = max(1, min(k, int(allowed.sum())))
    top = order[:k]
    p = np.exp(z[top] - z[top[0]])
    p /= p.sum()
    u = rng.random()
    idx = min(int(np.searchsorted(np.cumsum(p), u, side="right")), k - 1)
    return int(top[idx]), top


def greedy_choice(logits: np.ndarray, allowed: np.ndarray) -> int:
    return int(np.argmax(np.where(allowed, logits, -np.inf)))


class Decoder:
    """Slot-filling decoder over a fixed-width buffer."""

    def __init__(self, model: VisionLanguageModel, vocab: Vocab):
        self.model = model
        self.vocab = vocab
        words = vocab.word_mask()
        words[vocab.unk] = False
        self.allowed = {
            CAPTION_STAGE: words | (np.arange(len(vocab)) == vocab.eos),
            QUESTION_STAGE: words | (np.arange(len(vocab)) == vocab.qa_sep),
            ANSWER_STAGE: words | (np.arange(len(vocab)) == vocab.eos),
        }

    def visible(self, tokens: Sequence[int], stage: str) -> list[int]:
        """Decoder input for ``tokens``; in the answer stage earlier answer tokens stay masked.

        Answer spans are always trained fully masked, so the answer is read off
        a run of [MASK] slots rather than a revealed history.
        """
        tokens = list(tokens)
        if stage == ANSWER_STAGE and self.vocab.qa_sep in tokens:
            cut = tokens.index(self.vocab.qa_sep) + 1
            tokens[cut:] = [self.vocab.mask] * (len(tokens) - cut)
        return tokens

    def slot_logits(self, prefixes: Sequence[Sequence[int]], vision_rows: np.ndarray) -> np.ndarray:
        """Logits at the [MASK] slot appended to each prefix; (n, V) float32."""
        model, vocab = self.model, self.vocab
        width = model.cfg.max_len
        n = len(prefixes)
        ids = np.full((n, width), vocab.pad, dtype=np.int64)
        cursors = np.empty(n, dtype=np.int64)
        for r, pre in enumerate(prefixes):
            ids[r, :len(pre)] = pre
            ids[r, len(pre)] = vocab.mask
            cursors[r] = len(pre)
        with T.no_grad():
            hidden = model.text_hidden(ids, T.Tensor(vision_rows), CAUSAL, vocab.pad)
        sel = hidden.data[np.arange(n), cursors][:, None, :]
        w, b = model.params["text.head.w"].data, model.params["text.head.b"].data
        return (sel @ w + b)[:, 0, :]

    def run(self, vision: VisionFeatureMap, prompts: Sequence[TokenSequence], modes: Sequence[str],
            cfg: SamplingConfig, rngs: Sequence[np.random.Generator],
            prefixes: Sequence[Sequence[int]] | None = None, trace: bool = False) -> list[DecodeState]:
        vocab, width = self.vocab, self.model.cfg.max_len
        vt = vision.tokens.data
        states = []
        for i, prompt in enumerate(prompts):
            start = list(prefixes[i]) if prefixes is not None else [vocab.bos]
            st = DecodeState(start, modes[i])
            if len(prompt) + len(st.tokens) >= width:
                st.finished, st.truncated, st.mode = True, True, DONE
            states.append(st)
        while True:
            active = [i for i, s in enumerate(states) if not s.finished]
            if not active:
                break
            logits = self.slot_logits(
                [list(prompts[i].ids) + self.visible(states[i].tokens, states[i].mode) for i in active], vt[active])
            for row, i in enumerate(active):
                st = states[i]
                allowed = self.allowed[st.mode]
                if st.mode == ANSWER_STAGE:
                    tok = greedy_choice(logits[row], allowed)
                    cands = np.array([tok])
                else:
                    tok, cands = top_k_choice(logits[row], allowed, cfg.top_k, cfg.temperature, rngs[i])
                if trace:
                    st.trace.append((st.mode, cands, tok))
                st.tokens.append(tok)
                if st.mode == QUESTION_STAGE and tok == vocab.qa_sep:
                    st.mode = ANSWER_STAGE
                elif st.mode in (ANSWER_STAGE, CAPTION_STAGE) and tok == vocab.eos:
                    st.mode, st.finished = DONE, True
                    continue
                generated = len(st.tokens) - 1
                if len(prompts[i]) + len(st.tokens) >= width or generated >= cfg.max_decode_len:
                    st.finished, st.truncated, st.mode = True, True, DONE
        return states


# -- public decode API ---------------------------------------------------------


@dataclass
class QaGeneration:
    question: str
    answer: str
    token_ids: list[int]
    status: str  # "ok" or a parse-failure reason
    truncated: bool = False


def _qa_result(vocab: Vocab, st: DecodeState) -> QaGeneration:
    parsed: ParseResult = parse_qa_output(vocab, st.tokens)
    # an output cut off before its [EOS] is never a usable pair
    status = "truncated" if st.truncated else ("ok" if parsed.ok else parsed.reason)
    return QaGeneration(parsed.question, parsed.answer, list(st.tokens), status, st.truncated)


def caption_text(vocab: Vocab, st: DecodeState) -> str:
    ids = [t for t in st.tokens if t not in (vocab.bos, vocab.eos)]
    return vocab.decode(ids)


def batched_generate(model: VisionLanguageModel, vocab: Vocab, vision: VisionFeatureMap,
                     prompts: Sequence[TokenSequence], kind: str, cfg: SamplingConfig,
                     rngs: Sequence[np.random.Generator], trace: bool = False) -> list[DecodeState]:
    """Decode every prompt; ``kind`` is "qa" (two-stage) or "dc" (top-K caption)."""
    mode = QUESTION_STAGE if kind == "qa" else CAPTION_STAGE
    return Decoder(model, vocab).run(vision, prompts, [mode] * len(prompts), cfg, rngs, trace=trace)


def sample_dense_captions(model: VisionLanguageModel, vocab: Vocab, images: np.ndarray,
                          boxes: Sequence[BoundingBox], cfg: SamplingConfig,
                          rngs: Sequence[np.random.Generator]) -> list[tuple[str, DecodeState]]:
    """One caption per (image, box) row; ``images`` is preprocessed (B, 3, H, W)."""
    h, w = model.cfg.image_height, model.cfg.image_width
    with T.no_grad():
        vision = model.encode_images(images, list(boxes))
    prompts = [build_dc_prompt(vocab, b, w, h) for b in boxes]
    states = batched_generate(model, vocab, vision, prompts, "dc", cfg, rngs)
    return [(caption_text(vocab, s), s) for s in states]


def sample_dense_caption(model, vocab, image: np.ndarray, box: BoundingBox, cfg: SamplingConfig,
                         rng: np.random.Generator) -> str:
    return sample_dense_captions(model, vocab, image[None], [box], cfg, [rng])[0][0]


def generate_qas(model: VisionLanguageModel, vocab: Vocab, images: np.ndarray, boxes: Sequence[BoundingBox],
                 captions: Sequence[str], qtypes: Sequence[str], cfg: SamplingConfig,
                 rngs: Sequence[np.random.Generator], trace: bool = False) -> list[QaGeneration]:
    h, w = model.cfg.image_height, model.cfg.image_width
    with T.no_grad():
        vision = model.encode_images(images, list(boxes))
    prompts = [build_qa_prompt(vocab, qt, b, w, h, c) for b, c, qt in zip(boxes, captions, qtypes)]
    states = batched_generate(model, vocab, vision, prompts, "qa", cfg, rngs, trace=trace)
    return [_qa_result(vocab, s) for s in states]


def generate_qa(model, vocab, image: np.ndarray, box: BoundingBox, caption: str, qtype: str,
                cfg: SamplingConfig, rng: np.random.Generator) -> QaGeneration:
    return generate_qas(model, vocab, image[None], [box], [caption], [qtype], cfg, [rng])[0]


def greedy_answers(model: VisionLanguageModel, vocab: Vocab, images: np.ndarray, boxes: Sequence[BoundingBox],
                   captions: Sequence[str], qtypes: Sequence[str], questions: Sequence[str],
                   cfg: SamplingConfig) -> list[str]:
    """Greedy continuation of prompt + ``[BOS] question [QA_SEP]``, decoded independently."""
    h, w = model.cfg.image_height, model.cfg.image_width
    with T.no_grad():
        vision = model.encode_images(images, list(boxes))
    prompts = [build_qa_prompt(vocab, qt, b, w, h, c) for b, c, qt in zip(boxes, captions, qtypes)]
    prefixes = [[vocab.bos, *vocab.encode(q), vocab.qa_sep] for q in questions]
    dummy = [np.random.default_rng(0) for _ in prompts]
    states = Decoder(model, vocab).run(vision, prompts, [ANSWER_STAGE] * len(prompts), cfg, dummy,
                                       prefixes=prefixes)
    return [_qa_result(vocab, s).answer for s in states]


# -- training ------------------------------------------------------------------


@dataclass
class GeneratorItem:
    image_index: int
    box: BoundingBox
    caption: str
    qtype: str
    question: str
    answer: str


def validate_items(vocab: Vocab, items: Sequence[GeneratorItem], width: int, height: int):
    good, rejected = [], []
    for it in items:
        try:
            build_qa_prompt(vocab, it.qtype, it.box, width, height, it.caption)
            build_qa_target(vocab, it.question, it.answer)
            if not vocab.encode(it.caption):
                raise GrammarError("empty caption")
            good.append(it)
        except (GrammarError, ValueError) as exc:
            rejected.append((it, str(exc)))
    return good, rejected


def train_generator_step(model: VisionLanguageModel, optimizer: AdamW, vocab: Vocab, images: np.ndarray,
                         items: Sequence[GeneratorItem], rng: np.random.Generator,
                         masks: MaskConfig = MaskConfig()) -> tuple[LossBreakdown, list]:
    """One optimizer step on L_DC + L_Q + L_A; ``images`` is the full preprocessed image array."""
    good, rejected = validate_items(vocab, items, model.cfg.image_width, model.cfg.image_height)
    if not good:
        return LossBreakdown(), rejected
    batch_images = images[[it.image_index for it in good]]
    tuples = [(it.box, it.caption, it.qtype, it.question, it.answer) for it in good]
    losses = generator_losses(model, vocab, batch_images, tuples, rng, masks)
    total = generator_loss(losses)
    model.params.zero_grad()
    total.backward()
    optimizer.step()
    return breakdown(losses, total), rejected


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    max_minutes: float = 0.0  # wall-clock cap, 0 = none
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 100
    seed: int = 0


def run_training(step_fn: Callable[[np.random.Generator], dict], cfg: TrainConfig,
                 log: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Drive ``step_fn`` for ``cfg.steps`` steps or until the wall-clock cap."""
    rng = np.random.default_rng(cfg.seed)
    history = []
    start = time.monotonic()
    for step in range(1, cfg.steps + 1):
        record = step_fn(rng)
        record["step"] = step
        history.append(record)
        if log is not None and (step % cfg.log_every == 0 or step == 1):
            log(step, record)
        if cfg.max_minutes and time.monotonic() - start > cfg.max_minutes * 60:
            break
    return history

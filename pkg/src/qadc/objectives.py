"""Training losses: the generator triple (DC, Q, A) and the pre-training tasks.

All text tasks share one masked-LM form: targeted positions are replaced by
``[MASK]`` in the input and the model predicts the original token at that
position.  Batches are prepared (masks drawn) before the forward pass, so a
prepared batch gives a deterministic loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .model import BIDIRECTIONAL, CAUSAL, VisionFeatureMap, VisionLanguageModel
from .tensor import Tensor
from .vocab import (
    ANSWER_SPAN, CAPTION_SPAN, QUESTION_SPAN, BoundingBox, MaskMode, MaskPolicy, TokenSequence, Vocab,
    apply_mask, build_caption_target, build_dc_prompt, build_qa_prompt, build_qa_target,
)

TASK_ORDER = ("dc", "q", "a", "itc", "itm", "ic", "imlm", "vqa")
GENERATOR_TASKS = ("dc", "q", "a")
PASS1_TASKS = ("itc", "itm", "ic", "imlm")
PASS2_TASKS = ("vqa", "dc")
PRETRAIN_TASKS = ("itc", "itm", "ic", "imlm", "vqa", "dc")


class DegenerateBatchError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    caption_p: float = 0.6   # IC / IMLM / DC
    question_p: float = 0.6  # L_Q


def caption_policy(p: float = 0.6) -> MaskPolicy:
    return MaskPolicy(MaskMode.RANDOM, p, CAPTION_SPAN)


def question_policy(p: float = 0.6) -> MaskPolicy:
    return MaskPolicy(MaskMode.RANDOM, p, QUESTION_SPAN)


def answer_policy() -> MaskPolicy:
    return MaskPolicy(MaskMode.FULL, 1.0, ANSWER_SPAN)


@dataclass
class TaskSpec:
    task: str
    mode: str
    policy: MaskPolicy | None
    enabled: bool = True


def default_task_specs(masks: MaskConfig = MaskConfig()) -> dict[str, TaskSpec]:
    return {
        "dc": TaskSpec("dc", CAUSAL, caption_policy(masks.caption_p)),
        "q": TaskSpec("q", CAUSAL, question_policy(masks.question_p)),
        "a": TaskSpec("a", CAUSAL, answer_policy()),
        "ic": TaskSpec("ic", CAUSAL, caption_policy(masks.caption_p)),
        "imlm": TaskSpec("imlm", BIDIRECTIONAL, caption_policy(masks.caption_p)),
        "vqa": TaskSpec("vqa", CAUSAL, answer_policy()),
        "itc": TaskSpec("itc", BIDIRECTIONAL, None),
        "itm": TaskSpec("itm", BIDIRECTIONAL, None),
    }


@dataclass
class MlmBatch:
    """Padded masked inputs plus the (row, col) positions and ids to predict."""

    ids: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray
    mode: str = CAUSAL
    roles: list[list[str]] = field(default_factory=list)

    @property
    def num_targets(self) -> int:
        return int(self.targets.size)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int, length: int | None = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def prepare_mlm(vocab: Vocab, pairs: Sequence[tuple[TokenSequence | None, TokenSequence]], policy: MaskPolicy,
                rng: np.random.Generator, mode: str = CAUSAL) -> MlmBatch:
    """Mask each target with ``policy`` and prepend its (unmasked) prompt."""
    seqs, rows, cols, targets, roles = [], [], [], [], []
    for r, (prompt, target) in enumerate(pairs):
        masked, pos, tgt = apply_mask(target, policy, rng, vocab.mask)
        offset = len(prompt) if prompt is not None else 0
        full = (prompt + masked) if prompt is not None else masked
        seqs.append(full.ids)
        roles.append(full.roles)
        rows.extend([r] * len(pos))
        cols.extend((pos + offset).tolist())
        targets.extend(tgt.tolist())
    return MlmBatch(
        pad_batch(seqs, vocab.pad), np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
        np.array(targets, dtype=np.int64), mode, roles,
    )


# -- batch builders for each task -------------------------------------------------


def prepare_dc(vocab: Vocab, items: Sequence[tuple[BoundingBox, str]], width: int, height: int,
               policy: MaskPolicy, rng: np.random.Generator) -> MlmBatch:
    pairs = [(build_dc_prompt(vocab, box, width, height), build_caption_target(vocab, cap)) for box, cap in items]
    return prepare_mlm(vocab, pairs, policy, rng, CAUSAL)


def prepare_qa(vocab: Vocab, items: Sequence[tuple[BoundingBox, str, str, str, str]], width: int, height: int,
               policy: MaskPolicy, rng: np.random.Generator) -> MlmBatch:
    """items: (box, caption, qtype, question, answer); the QA prompt conditions the target."""
    pairs = [
        (build_qa_prompt(vocab, qt, box, width, height, cap), build_qa_target(vocab, q, a))
        for box, cap, qt, q, a in items
    ]
    return prepare_mlm(vocab, pairs, policy, rng, CAUSAL)


def prepare_vqa(vocab: Vocab, items: Sequence[tuple[str, str]], policy: MaskPolicy,
                rng: np.random.Generator) -> MlmBatch:
    """Box-free ``[BOS] question [QA_SEP] answer [EOS]`` with the answer span masked."""
    pairs = [(None, build_qa_target(vocab, q, a)) for q, a in items]
    return prepare_mlm(vocab, pairs, policy, rng, CAUSAL)


def prepare_caption(vocab: Vocab, captions: Sequence[str], policy: MaskPolicy, rng: np.random.Generator,
                    mode: str) -> MlmBatch:
    pairs = [(None, build_caption_target(vocab, c)) for c in captions]
    return prepare_mlm(vocab, pairs, policy, rng, mode)


# -- losses ------------------------------------------------------------------------


def mlm_loss(logits: Tensor, positions, target_ids) -> Tensor:
    """Mean cross-entropy over target positions; an empty target set gives 0.

    ``logits`` is (L, V) with ``positions`` a 1-D index array, or (B, L, V)
    with ``positions`` a (rows, cols) pair.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.size == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    if logits.ndim == 2:
        pos = np.asarray(positions, dtype=np.int64)
        if pos.min() < 0 or pos.max() >= logits.shape[0]:
            raise IndexError("target position outside the sequence")
        sel = logits[pos]
    else:
        rows, cols = (np.asarray(p, dtype=np.int64) for p in positions)
        if cols.min() < 0 or cols.max() >= logits.shape[1] or rows.max() >= logits.shape[0]:
            raise IndexError("target position outside the batch")
        sel = logits[rows, cols]
    return T.cross_entropy(sel, target_ids)


def batch_mlm_loss(model: VisionLanguageModel, batch: MlmBatch, vision: VisionFeatureMap | None) -> Tensor:
    """MLM loss computed only at target positions (the head is applied to those rows)."""
    if batch.num_targets == 0:
        return Tensor(np.zeros((), dtype=model.params["text.head.w"].dtype))
    hidden = model.text_hidden(batch.ids, vision, batch.mode)
    return T.cross_entropy(model.logits_at(hidden, batch.rows, batch.cols), batch.targets)


def loss_itc(image_emb: Tensor, text_emb: Tensor, logit_scale: Tensor | float) -> Tensor:
    """Symmetric InfoNCE over the in-batch similarity matrix."""
    n = image_emb.shape[0]
    if n < 2:
        raise DegenerateBatchError("contrastive loss needs a batch of at least 2")
    sims = image_emb @ text_emb.transpose(1, 0)
    if isinstance(logit_scale, Tensor):
        sims = sims * T.exp(logit_scale)
    else:
        sims = sims * float(logit_scale)
    labels = np.arange(n)
    return (T.cross_entropy(sims, labels) + T.cross_entropy(sims.transpose(1, 0), labels)) * 0.5


def itm_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive (i, i) pairs followed by one in-batch swap negative (i, i+1 mod n) each."""
    img = np.concatenate([np.arange(n), np.arange(n)])
    txt = np.concatenate([np.arange(n), (np.arange(n) + 1) % n])
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    return np.stack([img, txt], axis=1), labels


def loss_itm(model: VisionLanguageModel, vision: VisionFeatureMap, caption_ids: np.ndarray) -> Tensor:
    n = caption_ids.shape[0]
    if n < 2:
        raise DegenerateBatchError("in-batch negatives need a batch of at least 2")
    pairs, labels = itm_pairs(n)
    vt = vision.tokens[pairs[:, 0]]
    ids = caption_ids[pairs[:, 1]]
    logits = model.itm_logits(ids, VisionFeatureMap(vt, vision.grid))
    return T.cross_entropy(logits, labels)


# -- aggregation -------------------------------------------------------------------


@dataclass
class LossBreakdown:
    dc: float | None = None
    q: float | None = None
    a: float | None = None
    gen: float | None = None
    itc: float | None = None
    itm: float | None = None
    ic: float | None = None
    imlm: float | None = None
    vqa: float | None = None
    total: float = 0.0

    def active(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TASK_ORDER if getattr(self, k) is not None}

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (*TASK_ORDER, "gen")}
        d["total"] = self.total
        return {k: v for k, v in d.items() if v is not None}


def sum_losses(losses: dict[str, Tensor], enabled: Iterable[str] | None = None) -> Tensor:
    """Unweighted sum of the enabled task losses, added in ``TASK_ORDER``."""
    enabled = set(losses if enabled is None else enabled)
    return T.sum_tensors(losses[k] for k in TASK_ORDER if k in losses and k in enabled)


def breakdown(losses: dict[str, Tensor], total: Tensor) -> LossBreakdown:
    out = LossBreakdown(total=total.item())
    for k, v in losses.items():
        setattr(out, k, v.item())
    if all(k in losses for k in GENERATOR_TASKS):
        out.gen = ((losses["dc"] + losses["q"]) + losses["a"]).item()
    return out


def generator_losses(model: VisionLanguageModel, vocab: Vocab, images: np.ndarray,
                     items: Sequence[tuple[BoundingBox, str, str, str, str]], rng: np.random.Generator,
                     masks: MaskConfig = MaskConfig()) -> dict[str, Tensor]:
    """L_DC, L_Q and L_A on one batch sharing a single box-conditioned vision pass.

    ``items`` are (box, caption, qtype, question, answer).
    """
    h, w = model.cfg.image_height, model.cfg.image_width
    vision = model.encode_images(images, [it[0] for it in items])
    dc = prepare_dc(vocab, [(it[0], it[1]) for it in items], w, h, caption_policy(masks.caption_p), rng)
    qb = prepare_qa(vocab, items, w, h, question_policy(masks.question_p), rng)
    ab = prepare_qa(vocab, items, w, h, answer_policy(), rng)
    return {
        "dc": batch_mlm_loss(model, dc, vision),
        "q": batch_mlm_loss(model, qb, vision),
        "a": batch_mlm_loss(model, ab, vision),
    }


def generator_loss(losses: dict[str, Tensor]) -> Tensor:
    """L_Gen = L_DC + L_Q + L_A, summed in that order."""
    return (losses["dc"] + losses["q"]) + losses["a"]

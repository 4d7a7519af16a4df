"""End-to-end orchestration: world synthesis, training, generation, filtering, stats, pre-training."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import records as R
from . import tensor as T
from .answer_filter import BeamConfig, FilterStats, QaCandidate, filter_pairs, normalize_answer, train_filter_step
from .config import ExperimentConfig, GenerationJobConfig, PretrainConfig
from .generator import (
    GeneratorItem, SamplingConfig, TrainConfig, generate_qas, run_training, sample_dense_captions,
    stream, train_generator_step,
)
from .microworld import ImageRecord, MicroWorldSpec, answer_question, object_caption, synthesize_microworld
from .model import VisionLanguageModel, preprocess_pixels
from .objectives import (
    PASS1_TASKS, PASS2_TASKS, TASK_ORDER, LossBreakdown, MaskConfig, answer_policy,
    batch_mlm_loss, breakdown, caption_policy, loss_itc, loss_itm, pad_batch, prepare_caption, prepare_dc,
    prepare_vqa, sum_losses,
)
from .model import BIDIRECTIONAL, CAUSAL
from .optim import AdamW, OptimConfig
from .vocab import BoundingBox, Vocab, build_caption_target, build_vocab

log = logging.getLogger(__name__)

TRAIN_DIR, HELDOUT_DIR = "train", "heldout"


class PipelineError(RuntimeError):
    pass


class JobInterrupted(RuntimeError):
    """Raised by the interrupt hook to simulate a crash mid-job."""


# -- world ----------------------------------------------------------------------


def make_microworld(out_dir: str | Path, n_train: int, n_heldout: int, seed: int,
                    spec: MicroWorldSpec = MicroWorldSpec()) -> Vocab:
    """Write ``train/`` and ``heldout/`` worlds (disjoint image indices) and ``vocab.txt``."""
    out = Path(out_dir)
    train = synthesize_microworld(spec, n_train, seed, 0)
    R.write_world(out / TRAIN_DIR, *train)
    if n_heldout:
        R.write_world(out / HELDOUT_DIR, *synthesize_microworld(spec, n_heldout, seed, n_train))
    vocab = world_vocab(train[1], train[2], spec)
    vocab.save(out / "vocab.txt")
    return vocab


def world_vocab(captions, qas, spec: MicroWorldSpec = MicroWorldSpec()) -> Vocab:
    corpus = [c.caption for c in captions] + [f"{q.question} {q.answer}" for q in qas]
    return build_vocab(corpus, qtypes=spec.qtypes)


@dataclass
class World:
    images: list[ImageRecord]
    captions: list
    qas: list

    def pixels(self) -> np.ndarray:
        return np.stack([preprocess_pixels(r.pixels) for r in self.images])

    def index(self) -> dict[str, int]:
        return {r.image_id: i for i, r in enumerate(self.images)}


def load_world(world_dir: str | Path) -> World:
    d = Path(world_dir)
    images = R.load_images(d / "images.jsonl")
    caps = [R.oracle_dc_from_dict(x) for x in R.read_jsonl(d / "oracle_dc.jsonl")]
    qas = [R.oracle_qa_from_dict(x) for x in R.read_jsonl(d / "oracle_qa.jsonl")]
    return World(images, caps, qas)


# -- checkpoints carrying their vocab ---------------------------------------------


def vocab_to_dict(vocab: Vocab) -> dict:
    return {"words": list(vocab.words), "loc_bins": vocab.loc_bins, "qtypes": list(vocab.qtypes)}


def vocab_from_dict(d: dict) -> Vocab:
    return Vocab(d["words"], d["loc_bins"], d["qtypes"])


def save_model(path: str | Path, model: VisionLanguageModel, vocab: Vocab, extra: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    model.save(path, extra={"vocab": vocab_to_dict(vocab), **(extra or {})})


def load_model(path: str | Path) -> tuple[VisionLanguageModel, Vocab]:
    from .checkpoint import load_checkpoint

    if not Path(path).exists():
        raise PipelineError(f"weights not found: {path}")
    ckpt = load_checkpoint(path)
    if "vocab" not in ckpt.extra:
        raise PipelineError(f"{path} carries no vocabulary")
    return VisionLanguageModel.from_checkpoint(ckpt), vocab_from_dict(ckpt.extra["vocab"])


# -- training --------------------------------------------------------------------


def _optimizer(model: VisionLanguageModel, cfg: TrainConfig) -> AdamW:
    return AdamW(model.params, OptimConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps,
                                           total_steps=cfg.steps, grad_clip=cfg.grad_clip))


def generator_items(world: World) -> list[GeneratorItem]:
    idx = world.index()
    return [GeneratorItem(idx[q.image_id], q.box, q.caption, q.qtype, q.question, q.answer) for q in world.qas]


def train_generator(model: VisionLanguageModel, vocab: Vocab, world: World, cfg: TrainConfig,
                    masks: MaskConfig = MaskConfig(), log_fn=None) -> list[dict]:
    pixels, items = world.pixels(), generator_items(world)
    opt = _optimizer(model, cfg)

    def step(rng):
        batch = [items[i] for i in rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)]
        bd, rejected = train_generator_step(model, opt, vocab, pixels, batch, rng, masks)
        return {**bd.as_dict(), "rejected": len(rejected)}

    return run_training(step, cfg, log_fn)


def filter_items(world: World) -> list[tuple[int, str, str]]:
    idx = world.index()
    return [(idx[q.image_id], q.question, q.answer) for q in world.qas]


def train_filter(model: VisionLanguageModel, vocab: Vocab, world: World, cfg: TrainConfig, log_fn=None) -> list[dict]:
    pixels, items = world.pixels(), filter_items(world)
    opt = _optimizer(model, cfg)

    def step(rng):
        batch = [items[i] for i in rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)]
        loss, rejected = train_filter_step(model, opt, vocab, pixels, batch, rng)
        return {"vqa": loss, "rejected": len(rejected)}

    return run_training(step, cfg, log_fn)


# -- generation job --------------------------------------------------------------

PROGRESS = "progress.json"
GENERATION_FILES = ("image_index.jsonl", "captions.jsonl", "candidates.jsonl")


def _read_progress(out: Path) -> dict:
    p = out / PROGRESS
    if not p.exists():
        return {"images_done": 0, "offsets": {f: 0 for f in GENERATION_FILES}}
    return json.loads(p.read_text())


def _write_progress(out: Path, progress: dict) -> None:
    tmp = out / (PROGRESS + ".tmp")
    tmp.write_text(json.dumps(progress, sort_keys=True))
    os.replace(tmp, out / PROGRESS)


def _usable(rec: ImageRecord, model: VisionLanguageModel) -> str | None:
    cfg = model.cfg
    if rec.pixels.shape != (cfg.image_height, cfg.image_width, 3):
        return f"pixel shape {rec.pixels.shape} does not match the model"
    for b in rec.boxes:
        try:
            b.validate(rec.width, rec.height)
        except ValueError as exc:
            return str(exc)
    return None


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


def generate_chunk(model: VisionLanguageModel, vocab: Vocab, chunk: Sequence[ImageRecord], sampling: SamplingConfig,
                   job: GenerationJobConfig, qtypes: Sequence[str], max_boxes: int):
    """Caption and candidate records for a chunk of images, in deterministic order."""
    pix = {r.image_id: preprocess_pixels(r.pixels) for r in chunk}
    seed = sampling.seed
    caption_rows = []  # (record, box_index, box, caption_index)
    for r in chunk:
        for bi, box in enumerate(r.boxes[:max_boxes]):
            n = 1 if job.caption_source == "oracle" else sampling.n_dc
            caption_rows.extend((r, bi, box, ci) for ci in range(n))
    caption_recs = []
    for rows in _chunks(caption_rows, job.batch_rows):
        if job.caption_source == "oracle":
            outs = [(object_caption(r.scene[bi]), None) for r, bi, _, _ in rows]
        else:
            rngs = [stream(seed, "dc", r.image_id, bi, ci) for r, bi, _, ci in rows]
            outs = sample_dense_captions(model, vocab, np.stack([pix[r.image_id] for r, *_ in rows]),
                                         [b for _, _, b, _ in rows], sampling, rngs)
        for (r, bi, box, ci), (text, st) in zip(rows, outs):
            caption_recs.append({
                "image_id": r.image_id, "box_index": bi, "box": box.as_list(), "caption_index": ci,
                "caption": text, "token_ids": list(map(int, st.tokens)) if st else [],
                "truncated": bool(st.truncated) if st else False,
            })
    qa_rows = [(c, qi, qt, si) for c in caption_recs for qi, qt in enumerate(qtypes) for si in range(sampling.n_q)]
    candidate_recs = []
    for rows in _chunks(qa_rows, job.batch_rows):
        rngs = [stream(seed, "qa", c["image_id"], c["box_index"], c["caption_index"], qi, si) for c, qi, _, si in rows]
        gens = generate_qas(model, vocab, np.stack([pix[c["image_id"]] for c, *_ in rows]),
                            [BoundingBox.from_list(c["box"]) for c, *_ in rows], [c["caption"] for c, *_ in rows],
                            [qt for _, _, qt, _ in rows], sampling, rngs)
        for (c, _, qt, si), g in zip(rows, gens):
            candidate_recs.append({
                "image_id": c["image_id"], "box_index": c["box_index"], "box": c["box"],
                "caption_index": c["caption_index"], "caption": c["caption"], "qtype": qt, "sample_index": si,
                "question": g.question, "generator_answer": g.answer, "token_ids": list(map(int, g.token_ids)),
                "parse_status": g.status, "truncated": g.truncated,
            })
    return caption_recs, candidate_recs


def run_generation_job(images: Sequence[ImageRecord], model: VisionLanguageModel, vocab: Vocab, out_dir: str | Path,
                       sampling: SamplingConfig, job: GenerationJobConfig = GenerationJobConfig(),
                       qtypes: Sequence[str] | None = None, max_boxes: int = 3,
                       interrupt: Callable[[int], bool] | None = None) -> dict:
    """Write ``image_index``/``captions``/``candidates`` JSONL, resuming from ``progress.json``.

    Progress is committed after each chunk of images; on restart the record
    files are cut back to the committed byte offsets, so a crash mid-chunk
    leaves no duplicates.  ``interrupt(chunk_number)`` returning True raises
    :class:`JobInterrupted` after the chunk's records are written but before
    they are committed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    qtypes = tuple(qtypes or vocab.qtypes)
    progress = _read_progress(out)
    for name in GENERATION_FILES:
        path = out / name
        path.touch()
        with open(path, "r+b") as fh:
            fh.truncate(progress["offsets"][name])
    done = progress["images_done"]
    skipped = progress.get("skipped", 0)
    handles = {name: open(out / name, "a", encoding="utf-8") for name in GENERATION_FILES}
    try:
        for n_chunk, chunk in enumerate(_chunks(list(images[done:]), job.chunk_images)):
            index_recs, good = [], []
            for r in chunk:
                reason = _usable(r, model)
                if reason:
                    log.warning("skipping %s: %s", r.image_id, reason)
                    skipped += 1
                else:
                    good.append(r)
                index_recs.append({"image_id": r.image_id, "boxes": len(r.boxes), "skipped": reason})
            caps, cands = generate_chunk(model, vocab, good, sampling, job, qtypes, max_boxes)
            for name, recs in zip(GENERATION_FILES, (index_recs, caps, cands)):
                R.append_jsonl(handles[name], recs)
                handles[name].flush()
                os.fsync(handles[name].fileno())
            if interrupt is not None and interrupt(n_chunk):
                raise JobInterrupted(f"interrupted after chunk {n_chunk}")
            done += len(chunk)
            progress = {"images_done": done, "skipped": skipped,
                        "offsets": {name: handles[name].tell() for name in GENERATION_FILES}}
            _write_progress(out, progress)
    finally:
        for fh in handles.values():
            fh.close()
    return {"images_done": done, "skipped": skipped,
            "captions": R.count_lines(out / "captions.jsonl"), "candidates": R.count_lines(out / "candidates.jsonl")}


# -- filter job ------------------------------------------------------------------


def run_filter_job(out_dir: str | Path, images: dict[str, np.ndarray], model: VisionLanguageModel, vocab: Vocab,
                   cfg: BeamConfig, batch_size: int = 64) -> FilterStats:
    """Filter parsed candidates; writes filtered/qa/dc JSONL and ``filter_stats.json``.

    ``images`` maps image id to preprocessed pixels.  Dense captions are
    copied through unfiltered.
    """
    out = Path(out_dir)
    recs = list(R.read_jsonl(out / "candidates.jsonl"))
    parsed = [r for r in recs if r["parse_status"] == "ok"]
    failures = Counter(r["parse_status"] for r in recs if r["parse_status"] != "ok")
    cands = [QaCandidate.from_dict(r) for r in parsed]
    _, stats = filter_pairs(cands, model, vocab, images, cfg, batch_size)
    filtered = [{**r, "filter_answer": c.filter_answer, "kept": c.kept} for r, c in zip(parsed, cands)]
    R.write_jsonl(out / "filtered.jsonl", filtered)
    R.write_jsonl(out / "qa.jsonl", (
        {k: r[k] for k in ("image_id", "box_index", "box", "caption_index", "caption", "qtype", "sample_index",
                           "question")} | {"answer": r["generator_answer"]}
        for r in filtered if r["kept"]))
    R.write_jsonl(out / "dc.jsonl", (
        {k: r[k] for k in ("image_id", "box_index", "box", "caption_index", "caption")}
        for r in R.read_jsonl(out / "captions.jsonl")))
    report = {**stats.to_dict(), "candidates": len(recs), "parse_failures": dict(sorted(failures.items())),
              "beam": {"beam_size": cfg.beam_size, "context": cfg.context, "strict": cfg.strict}}
    (out / "filter_stats.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return stats


# -- statistics ------------------------------------------------------------------


def compute_stats(out_dir: str | Path, config_hash: str | None = None, write: bool = True) -> dict:
    """Manifest of a generated dataset directory; malformed records are counted, not fatal."""
    out = Path(out_dir)
    errors: list = []

    def records(name):
        path = out / name
        return list(R.read_jsonl(path, errors)) if path.exists() else []

    index = records("image_index.jsonl")
    qa, dc = records("qa.jsonl"), records("dc.jsonl")
    candidates, filtered = records("candidates.jsonl"), records("filtered.jsonl")
    image_ids = [r["image_id"] for r in index if not r.get("skipped")]
    per_image = {i: {"qa": 0, "dc": 0} for i in image_ids}
    for kind, recs in (("qa", qa), ("dc", dc)):
        for r in recs:
            per_image.setdefault(r["image_id"], {"qa": 0, "dc": 0})[kind] += 1
    n_images = len(per_image)
    qtypes = Counter(r["qtype"] for r in qa)
    total_qa = sum(qtypes.values())
    kept = sum(1 for r in filtered if r.get("kept"))
    manifest = {
        "schema": R.SCHEMA_VERSION,
        "config_hash": config_hash,
        "images": n_images,
        "skipped_images": sum(1 for r in index if r.get("skipped")),
        "qa_pairs": len(qa),
        "dense_captions": len(dc),
        "candidates": len(candidates),
        "parse_failures": sum(1 for r in candidates if r.get("parse_status") != "ok"),
        "filtered": len(filtered),
        "retention": kept / len(filtered) if filtered else None,
        "qtype_counts": dict(sorted(qtypes.items())),
        "qtype_distribution": {k: v / total_qa for k, v in sorted(qtypes.items())},
        "per_image_average": {
            "qa": len(qa) / n_images if n_images else None,
            "dc": len(dc) / n_images if n_images else None,
        },
        "per_image": dict(sorted(per_image.items())),
        "malformed_records": len(errors),
    }
    if write:
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        (out / "stats.txt").write_text(format_histogram(manifest))
    return manifest


def format_histogram(manifest: dict, width: int = 40) -> str:
    lines = [
        f"images {manifest['images']}  qa {manifest['qa_pairs']}  dc {manifest['dense_captions']}",
        f"per image: qa {_fmt(manifest['per_image_average']['qa'])}  dc {_fmt(manifest['per_image_average']['dc'])}",
        "question types:",
    ]
    for qt, frac in manifest["qtype_distribution"].items():
        lines.append(f"  {qt:<10}{manifest['qtype_counts'][qt]:>8}  {100 * frac:5.1f}%  {'#' * round(frac * width)}")
    return "\n".join(lines) + "\n"


def _fmt(x):
    return "n/a" if x is None else f"{x:.2f}"


# -- oracle evaluation -----------------------------------------------------------


def eval_oracle(out_dir: str | Path, images: Sequence[ImageRecord]) -> dict:
    """Answer accuracy of all parsed candidates vs the kept ones, against scene ground truth."""
    scenes = {r.image_id: r.scene for r in images}
    recs = list(R.read_jsonl(Path(out_dir) / "filtered.jsonl"))

    def correct(r):
        truth = answer_question(scenes[r["image_id"]], r["question"])
        return truth is not None and normalize_answer(r["generator_answer"]) == truth

    flags = [correct(r) for r in recs]
    kept = [f for f, r in zip(flags, recs) if r["kept"]]
    answerable = [answer_question(scenes[r["image_id"]], r["question"]) is not None for r in recs]
    result = {
        "candidates": len(recs),
        "kept": len(kept),
        "retention": len(kept) / len(recs) if recs else None,
        "accuracy_all": float(np.mean(flags)) if flags else None,
        "accuracy_kept": float(np.mean(kept)) if kept else None,
        "answerable_fraction": float(np.mean(answerable)) if answerable else None,
    }
    if recs and kept:
        result["accuracy_gain"] = result["accuracy_kept"] - result["accuracy_all"]
    return result


# -- pre-training harness ---------------------------------------------------------


@dataclass
class PretrainItem:
    """One image's annotations; ``None`` fields skip the tasks that need them."""

    image_index: int
    caption: str | None = None
    question: str | None = None
    answer: str | None = None
    box: BoundingBox | None = None
    region_caption: str | None = None


def task_rng(seed: int, step: int, task: str) -> np.random.Generator:
    """Mask stream for one (step, task), identical in shared and two-pass modes."""
    return np.random.default_rng([seed, step, TASK_ORDER.index(task)])


def pretrain_losses(model: VisionLanguageModel, vocab: Vocab, pixels: np.ndarray, items: Sequence[PretrainItem],
                    tasks: Sequence[str], seed: int, step: int, masks: MaskConfig = MaskConfig()) -> dict[str, T.Tensor]:
    """Task losses on one batch with a single vision stem pass; tasks lacking data are left out."""
    tasks = [t for t in TASK_ORDER if t in tasks]
    if not items or not tasks:
        return {}
    h, w = model.cfg.image_height, model.cfg.image_width
    images = pixels[[it.image_index for it in items]]
    stem = model.vision_stem(images)
    plain = None
    if any(t in tasks for t in ("itc", "itm", "ic", "imlm", "vqa")):
        plain = model.vision_tail(model.inject_target(stem, [None] * len(items)))
    losses: dict[str, T.Tensor] = {}
    cap_rows = [i for i, it in enumerate(items) if it.caption]
    captions = [items[i].caption for i in cap_rows]
    if cap_rows:
        cap_vision = plain if len(cap_rows) == len(items) else _rows(plain, cap_rows)
    if "itc" in tasks and len(cap_rows) >= 2:
        ids = pad_batch([build_caption_target(vocab, c).ids for c in captions], vocab.pad)
        losses["itc"] = loss_itc(model.image_global_embedding(cap_vision), model.text_global_embedding(ids, vocab.pad),
                                 model.params["itc.logit_scale"])
    if "itm" in tasks and len(cap_rows) >= 2:
        ids = pad_batch([build_caption_target(vocab, c).ids for c in captions], vocab.pad)
        losses["itm"] = loss_itm(model, cap_vision, ids)
    for task, mode in (("ic", CAUSAL), ("imlm", BIDIRECTIONAL)):
        if task in tasks and cap_rows:
            batch = prepare_caption(vocab, captions, caption_policy(masks.caption_p), task_rng(seed, step, task), mode)
            losses[task] = batch_mlm_loss(model, batch, cap_vision)
    qa_rows = [i for i, it in enumerate(items) if it.question and it.answer]
    if "vqa" in tasks and qa_rows:
        batch = prepare_vqa(vocab, [(items[i].question, items[i].answer) for i in qa_rows], answer_policy(),
                            task_rng(seed, step, "vqa"))
        losses["vqa"] = batch_mlm_loss(model, batch, _rows(plain, qa_rows))
    dc_rows = [i for i, it in enumerate(items) if it.box is not None and it.region_caption]
    if "dc" in tasks and dc_rows:
        boxed = model.vision_tail(model.inject_target(stem[dc_rows], [items[i].box for i in dc_rows]))
        batch = prepare_dc(vocab, [(items[i].box, items[i].region_caption) for i in dc_rows], w, h,
                           caption_policy(masks.caption_p), task_rng(seed, step, "dc"))
        losses["dc"] = batch_mlm_loss(model, batch, boxed)
    return losses


def _rows(vision, rows):
    from .model import VisionFeatureMap

    if len(rows) == vision.tokens.shape[0]:
        return vision
    return VisionFeatureMap(vision.tokens[np.asarray(rows)], vision.grid)


def pretrain_step_shared(model: VisionLanguageModel, opt: AdamW | None, vocab: Vocab, pixels: np.ndarray,
                         items: Sequence[PretrainItem], tasks: Sequence[str], seed: int, step: int,
                         masks: MaskConfig = MaskConfig()) -> LossBreakdown:
    """All enabled tasks on one batch, summed, one optimizer step (skipped when ``opt`` is None)."""
    losses = pretrain_losses(model, vocab, pixels, items, tasks, seed, step, masks)
    if not losses:
        return LossBreakdown()
    total = sum_losses(losses)
    model.params.zero_grad()
    total.backward()
    if opt is not None:
        opt.step()
    return breakdown(losses, total)


def pretrain_step_two_pass(model: VisionLanguageModel, opt: AdamW | None, vocab: Vocab, pixels: np.ndarray,
                           pass1: Sequence[PretrainItem], pass2: Sequence[PretrainItem], tasks: Sequence[str],
                           seed: int, step: int, masks: MaskConfig = MaskConfig()) -> LossBreakdown:
    """Pass 1 (caption tasks) and pass 2 (VQA/DC) backpropagated in turn, one step on the summed loss."""
    model.params.zero_grad()
    losses: dict[str, T.Tensor] = {}
    total = 0.0
    for batch, pass_tasks in ((pass1, PASS1_TASKS), (pass2, PASS2_TASKS)):
        enabled = [t for t in pass_tasks if t in tasks]
        part = pretrain_losses(model, vocab, pixels, batch, enabled, seed, step, masks)
        if not part:
            continue
        loss = sum_losses(part)
        loss.backward()
        total += loss.item()
        losses.update(part)
    if not losses:
        return LossBreakdown()
    if opt is not None:
        opt.step()
    out = breakdown(losses, T.Tensor(np.float32(0)))
    out.total = total
    return out


@dataclass
class PretrainData:
    pixels: np.ndarray
    captions: list[str]                # one image-level caption per image
    pool: list[PretrainItem]           # QA/DC triplets

    @classmethod
    def from_world(cls, world: World) -> "PretrainData":
        from .microworld import image_caption

        idx = world.index()
        pool = [PretrainItem(idx[q.image_id], None, q.question, q.answer, q.box, q.caption) for q in world.qas]
        return cls(world.pixels(), [image_caption(r.scene) for r in world.images], pool)


def run_pretraining(model: VisionLanguageModel, vocab: Vocab, data: PretrainData, cfg: PretrainConfig, seed: int,
                    masks: MaskConfig = MaskConfig(), log_fn=None) -> list[dict]:
    """Shared or two-pass pre-training; returns one loss record per step."""
    opt = AdamW(model.params, OptimConfig(lr=cfg.lr, warmup_steps=cfg.warmup_steps, total_steps=cfg.steps))
    rng = np.random.default_rng([seed, 7])
    n_img, history = len(data.captions), []
    for step in range(1, cfg.steps + 1):
        if cfg.mode == "shared":
            picks = rng.choice(len(data.pool), size=cfg.batch_size, replace=False)
            items = [data.pool[i] for i in picks]
            items = [PretrainItem(it.image_index, data.captions[it.image_index], it.question, it.answer, it.box,
                                  it.region_caption) for it in items]
            bd = pretrain_step_shared(model, opt, vocab, data.pixels, items, cfg.tasks, seed, step, masks)
        elif cfg.mode == "two_pass":
            imgs = rng.choice(n_img, size=min(cfg.batch_size, n_img), replace=False)
            pass1 = [PretrainItem(int(i), data.captions[i]) for i in imgs]
            pass2 = [data.pool[i] for i in rng.choice(len(data.pool), size=cfg.batch_size, replace=False)]
            bd = pretrain_step_two_pass(model, opt, vocab, data.pixels, pass1, pass2, cfg.tasks, seed, step, masks)
        else:
            raise PipelineError(f"unknown pre-training mode {cfg.mode!r}")
        record = {"step": step, **bd.as_dict()}
        history.append(record)
        if log_fn is not None and (step % cfg.log_every == 0 or step == 1):
            log_fn(step, record)
    return history


def loss_log_lines(history: Sequence[dict]) -> list[str]:
    """``step task value`` lines, tasks in canonical order."""
    lines = []
    for rec in history:
        for task in (*TASK_ORDER, "total"):
            if rec.get(task) is not None:
                lines.append(f"{rec['step']} {task} {rec[task]:.6f}")
    return lines


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError("not enough values for the window")
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


# -- end-to-end --------------------------------------------------------------------


def images_by_id(images: Sequence[ImageRecord]) -> dict[str, np.ndarray]:
    return {r.image_id: preprocess_pixels(r.pixels) for r in images}


def run_end_to_end(cfg: ExperimentConfig, work_dir: str | Path, interrupt=None) -> dict:
    """World, generator, filter, generation, filtering and stats under one directory."""
    work = Path(work_dir)
    vocab = make_microworld(work / "world", cfg.world.n_images, cfg.world.n_generate, cfg.seed)
    train = load_world(work / "world" / TRAIN_DIR)
    model_cfg = cfg.model
    model_cfg.vocab_size = len(vocab)
    gen = VisionLanguageModel(model_cfg, seed=cfg.seed)
    flt = gen.clone()
    train_generator(gen, vocab, train, cfg.generator_train, cfg.masks)
    train_filter(flt, vocab, train, cfg.filter_train)
    held = load_world(work / "world" / HELDOUT_DIR)
    data = work / "data"
    run_generation_job(held.images, gen, vocab, data, cfg.sampling, cfg.generation, max_boxes=cfg.world.max_boxes,
                       interrupt=interrupt)
    run_filter_job(data, images_by_id(held.images), flt, vocab, cfg.beam)
    return compute_stats(data, cfg.digest())

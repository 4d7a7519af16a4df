"""The nine acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import importlib.util
import json
import math
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from qadc import pipeline as P
from qadc import records as R
from qadc.answer_filter import (
    GENERATOR_CONTEXT, BeamConfig, QaCandidate, filter_pairs, normalize_answer,
)
from qadc.config import PretrainConfig
from qadc.generator import SamplingConfig, generate_qas, greedy_answers, sample_dense_captions, stream
from qadc.microworld import MicroWorldSpec, synthesize_microworld
from qadc.model import ModelConfig, VisionLanguageModel
from qadc.objectives import (
    PASS1_TASKS, PASS2_TASKS, PRETRAIN_TASKS, answer_policy, breakdown, caption_policy, generator_loss,
    generator_losses, prepare_caption, prepare_dc, prepare_qa, prepare_vqa, sum_losses,
)
from qadc.tensor import backward
from qadc.vocab import ANSWER_SPAN, BoundingBox

from conftest import small_config, tiny_config
from oracles import box_positions, generator_loss_gradient_error, recount_dataset, relative_error
from test_generator import _reference_greedy
from test_tensor import OPS, op_gradient_error, op_leaves

ROOT = Path(__file__).resolve().parents[1]
pytestmark = pytest.mark.acceptance


def _items(world, n, start=0):
    idx = world.index()
    qs = [world.qas[(start + k) % len(world.qas)] for k in range(n)]
    return [idx[q.image_id] for q in qs], [(q.box, q.caption, q.qtype, q.question, q.answer) for q in qs]


# 1 -----------------------------------------------------------------------------


def test_criterion_1_gradients(criterion, vocab, world, pixels):
    start = time.monotonic()
    worst_op = 0.0
    for name, (fn, _, _) in OPS.items():
        for seed in range(20):
            worst_op = max(worst_op, op_gradient_error(fn, op_leaves(name, seed), seed))
    cfg = tiny_config(len(vocab), image_height=64, image_width=64, patch_size=16, vision_layers=1, max_len=48)
    worst_gen = 0.0
    for seed in range(20):
        model = VisionLanguageModel(cfg, seed=seed)
        model.params.astype(np.float64)
        rows, items = _items(world, 2, start=seed)
        worst_gen = max(worst_gen, generator_loss_gradient_error(model, vocab, pixels[rows].astype(np.float64),
                                                                 items, seed))
    seconds = time.monotonic() - start
    ok = worst_op < 1e-4 and worst_gen < 1e-4 and seconds < 60
    criterion(1, "gradcheck, ops and full generator loss, 20 seeds", ok,
              f"ops max rel err {worst_op:.2e}, L_Gen max rel err {worst_gen:.2e}, {seconds:.1f}s")
    assert ok


# 2 -----------------------------------------------------------------------------


def test_criterion_2_target_embedding(criterion):
    model = VisionLanguageModel(tiny_config(30, image_height=32, image_width=32), seed=1)
    e_t = model.params["target.e_t"].data
    rng = np.random.default_rng(0)
    counts_ok = True
    for k in range(1000):
        x1, x2 = sorted(rng.integers(0, 32, size=2))
        y1, y2 = sorted(rng.integers(0, 32, size=2))
        box = BoundingBox(int(x1), int(y1), int(x2), int(y2))
        E = model.target_embedding_map([box]).data[0]
        hit = np.all(E == e_t[:, None, None], axis=0)
        counts_ok &= int(hit.sum()) == (x2 - x1 + 1) * (y2 - y1 + 1)
        if k < 100:
            counts_ok &= {(int(j), int(i)) for j, i in zip(*np.nonzero(hit))} == box_positions(box, 32, 32)
    full = model.target_embedding_map([BoundingBox(0, 0, 31, 31)]).data[0]
    uniform = bool(np.all(full == full[:, :1, :1]))
    model.params["target.e_tbar"].data = e_t.copy()
    img = rng.uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32)
    ref = model.encode_images(img, [None]).tokens.data
    invariant = all(np.array_equal(model.encode_images(img, [BoundingBox(a, b, a + 5, b + 9)]).tokens.data, ref)
                    for a, b in ((0, 0), (3, 7), (20, 20), (26, 22)))
    ok = counts_ok and uniform and invariant
    criterion(2, "target-embedding structure", ok,
              f"1000 box areas {'ok' if counts_ok else 'mismatch'}, full box uniform {uniform}, "
              f"e_t=e_tbar invariant {invariant}")
    assert ok


# 3 -----------------------------------------------------------------------------


def test_criterion_3_loss_contracts(criterion, vocab, world, pixels):
    model = VisionLanguageModel(small_config(len(vocab)), seed=0)
    exact = True
    for b in range(10):
        rows, items = _items(world, 8, start=8 * b)
        losses = generator_losses(model, vocab, pixels[rows], items, np.random.default_rng(b))
        bd = breakdown(losses, generator_loss(losses))
        dc, q, a = (np.float32(losses[k].item()) for k in ("dc", "q", "a"))
        exact &= bd.gen == float((dc + q) + a)

    rng = np.random.default_rng(0)
    caps = [c.caption for c in world.captions]
    policy = caption_policy(0.6)
    ratios = {}
    for task in ("ic", "imlm", "dc"):
        hits = total = 0
        for b in range(10_000):
            pick = [(b * 4 + k) % len(caps) for k in range(4)]
            if task == "dc":
                batch = prepare_dc(vocab, [(world.captions[i].box, caps[i]) for i in pick], 64, 64, policy, rng)
            else:
                batch = prepare_caption(vocab, [caps[i] for i in pick], policy, rng,
                                        "causal" if task == "ic" else "bidirectional")
            hits += batch.num_targets
            total += sum(len(r) - r.count("prompt") - 1 for r in batch.roles)
        ratios[task] = hits / total
    qa = [(q.question, q.answer) for q in world.qas]
    _, qa_items = _items(world, len(world.qas))
    full = {"vqa": [0, 0], "a": [0, 0]}
    for b in range(10_000):
        pick = [(b * 4 + k) % len(qa) for k in range(4)]
        for task, batch in (("vqa", prepare_vqa(vocab, [qa[i] for i in pick], answer_policy(), rng)),
                            ("a", prepare_qa(vocab, [qa_items[i] for i in pick], 64, 64, answer_policy(), rng))):
            full[task][0] += batch.num_targets
            full[task][1] += sum(sum(r in ANSWER_SPAN for r in roles) for roles in batch.roles)
    full_ratio = {k: h / t for k, (h, t) in full.items()}

    flat = VisionLanguageModel(small_config(len(vocab)), seed=0)
    flat.params["text.head.w"].data[:] = 0
    flat.params["text.head.b"].data[:] = 0
    rows, items = _items(world, 8)
    uniform = generator_losses(flat, vocab, pixels[rows], items, np.random.default_rng(0))
    uniform_err = max(abs(v.item() - math.log(len(vocab))) for v in uniform.values())

    ok = (exact and all(abs(r - 0.6) <= 0.01 for r in ratios.values())
          and all(r == 1.0 for r in full_ratio.values()) and uniform_err < 1e-6)
    criterion(3, "loss contracts", ok,
              f"L_Gen bit-exact {exact}, mask ratios {', '.join(f'{k}={v:.4f}' for k, v in ratios.items())}, "
              f"{', '.join(f'{k}={v}' for k, v in full_ratio.items())}, |L - ln V| {uniform_err:.1e}")
    assert ok


# 4 -----------------------------------------------------------------------------


def _rows(world, n):
    idx = world.index()
    qs = [world.qas[(i * 7) % len(world.qas)] for i in range(n)]
    return [idx[q.image_id] for q in qs], [q.box for q in qs], [q.caption for q in qs], [q.qtype for q in qs]


def test_criterion_4_decoding_contracts(criterion, trained, vocab, world, pixels):
    gen = trained[0]
    rows, boxes, caps, qts = _rows(world, 16)
    k1 = generate_qas(gen, vocab, pixels[rows], boxes, caps, qts, SamplingConfig(top_k=1),
                      [stream(0, "k1", i) for i in range(16)])
    greedy_ok = all(g.token_ids == _reference_greedy(gen, vocab, pixels[r], b, c, q)
                    for g, r, b, c, q in zip(k1, rows, boxes, caps, qts))

    rows, boxes, caps, qts = _rows(world, 64)
    cfg = SamplingConfig(top_k=10)
    out = generate_qas(gen, vocab, pixels[rows], boxes, caps, qts, cfg, [stream(1, "re", i) for i in range(64)])
    ok_rows = [i for i, g in enumerate(out) if g.status == "ok"]
    again = greedy_answers(gen, vocab, pixels[[rows[i] for i in ok_rows]], [boxes[i] for i in ok_rows],
                           [caps[i] for i in ok_rows], [qts[i] for i in ok_rows],
                           [out[i].question for i in ok_rows], cfg)
    redecode = sum(a == out[i].answer for a, i in zip(again, ok_rows)) / max(len(ok_rows), 1)

    batch_ok = True
    cfg = SamplingConfig(top_k=5)
    for size in (1, 2, 7, 32):
        rows, boxes, caps, qts = _rows(world, size)
        together = generate_qas(gen, vocab, pixels[rows], boxes, caps, qts, cfg,
                                [stream(size, "b", i) for i in range(size)])
        dcs = sample_dense_captions(gen, vocab, pixels[rows], boxes, cfg, [stream(size, "d", i) for i in range(size)])
        for i in range(size):
            alone = generate_qas(gen, vocab, pixels[[rows[i]]], [boxes[i]], [caps[i]], [qts[i]], cfg,
                                 [stream(size, "b", i)])[0]
            dc = sample_dense_captions(gen, vocab, pixels[[rows[i]]], [boxes[i]], cfg, [stream(size, "d", i)])[0]
            batch_ok &= alone.token_ids == together[i].token_ids and dc[1].tokens == dcs[i][1].tokens

    ok = greedy_ok and redecode == 1.0 and len(ok_rows) > 0 and batch_ok
    criterion(4, "decoding contracts", ok,
              f"K=1 == greedy {greedy_ok}, re-decode match {redecode:.3f} over {len(ok_rows)} candidates, "
              f"batch {{1,2,7,32}} == per-sample {batch_ok}")
    assert ok


# 5 -----------------------------------------------------------------------------


def test_criterion_5_filter_contracts(criterion, trained, vocab, world, pixels):
    gen, flt = trained[0], trained[1]
    idx = world.index()
    images = {r.image_id: pixels[i] for i, r in enumerate(world.images)}
    qs = world.qas[::3][:60]
    rows = [idx[q.image_id] for q in qs]
    cfg = SamplingConfig(top_k=10)
    out = generate_qas(gen, vocab, pixels[rows], [q.box for q in qs], [q.caption for q in qs],
                       [q.qtype for q in qs], cfg, [stream(7, "same", k) for k in range(len(qs))])
    cands = [QaCandidate(q.image_id, q.box, q.qtype, g.question, g.answer, q.caption, sample_index=k)
             for k, (q, g) in enumerate(zip(qs, out)) if g.status == "ok"]
    same = BeamConfig(beam_size=1, max_answer_len=cfg.max_decode_len, context=GENERATOR_CONTEXT)
    _, stats = filter_pairs(cands, gen, vocab, images, same)

    rng = np.random.default_rng(0)
    alphabet = list("abcXYZ \t\n")
    texts = ["".join(rng.choice(alphabet, size=rng.integers(0, 12))) for _ in range(2000)]
    idempotent = all(normalize_answer(normalize_answer(t)) == normalize_answer(t) for t in texts)

    def kept_set(batch_size):
        answers = [q.answer if k % 2 else "blue" for k, q in enumerate(world.qas[:40])]
        cs = [QaCandidate(q.image_id, q.box, q.qtype, q.question, a, q.caption, sample_index=k)
              for k, (q, a) in enumerate(zip(world.qas[:40], answers))]
        kept, _ = filter_pairs(cs, flt, vocab, images, BeamConfig(), batch_size=batch_size)
        pos = [next(i for i, c in enumerate(cs) if c is k) for k in kept]
        return [c.to_dict() for c in kept], pos

    first, pos = kept_set(64)
    second, _ = kept_set(9)
    subsequence = all(a < b for a, b in zip(pos, pos[1:]))
    ok = stats.retention == 1.0 and idempotent and first == second and subsequence
    criterion(5, "filter contracts", ok,
              f"same-weights retention {stats.retention} over {stats.total}, normalize idempotent {idempotent}, "
              f"deterministic {first == second}, subsequence {subsequence}")
    assert ok


# 6 -----------------------------------------------------------------------------


def _load_script(name):
    spec = importlib.util.spec_from_file_location(name, ROOT / "scripts" / f"{name}.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.mark.slow
def test_criterion_6_filtering_direction(criterion, tmp_path):
    script = _load_script("filtering_direction")
    start = time.monotonic()
    result = script.run(tmp_path / "direction", [], verbose=False, config=str(ROOT / "configs" / "direction.yaml"))
    total = time.monotonic() - start
    secs = result["seconds"]
    gain = (result["accuracy_kept"] or 0) - (result["accuracy_all"] or 0)
    retention = result["retention"] or 0
    ok = (result["candidates"] >= 5000 and gain >= 0.02 and 0.05 < retention < 0.95
          and secs["train_generator"] <= 900 and secs["train_filter"] <= 900 and total <= 2700)
    criterion(6, "desk-scale filtering direction", ok,
              f"{result['candidates']} candidates, accuracy all {result['accuracy_all']:.4f} "
              f"kept {result['accuracy_kept']:.4f} (gain {100 * gain:+.2f} pts), retention {retention:.3f}, "
              f"train gen {secs['train_generator']:.0f}s filter {secs['train_filter']:.0f}s, total {total:.0f}s")
    (ROOT / "runs").mkdir(exist_ok=True)
    (ROOT / "runs" / "acceptance_direction.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    assert ok


# 7 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_two_pass_pretraining(criterion):
    images, caps, qas = synthesize_microworld(MicroWorldSpec(), 300, seed=12)
    world = P.World(images, caps, qas)
    vocab = P.world_vocab(caps, qas)
    data = P.PretrainData.from_world(world)

    probe = VisionLanguageModel(small_config(len(vocab)), seed=0)
    probe.params.astype(np.float64)
    px = data.pixels.astype(np.float64)
    pass1 = [P.PretrainItem(i, data.captions[i]) for i in range(6)]
    pass2 = data.pool[::50][:6]
    P.pretrain_step_two_pass(probe, None, vocab, px, pass1, pass2, PRETRAIN_TASKS, seed=0, step=1)
    acc = {n: p.grad.copy() for n, p in probe.params.items()}
    g1 = backward(sum_losses(P.pretrain_losses(probe, vocab, px, pass1, PASS1_TASKS, 0, 1)), probe.params)
    g2 = backward(sum_losses(P.pretrain_losses(probe, vocab, px, pass2, PASS2_TASKS, 0, 1)), probe.params)
    accum_err = max(relative_error(acc[n], g1[n] + g2[n]) for n in acc if np.any(acc[n]))

    model = VisionLanguageModel(ModelConfig(vocab_size=len(vocab)), seed=0)
    start = time.monotonic()
    hist = P.run_pretraining(model, vocab, data, PretrainConfig(mode="two_pass", steps=500), seed=0)
    seconds = time.monotonic() - start
    ends = {}
    for task in PRETRAIN_TASKS:
        ma = P.moving_average([h[task] for h in hist], 50)
        ends[task] = (ma[0], ma[-1])
    decreased = all(last < first for first, last in ends.values())
    ok = accum_err <= 1e-6 and decreased and seconds <= 600
    criterion(7, "two-pass pre-training", ok,
              f"accumulation rel err {accum_err:.1e}, 50-step MA first->last "
              f"{', '.join(f'{t} {a:.3f}->{b:.3f}' for t, (a, b) in ends.items())}, {seconds:.0f}s")
    assert ok


# 8 -----------------------------------------------------------------------------


def _cli(args, **kw):
    return subprocess.Popen([sys.executable, "-m", "qadc", *args], stdout=subprocess.DEVNULL,
                            stderr=subprocess.PIPE, **kw)


def test_criterion_8_determinism_and_resume(criterion, tmp_path):
    settings = ["--seed", "5", "--set", "world.n_images=40", "--set", "world.n_generate=8",
                "--set", "model.hidden=32", "--set", "model.patch_size=16", "--set", "model.max_len=48",
                "--set", "generator_train.steps=60", "--set", "filter_train.steps=60",
                "--set", "sampling.n_q=2", "--set", "generation.chunk_images=1"]

    def pipeline(out, kill_generation=False):
        base = [*settings, "--set", f"out_dir={out}"]
        for cmd in ("make-microworld", "train-generator", "train-filter"):
            assert _cli([cmd, *base]).wait(timeout=900) == 0, cmd
        killed_at = None
        if kill_generation:
            proc = _cli(["generate", *base])
            progress = out / "data" / P.PROGRESS
            deadline = time.monotonic() + 600
            while time.monotonic() < deadline and proc.poll() is None:
                if progress.exists() and json.loads(progress.read_text())["images_done"] >= 3:
                    break
                time.sleep(0.01)
            os.kill(proc.pid, signal.SIGKILL)
            proc.wait(timeout=60)
            killed_at = json.loads(progress.read_text())["images_done"]
        for cmd in ("generate", "filter", "stats"):
            assert _cli([cmd, *base]).wait(timeout=900) == 0, cmd
        return killed_at

    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    killed_at = pipeline(tmp_path / "c", kill_generation=True)
    names = ("qa.jsonl", "dc.jsonl", "filtered.jsonl", "manifest.json")
    same = all((tmp_path / "a/data" / n).read_bytes() == (tmp_path / "b/data" / n).read_bytes() for n in names)
    resumed = (tmp_path / "a/data/manifest.json").read_bytes() == (tmp_path / "c/data/manifest.json").read_bytes()
    resumed_files = all((tmp_path / "a/data" / n).read_bytes() == (tmp_path / "c/data" / n).read_bytes()
                        for n in names)
    killed_mid = killed_at is not None and 0 < killed_at < 8
    ok = same and resumed and resumed_files and killed_mid
    criterion(8, "determinism and resumability", ok,
              f"two runs byte-identical {same}, killed after {killed_at}/8 images, "
              f"resumed manifest identical {resumed}, resumed dataset identical {resumed_files}")
    assert ok


# 9 -----------------------------------------------------------------------------


def test_criterion_9_stats(criterion, trained, vocab, tmp_path):
    gen, flt = trained[0], trained[1]
    images, caps, qas = synthesize_microworld(MicroWorldSpec(), 100, seed=31, start_index=5000)
    out = tmp_path / "data"
    P.run_generation_job(images, gen, vocab, out, SamplingConfig(n_q=1, n_dc=1, max_decode_len=16, seed=3))
    P.run_filter_job(out, P.images_by_id(images), flt, vocab, BeamConfig())
    manifest = P.compute_stats(out, "fixture")
    on_disk = json.loads((out / "manifest.json").read_text())
    ref = recount_dataset(out)
    totals = (manifest["qa_pairs"] == R.count_lines(out / "qa.jsonl")
              and manifest["dense_captions"] == R.count_lines(out / "dc.jsonl")
              and manifest["candidates"] == R.count_lines(out / "candidates.jsonl")
              and manifest["filtered"] == R.count_lines(out / "filtered.jsonl")
              and manifest == on_disk)
    dist_sum = sum(manifest["qtype_distribution"].values())
    per_image = {k: sum(c[k] for c in ref["per_image"].values()) / ref["images"] for k in ("qa", "dc")}
    averages = (ref["images"] == 100 and manifest["per_image"] == ref["per_image"]
                and all(abs(manifest["per_image_average"][k] - per_image[k]) <= 1e-12 for k in per_image))
    ok = totals and abs(dist_sum - 1) <= 1e-9 and averages and manifest["qa_pairs"] > 0
    criterion(9, "dataset statistics", ok,
              f"totals == line counts {totals}, qtype distribution sum {dist_sum:.12f}, "
              f"per-image averages == recount {averages} (qa {per_image['qa']:.3f}, dc {per_image['dc']:.3f})")
    assert ok

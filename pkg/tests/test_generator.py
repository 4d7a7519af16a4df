import numpy as np
import pytest

from qadc.generator import (
    ANSWER_STAGE, CAPTION_STAGE, QUESTION_STAGE, Decoder, GeneratorItem, SamplingConfig, generate_qas,
    greedy_answers, sample_dense_captions, stream, top_k_choice, train_generator_step,
)
from qadc.optim import AdamW, OptimConfig
from qadc.vocab import build_qa_prompt

from oracles import top_k_ids


def _rows(world, n):
    idx = world.index()
    qs = [world.qas[(i * 7) % len(world.qas)] for i in range(n)]
    return [idx[q.image_id] for q in qs], [q.box for q in qs], [q.caption for q in qs], [q.qtype for q in qs]


def _rngs(n, seed=0):
    return [stream(seed, "test", i) for i in range(n)]


def _reference_greedy(model, vocab, pixels, box, caption, qtype):
    """One sample, argmax at every step, question stage until QA_SEP then answer stage until EOS."""
    h, w = model.cfg.image_height, model.cfg.image_width
    dec = Decoder(model, vocab)
    vision = model.encode_images(pixels[None], [box]).tokens.data
    prompt = list(build_qa_prompt(vocab, qtype, box, w, h, caption).ids)
    tokens, shown, stage = [vocab.bos], [vocab.bos], QUESTION_STAGE
    while len(tokens) - 1 < 24 and len(prompt) + len(tokens) < model.cfg.max_len:
        logits = dec.slot_logits([prompt + shown], vision)[0]
        tok = int(np.argmax(np.where(dec.allowed[stage], logits, -np.inf)))
        tokens.append(tok)
        # answer tokens are never revealed to later slots
        shown.append(vocab.mask if stage == ANSWER_STAGE else tok)
        if tok == vocab.qa_sep:
            stage = ANSWER_STAGE
        elif tok == vocab.eos and stage == ANSWER_STAGE:
            break
    return tokens


def test_stream_is_keyed_and_reproducible():
    assert stream(0, "qa", 1).random() == stream(0, "qa", 1).random()
    assert stream(0, "qa", 1).random() != stream(0, "qa", 2).random()
    assert stream(0, "img_0001").random() != stream(1, "img_0001").random()


def test_top_k_choice_examples():
    logits = np.array([0.0, 5.0, 4.0, 3.0, 9.0])
    allowed = np.array([True, True, True, True, False])
    rng = np.random.default_rng(0)
    picks = {top_k_choice(logits, allowed, 2, 1.0, rng)[0] for _ in range(200)}
    assert picks == {1, 2}
    assert top_k_choice(logits, allowed, 1, 1.0, rng)[0] == 1
    # ties rank the lower id first
    tok, top = top_k_choice(np.zeros(4), np.ones(4, bool), 2, 1.0, rng)
    assert list(top) == [0, 1]


def test_sampling_config_rejects_bad_values():
    with pytest.raises(ValueError):
        SamplingConfig(top_k=0)


def test_k1_matches_independent_greedy(trained, vocab, world, pixels):
    gen = trained[0]
    rows, boxes, caps, qts = _rows(world, 8)
    got = generate_qas(gen, vocab, pixels[rows], boxes, caps, qts, SamplingConfig(top_k=1), _rngs(8))
    for r, row in enumerate(rows):
        assert got[r].token_ids == _reference_greedy(gen, vocab, pixels[row], boxes[r], caps[r], qts[r])


def test_stored_answer_equals_greedy_redecode(trained, vocab, world, pixels):
    gen = trained[0]
    rows, boxes, caps, qts = _rows(world, 32)
    cfg = SamplingConfig(top_k=10)
    out = generate_qas(gen, vocab, pixels[rows], boxes, caps, qts, cfg, _rngs(32, 5))
    ok = [i for i, g in enumerate(out) if g.status == "ok"]
    assert len(ok) > 20
    again = greedy_answers(gen, vocab, pixels[[rows[i] for i in ok]], [boxes[i] for i in ok], [caps[i] for i in ok],
                           [qts[i] for i in ok], [out[i].question for i in ok], cfg)
    assert again == [out[i].answer for i in ok]


@pytest.mark.parametrize("batch", [1, 2, 7, 32])
def test_batched_equals_per_sample(trained, vocab, world, pixels, batch):
    gen = trained[0]
    rows, boxes, caps, qts = _rows(world, batch)
    cfg = SamplingConfig(top_k=5)
    together = generate_qas(gen, vocab, pixels[rows], boxes, caps, qts, cfg, _rngs(batch, 9))
    for i in range(batch):
        alone = generate_qas(gen, vocab, pixels[[rows[i]]], [boxes[i]], [caps[i]], [qts[i]], cfg,
                             [stream(9, "test", i)])[0]
        assert alone.token_ids == together[i].token_ids
    caps_together = sample_dense_captions(gen, vocab, pixels[rows], boxes, cfg, _rngs(batch, 2))
    for i in range(batch):
        alone = sample_dense_captions(gen, vocab, pixels[[rows[i]]], [boxes[i]], cfg, [stream(2, "test", i)])[0]
        assert alone[1].tokens == caps_together[i][1].tokens


def test_sampled_tokens_come_from_top_k(fresh_model, vocab, world, pixels):
    rows, boxes, caps, qts = _rows(world, 4)
    cfg = SamplingConfig(top_k=3)
    out = Decoder(fresh_model, vocab)
    vision = fresh_model.encode_images(pixels[rows], boxes)
    h, w = fresh_model.cfg.image_height, fresh_model.cfg.image_width
    prompts = [build_qa_prompt(vocab, qt, b, w, h, c) for b, c, qt in zip(boxes, caps, qts)]
    states = out.run(vision, prompts, [QUESTION_STAGE] * 4, cfg, _rngs(4), trace=True)
    for st, prompt, row in zip(states, prompts, range(4)):
        for step, (mode, cands, tok) in enumerate(st.trace):
            assert tok in set(int(c) for c in cands)
            if mode == QUESTION_STAGE:
                prefix = list(prompt.ids) + st.tokens[:step + 1]
                logits = out.slot_logits([prefix], vision.tokens.data[[row]])[0]
                assert set(int(c) for c in cands) == top_k_ids(logits, out.allowed[QUESTION_STAGE], 3)


def test_stage_switches_after_question_separator(fresh_model, vocab, world, pixels):
    rows, boxes, caps, qts = _rows(world, 6)
    vision = fresh_model.encode_images(pixels[rows], boxes)
    h, w = fresh_model.cfg.image_height, fresh_model.cfg.image_width
    prompts = [build_qa_prompt(vocab, qt, b, w, h, c) for b, c, qt in zip(boxes, caps, qts)]
    states = Decoder(fresh_model, vocab).run(vision, prompts, [QUESTION_STAGE] * 6, SamplingConfig(top_k=20),
                                             _rngs(6, 3), trace=True)
    for st in states:
        modes = [m for m, _, _ in st.trace]
        toks = [t for _, _, t in st.trace]
        if vocab.qa_sep in toks:
            k = toks.index(vocab.qa_sep)
            assert all(m == QUESTION_STAGE for m in modes[:k + 1])
            assert all(m == ANSWER_STAGE for m in modes[k + 1:])
            assert all(len(c) == 1 for m, c, _ in st.trace if m == ANSWER_STAGE)
        else:
            assert all(m == QUESTION_STAGE for m in modes)
        assert vocab.unk not in toks


def test_decode_length_cap_truncates(fresh_model, vocab, world, pixels):
    rows, boxes, caps, qts = _rows(world, 4)
    cfg = SamplingConfig(top_k=50, max_decode_len=3)
    out = generate_qas(fresh_model, vocab, pixels[rows], boxes, caps, qts, cfg, _rngs(4))
    for g in out:
        assert len(g.token_ids) - 1 <= 3
        if g.truncated:
            assert g.token_ids[-1] != vocab.eos


def test_caption_decoding_uses_caption_vocabulary(fresh_model, vocab, world, pixels):
    rows, boxes, _, _ = _rows(world, 4)
    vision = fresh_model.encode_images(pixels[rows], boxes)
    from qadc.vocab import build_dc_prompt

    prompts = [build_dc_prompt(vocab, b, 64, 64) for b in boxes]
    states = Decoder(fresh_model, vocab).run(vision, prompts, [CAPTION_STAGE] * 4, SamplingConfig(), _rngs(4),
                                             trace=True)
    for st in states:
        assert all(vocab.is_word(t) or t == vocab.eos for t in st.tokens[1:])


# -- training ----------------------------------------------------------------------


def test_zero_learning_rate_leaves_weights(fresh_model, vocab, world, pixels):
    model = fresh_model.clone()
    before = {n: p.data.copy() for n, p in model.params.items()}
    opt = AdamW(model.params, OptimConfig(lr=0.0))
    q = world.qas[0]
    item = GeneratorItem(world.index()[q.image_id], q.box, q.caption, q.qtype, q.question, q.answer)
    bd, rejected = train_generator_step(model, opt, vocab, pixels, [item], np.random.default_rng(0))
    assert not rejected and bd.gen > 0
    assert all(np.array_equal(before[n], p.data) for n, p in model.params.items())


def test_malformed_items_are_rejected(fresh_model, vocab, world, pixels):
    q = world.qas[0]
    idx = world.index()[q.image_id]
    bad = GeneratorItem(idx, q.box, q.caption, q.qtype, "", q.answer)
    good = GeneratorItem(idx, q.box, q.caption, q.qtype, q.question, q.answer)
    opt = AdamW(fresh_model.clone().params, OptimConfig(lr=0.0))
    _, rejected = train_generator_step(fresh_model.clone(), opt, vocab, pixels, [bad, good], np.random.default_rng(0))
    assert len(rejected) == 1 and rejected[0][0] is bad


def test_training_reduces_loss(trained):
    hist = trained[2]
    first = np.mean([h["gen"] for h in hist[:20]])
    last = np.mean([h["gen"] for h in hist[-20:]])
    assert last < 0.3 * first


def test_binary_questions_get_yes_or_no(trained, vocab, world, pixels):
    gen = trained[0]
    idx = world.index()
    qs = [q for q in world.qas if q.qtype == "binary"][:40]
    rows = [idx[q.image_id] for q in qs]
    out = generate_qas(gen, vocab, pixels[rows], [q.box for q in qs], [q.caption for q in qs], ["binary"] * len(qs),
                       SamplingConfig(top_k=5), _rngs(len(qs)))
    assert np.mean([g.answer in ("yes", "no") for g in out]) >= 0.9


def test_captions_name_the_boxed_object_color(trained, vocab, world, pixels):
    gen = trained[0]
    idx = world.index()
    red = [(idx[r.image_id], o.box) for r in world.images for o in r.scene if o.color == "red"]
    assert red
    out = sample_dense_captions(gen, vocab, pixels[[i for i, _ in red]], [b for _, b in red],
                                SamplingConfig(top_k=1), _rngs(len(red)))
    assert np.mean(["red" in text.split() for text, _ in out]) >= 0.8

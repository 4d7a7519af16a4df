from __future__ import annotations

import numpy as np
import pytest

from qadc import pipeline as P
from qadc.generator import TrainConfig
from qadc.microworld import MicroWorldSpec, synthesize_microworld
from qadc.model import ModelConfig, VisionLanguageModel, preprocess_pixels


def tiny_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(image_height=16, image_width=16, patch_size=8, hidden=8, vision_layers=2, text_layers=1, heads=2,
                vocab_size=vocab_size, max_len=40, mlp_ratio=2, init_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


def small_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(image_height=64, image_width=64, patch_size=16, hidden=32, vision_layers=2, text_layers=2, heads=2,
                vocab_size=vocab_size, max_len=48, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def world():
    images, caps, qas = synthesize_microworld(MicroWorldSpec(), 24, seed=3)
    return P.World(images, caps, qas)


@pytest.fixture(scope="session")
def vocab(world):
    return P.world_vocab(world.captions, world.qas)


@pytest.fixture(scope="session")
def pixels(world):
    return np.stack([preprocess_pixels(r.pixels) for r in world.images])


@pytest.fixture(scope="session")
def fresh_model(vocab):
    return VisionLanguageModel(small_config(len(vocab)), seed=0)


@pytest.fixture(scope="session")
def trained(world, vocab):
    """Generator and filter overfit on the small fixture world (same initial weights)."""
    gen = VisionLanguageModel(small_config(len(vocab)), seed=0)
    flt = gen.clone()
    cfg = TrainConfig(batch_size=32, steps=500, lr=3e-3, warmup_steps=20, log_every=10**9, seed=0)
    gen_hist = P.train_generator(gen, vocab, world, cfg)
    flt_hist = P.train_filter(flt, vocab, world, cfg)
    return gen, flt, gen_hist, flt_hist


_CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Print and remember one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} [{detail}]"
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)

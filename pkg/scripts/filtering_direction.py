"""Does consistency filtering raise answer accuracy?  Desk-scale run on the micro-world.

Trains a generator and a filter from the same initial weights on oracle
annotations, generates QA candidates for held-out images, filters them and
compares the oracle accuracy of kept vs all parsed candidates.

    python scripts/filtering_direction.py --config configs/direction.yaml --out runs/direction
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from qadc import pipeline as P
from qadc.config import load_config
from qadc.model import VisionLanguageModel


def run(out: Path, overrides: list[str], verbose: bool = True, config: str | None = None) -> dict:
    cfg = load_config(config, overrides)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    def log(step, rec):
        if verbose:
            shown = " ".join(f"{k}={v:.3f}" for k, v in rec.items() if isinstance(v, float))
            print(f"  step {step} {shown}", flush=True)

    t = time.monotonic()
    vocab = P.make_microworld(out / "world", cfg.world.n_images, cfg.world.n_generate, cfg.seed)
    train = P.load_world(out / "world" / P.TRAIN_DIR)
    held = P.load_world(out / "world" / P.HELDOUT_DIR)
    cfg.model.vocab_size = len(vocab)
    generator = VisionLanguageModel(cfg.model.validate(), seed=cfg.seed)
    filt = generator.clone()
    timings["world"] = time.monotonic() - t

    t = time.monotonic()
    gen_hist = P.train_generator(generator, vocab, train, cfg.generator_train, cfg.masks, log)
    timings["train_generator"] = time.monotonic() - t
    t = time.monotonic()
    flt_hist = P.train_filter(filt, vocab, train, cfg.filter_train, log)
    timings["train_filter"] = time.monotonic() - t
    P.save_model(out / "generator.ckpt", generator, vocab)
    P.save_model(out / "filter.ckpt", filt, vocab)

    t = time.monotonic()
    P.run_generation_job(held.images, generator, vocab, out / "data", cfg.sampling, cfg.generation,
                         max_boxes=cfg.world.max_boxes)
    timings["generate"] = time.monotonic() - t
    t = time.monotonic()
    P.run_filter_job(out / "data", P.images_by_id(held.images), filt, vocab, cfg.beam)
    timings["filter"] = time.monotonic() - t
    manifest = P.compute_stats(out / "data", cfg.digest())
    result = P.eval_oracle(out / "data", held.images)
    result.update({
        "generator_steps": len(gen_hist), "filter_steps": len(flt_hist),
        "generator_final_loss": gen_hist[-1]["total"], "filter_final_loss": flt_hist[-1]["vqa"],
        "raw_candidates": manifest["candidates"], "parse_failures": manifest["parse_failures"],
        "seconds": {k: round(v, 1) for k, v in timings.items()},
    })
    (out / "direction.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/direction")
    ap.add_argument("--config", default=None, help="YAML experiment config")
    ap.add_argument("--minutes", type=float, default=None, help="wall-clock cap per training run")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args(argv)
    overrides = list(args.overrides)
    if args.minutes is not None:
        overrides[:0] = [f"generator_train.max_minutes={args.minutes}", f"filter_train.max_minutes={args.minutes}"]
    result = run(Path(args.out), overrides, config=args.config)
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``qadc <command> [--config FILE] [--set key=value ...] [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, dump_config, load_config
from .microworld import MicroWorldSpec
from .model import VisionLanguageModel
from .tensor import ConfigurationError

COMMANDS = {
    "make-microworld": "render train/held-out micro-worlds with oracle annotations",
    "train-generator": "train the QA/DC generator on oracle annotations",
    "train-filter": "train the VQA filter on oracle (image, question, answer) triplets",
    "generate": "sample dense captions and QA candidates for held-out images",
    "filter": "keep candidates whose filter answer matches the generator answer",
    "stats": "write manifest.json and a question-type histogram for a dataset",
    "pretrain": "run the shared or two-pass pre-training harness",
    "eval-oracle": "score all vs kept candidates against micro-world ground truth",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qadc", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path), repeatable")
        p.add_argument("--seed", type=int, help="seed for every random stream")
        p.add_argument("--world", help="micro-world directory (default: <out_dir>/world)")
        p.add_argument("--data", help="dataset directory (default: <out_dir>/data)")
        p.add_argument("--weights", help="checkpoint path")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _log_progress(step: int, record: dict) -> None:
    shown = " ".join(f"{k}={v:.4f}" for k, v in record.items() if isinstance(v, float))
    print(f"step {step} {shown}", flush=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        return _dispatch(args, cfg)
    except (ConfigError, ConfigurationError, P.PipelineError, FileNotFoundError) as exc:
        print(f"qadc {args.command}: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, cfg) -> int:
    out = Path(cfg.out_dir)
    world = Path(args.world) if args.world else out / "world"
    data = Path(args.data) if args.data else out / "data"
    cmd = args.command

    if cmd == "make-microworld":
        vocab = P.make_microworld(world, cfg.world.n_images, cfg.world.n_generate, cfg.seed, MicroWorldSpec())
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
        print(f"wrote {world} ({cfg.world.n_images} train, {cfg.world.n_generate} held-out images, "
              f"vocab {len(vocab)})")
        return 0

    if cmd in ("train-generator", "train-filter"):
        from .vocab import Vocab

        vocab = Vocab.load(_need(world / "vocab.txt"))
        train = P.load_world(_need(world / P.TRAIN_DIR))
        cfg.model.vocab_size = len(vocab)
        # generator and filter share the initial weights
        model = VisionLanguageModel(cfg.model.validate(), seed=cfg.seed)
        if cmd == "train-generator":
            history = P.train_generator(model, vocab, train, cfg.generator_train, cfg.masks, _log_progress)
            default = out / "generator.ckpt"
        else:
            history = P.train_filter(model, vocab, train, cfg.filter_train, _log_progress)
            default = out / "filter.ckpt"
        path = Path(args.weights) if args.weights else default
        P.save_model(path, model, vocab, {"steps": len(history)})
        print(f"saved {path} after {len(history)} steps")
        return 0

    if cmd == "generate":
        model, vocab = P.load_model(args.weights or out / "generator.ckpt")
        held = P.load_world(_need(world / P.HELDOUT_DIR))
        summary = P.run_generation_job(held.images, model, vocab, data, cfg.sampling, cfg.generation,
                                       max_boxes=cfg.world.max_boxes)
        print(json.dumps(summary, sort_keys=True))
        return 0

    if cmd == "filter":
        model, vocab = P.load_model(args.weights or out / "filter.ckpt")
        held = P.load_world(_need(world / P.HELDOUT_DIR))
        _need(data / "candidates.jsonl")
        stats = P.run_filter_job(data, P.images_by_id(held.images), model, vocab, cfg.beam)
        print(json.dumps(stats.to_dict(), sort_keys=True))
        return 0

    if cmd == "stats":
        _need(data)
        manifest = P.compute_stats(data, cfg.digest())
        print(P.format_histogram(manifest), end="")
        print(json.dumps({k: v for k, v in manifest.items() if k != "per_image"}, sort_keys=True, indent=1))
        return 0

    if cmd == "pretrain":
        from .vocab import Vocab

        vocab = Vocab.load(_need(world / "vocab.txt"))
        pre = P.PretrainData.from_world(P.load_world(_need(world / P.TRAIN_DIR)))
        cfg.model.vocab_size = len(vocab)
        model = VisionLanguageModel(cfg.model.validate(), seed=cfg.seed)
        history = P.run_pretraining(model, vocab, pre, cfg.pretrain, cfg.seed, cfg.masks, _log_progress)
        out.mkdir(parents=True, exist_ok=True)
        (out / "pretrain_losses.txt").write_text("\n".join(P.loss_log_lines(history)) + "\n")
        P.save_model(args.weights or out / "pretrain.ckpt", model, vocab, {"steps": len(history)})
        print(f"wrote {out / 'pretrain_losses.txt'}")
        return 0

    if cmd == "eval-oracle":
        held = P.load_world(_need(world / P.HELDOUT_DIR))
        result = P.eval_oracle(_need(data / "filtered.jsonl").parent, held.images)
        (data / "eval.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
        print(json.dumps(result, sort_keys=True, indent=1))
        return 0

    raise AssertionError(cmd)


def _need(path: Path) -> Path:
    if not path.exists():
        raise P.PipelineError(f"missing {path}")
    return path


if __name__ == "__main__":
    sys.exit(main())

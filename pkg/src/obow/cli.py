"""Command-line entry points: train, eval-linear, eval-fewshot, inspect-words."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import load_dataset, train_test_split
from .evaluation import EpisodeSpec, ProbeConfig, extract_features, fewshot_eval, inspect_words, linear_probe
from .trainer import TrainConfig, load_checkpoint, run_training


def _encoder(state, which: str):
    return state.student if which == "student" else state.teacher


def _cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.output_dir:
        config.output_dir = args.output_dir
    data = args.data or config.data
    if not data:
        print("error: no dataset given (set 'data' in the config or pass --data)", file=sys.stderr)
        return 2
    dataset = load_dataset(data, size=config.geometry().sizes["base"], channels=config.input_channels)
    art = run_training(config, dataset, resume=args.resume)
    print(json.dumps({"checkpoint": str(art.checkpoint), "metrics": str(art.metrics)}))
    print(f"trained {config.epochs} epochs; checkpoint at {art.checkpoint}", file=sys.stderr)
    return 0


def _split(args, size):
    if args.test_data:
        return load_dataset(args.data, size=size), load_dataset(args.test_data, size=size)
    return train_test_split(load_dataset(args.data, size=size), args.test_fraction, args.split_seed)


def _cmd_eval_linear(args) -> int:
    state = load_checkpoint(args.ckpt)
    geo = state.config.geometry().sizes
    train, test = _split(args, geo["base"])
    enc = _encoder(state, args.encoder)
    kw = dict(base_size=geo["base"], crop_size=geo["teacher"])
    cfg = ProbeConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    # mirrored training rows augment the probe's data; test images are scored once
    test_flip = "average" if args.flip == "average" else "none"
    acc = linear_probe(extract_features(enc, train, flip=args.flip, **kw), extract_features(enc, test, flip=test_flip, **kw), cfg)
    print(json.dumps({"top1": acc, "train_size": len(train), "test_size": len(test), "encoder": args.encoder}))
    print(f"linear probe top-1 {100 * acc:.2f}% ({len(train)} train / {len(test)} test, {args.encoder})", file=sys.stderr)
    return 0


def _cmd_eval_fewshot(args) -> int:
    state = load_checkpoint(args.ckpt)
    geo = state.config.geometry().sizes
    dataset = load_dataset(args.data, size=geo["base"])
    table = extract_features(_encoder(state, args.encoder), dataset, base_size=geo["base"], crop_size=geo["teacher"])
    spec = EpisodeSpec(n_way=args.n_way, k_shot=args.k_shot, queries=args.queries, episodes=args.episodes, seed=args.seed)
    mean, stderr = fewshot_eval(table, spec)
    print(json.dumps({"accuracy": mean, "stderr": stderr, "n_way": args.n_way, "k_shot": args.k_shot, "episodes": args.episodes}))
    print(f"{args.n_way}-way {args.k_shot}-shot: {100 * mean:.2f}% +/- {100 * 1.96 * stderr:.2f} over {args.episodes} episodes", file=sys.stderr)
    return 0


def _cmd_inspect_words(args) -> int:
    state = load_checkpoint(args.ckpt)
    geo = state.config.geometry().sizes
    dataset = load_dataset(args.data, size=geo["base"])
    vocab = state.vocabs[args.level]
    words = [int(w) for w in args.words.split(",")] if args.words else None
    if words is not None:
        bad = [w for w in words if not 0 <= w < len(vocab)]
        if bad:
            print(f"error: word indices {bad} outside [0, {len(vocab)})", file=sys.stderr)
            return 2
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "words"
    result = inspect_words(
        state.teacher, vocab, dataset, top_k=args.top_k, words=words,
        delta=state.trackers[args.level].delta, base_size=geo["base"], out_dir=out,
    )
    print(json.dumps({
        str(w): [{"score": p.score, "image": p.image_index, "rect": list(p.rect), "source": p.source} for p in patches]
        for w, patches in result.items()
    }))
    print(f"wrote {len(result)} word grids to {out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="obow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="self-supervised training run")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="overrides the config's data entry")
    p.add_argument("--output-dir")
    p.set_defaults(func=_cmd_train)

    def eval_common(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--encoder", choices=("student", "teacher"), default="student")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval-linear", help="linear probe on frozen features")
    eval_common(p)
    p.add_argument("--test-data", help="held-out split; otherwise --data is split")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=ProbeConfig.epochs)
    p.add_argument("--lr", type=float, default=ProbeConfig.lr)
    p.add_argument("--flip", choices=("none", "average", "rows"), default="rows")
    p.set_defaults(func=_cmd_eval_linear)

    p = sub.add_parser("eval-fewshot", help="prototype few-shot episodes on frozen features")
    eval_common(p)
    p.add_argument("--n-way", type=int, default=EpisodeSpec.n_way)
    p.add_argument("--k-shot", type=int, default=EpisodeSpec.k_shot)
    p.add_argument("--queries", type=int, default=EpisodeSpec.queries)
    p.add_argument("--episodes", type=int, default=EpisodeSpec.episodes)
    p.set_defaults(func=_cmd_eval_fewshot)

    p = sub.add_parser("inspect-words", help="top-scoring patches for chosen visual words")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--words", help="comma-separated word indices (default: all)")
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--level", choices=("L", "L-1"), default="L")
    p.add_argument("--out", help="directory for per-word image grids (default: <ckpt dir>/words)")
    p.set_defaults(func=_cmd_inspect_words)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

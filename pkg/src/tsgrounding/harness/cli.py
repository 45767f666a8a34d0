"""Command line entry point: synth, pseudogen, train, eval, plot, pool-hist."""

from __future__ import annotations

import argparse
import collections
import json
import logging
import sys
from pathlib import Path

import torch

from ..datamodel import (
    ConfigError,
    LoadError,
    SyntheticSpec,
    ValidationError,
    Vocab,
    load_dataset,
    synth_generate,
    write_synthetic,
)
from ..pseudoquery import (
    CaptionError,
    HttpCaptioner,
    StubCaptioner,
    WordVectors,
    caption_frames,
    read_object_vocab,
    read_pseudo_cache,
    write_pseudo_cache,
)
from .config import load_config
from .data import build_examples, collate, iter_batches, prepare
from .evaluation import evaluate, load_checkpoint
from .plotting import EVAL_CSV, plot_run
from .training import TrainingError, train

log = logging.getLogger("tsgrounding")

PSEUDO_CACHE = "pseudo_queries.jsonl"


def _manifest(path: str) -> Path:
    p = Path(path)
    return p / "manifest.jsonl" if p.is_dir() else p


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value
    return out


def cmd_synth(args) -> int:
    spec = SyntheticSpec(num_pairs=args.num_pairs, T=args.T, D_in=args.D_in, planted_snr=args.snr, seed=args.seed)
    manifest = write_synthetic(args.out, spec, synth_generate(spec))
    print(manifest)
    return 0


def cmd_pseudogen(args) -> int:
    data_dir = _manifest(args.data).parent
    pairs = load_dataset(_manifest(args.data))
    if args.endpoint:
        captioner = HttpCaptioner(args.endpoint, timeout=args.timeout, max_workers=args.workers)
    else:
        tokens = data_dir / "frame_tokens.jsonl"
        if not tokens.exists():
            raise LoadError(f"no captioning endpoint given and no {tokens} for the stub captioner")
        objects = sorted(read_object_vocab(args.objects or data_dir / "objects.txt"))
        captioner = StubCaptioner.from_file(tokens, objects, seed=args.seed, noise=args.noise)
    captions = {video.video_id: caption_frames(video, args.F, captioner) for video, _ in pairs}
    out = Path(args.out) if args.out else data_dir / PSEUDO_CACHE
    write_pseudo_cache(out, captions)
    print(out)
    return 0


def _load_training_data(data: str, cfg, objects_path: str | None, embeddings: str | None):
    manifest = _manifest(data)
    data_dir = manifest.parent
    pairs = load_dataset(manifest)
    objects = read_object_vocab(objects_path or data_dir / "objects.txt")
    cache = data_dir / PSEUDO_CACHE
    captions = read_pseudo_cache(cache) if cache.exists() else None
    if captions is None and cfg.uses_pseudo_queries:
        raise LoadError(f"{cache} missing; run `pseudogen` first or disable the pseudo-query branch")
    wv = WordVectors.load(embeddings) if embeddings else WordVectors()
    return prepare(
        pairs, captions, objects, cfg.T, cfg.K, cfg.val_fraction, wv,
        extend_ratio=cfg.extend_ratio, t_min=cfg.t_min, t_max=cfg.t_max,
    )


def cmd_train(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.epochs is not None:
        overrides["epochs"] = str(args.epochs)
    cfg = load_config(args.config, overrides)
    data = _load_training_data(args.data, cfg, args.objects, args.embeddings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = train(cfg, data.train, data.vocab, data.objects, out)
    print(f"checkpoint: {result.checkpoint}")
    last = result.history[-1]
    print(" ".join(f"{k}={last[k]:.4f}" for k in last if k != "epoch"))
    return 0


def cmd_eval(args) -> int:
    pairs = load_dataset(_manifest(args.dataset))
    result = evaluate(args.checkpoint, pairs)
    print(result.table())
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / EVAL_CSV
    result.write_csv(out)
    print(f"per-sample results: {out}")
    return 0


def cmd_plot(args) -> int:
    for path in plot_run(args.run_dir):
        print(path)
    return 0


@torch.no_grad()
def cmd_pool_hist(args) -> int:
    """How often each prompt-pool entry is retrieved on a dataset (inference keys)."""
    model, ckpt = load_checkpoint(args.checkpoint)
    if not model.cfg.use_prompt:
        raise ConfigError("checkpoint was trained without the prompt pool")
    cfg = ckpt["train_config"]
    examples = build_examples(load_dataset(_manifest(args.dataset)), cfg["T"])
    vocab = Vocab.from_itos(ckpt["vocab"])
    counts = collections.Counter()
    for chunk in iter_batches(examples, 32):
        out = model(collate(chunk, vocab, with_pseudo=False), use_pseudo=False)
        counts.update(out.prompt_index.tolist())
    peak = max(counts.values())
    for idx in range(model.cfg.pool_size):
        n = counts.get(idx, 0)
        print(f"{idx:3d} {n:6d} {'#' * round(40 * n / peak)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsgrounding", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--num-pairs", type=int, default=200)
    s.add_argument("--T", type=int, default=48)
    s.add_argument("--D-in", type=int, default=64)
    s.add_argument("--snr", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pseudogen", help="caption sampled frames into a pseudo-query cache")
    s.add_argument("--data", required=True, help="dataset directory or manifest")
    s.add_argument("--endpoint", help="captioning service URL; the stub captioner is used when absent")
    s.add_argument("--objects")
    s.add_argument("--out")
    s.add_argument("--F", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("--workers", type=int, default=4)
    s.set_defaults(func=cmd_pseudogen)

    s = sub.add_parser("train")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--objects")
    s.add_argument("--embeddings", help="word vector file, one 'token v1 ... vD' per line")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", help="per-sample CSV path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot")
    s.add_argument("--run-dir", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("pool-hist", help="prompt-pool retrieval counts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_pool_hist)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (LoadError, ValidationError, ConfigError, CaptionError, TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

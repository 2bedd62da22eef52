"""Command-line entry point: ``python -m entalign <command> ...``.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure,
3 a verification check failed.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import gradcheck
from .checkpoint import Checkpoint
from .config import PRESETS, RunConfig, merge, preset, summary_lines
from .inference import evaluate, evaluation_queries, format_report, predict, summary_table
from .runs import fit, from_checkpoint, split_dataset, to_checkpoint
from .storage import load_dataset, read_image, save_dataset, write_pgm
from .world import generate_dataset

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 means runtime failure here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=PRESETS, default="desk")
    p.add_argument("--config", help="JSON file layered over the preset")
    p.add_argument("--seed", type=int)


def resolve_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = merge(cfg, json.loads(Path(args.config).read_text()))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "n", None) is not None:
        cfg.n_samples = args.n
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "alpha_loc", None) is not None:
        cfg.train.alpha_loc = args.alpha_loc
    if getattr(args, "no_entity_translation", False):
        cfg.train.entity_translation = False
    if getattr(args, "out", None) and args.command in ("datagen", "train"):
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _echo(lines) -> None:
    for line in lines:
        print(line)


def cmd_datagen(args) -> int:
    cfg = resolve_config(args)
    kb = cfg.knowledge_base()
    grammar = cfg.grammar(kb)
    samples = generate_dataset(cfg.world, cfg.n_samples, cfg.seed, kb, grammar)
    out = save_dataset(cfg.out_dir, samples, cfg.world, cfg.seed, kb, grammar)
    cfg.save(out / "config.json")
    print(f"wrote {len(samples)} samples to {out} (spec_hash {cfg.world.spec_hash()[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _echo(summary_lines(cfg))
    if args.dry_run:
        return EXIT_OK
    if not args.dataset:
        raise UsageError("train needs a dataset directory unless --dry-run is given")
    samples, spec, kb, _, manifest = load_dataset(args.dataset)
    if spec.spec_hash() != cfg.world.spec_hash():
        raise UsageError("dataset was generated from a different world spec than this config")
    if kb != cfg.knowledge_base():
        raise UsageError("dataset knowledge base differs from the config's")
    cfg.n_samples = len(samples)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    log_path = out / "epochs.log"
    with open(log_path, "w") as log:
        log.write("epoch,l_cls,l_loc,total,wall\n")

        def on_epoch(rec):
            log.write(rec.line() + "\n")
            log.flush()
            print(rec.line(), flush=True)

        model, result = fit(cfg, samples, kb, on_epoch)
    to_checkpoint(model, cfg, result).save(out / "checkpoint.bin")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def _load_checkpoint(args):
    expected = None
    if args.config:
        base = preset(args.preset)
        expected = merge(base, json.loads(Path(args.config).read_text())).fingerprint()
    ckpt = Checkpoint.load(args.checkpoint, expected, args.allow_config_mismatch)
    return from_checkpoint(ckpt)


def _entity_queries(model, names):
    kb = model.kb
    if not names:
        return evaluation_queries(model)
    out = []
    for name in names:
        e = kb.entity_id(name)
        if e in kb.seen:
            out.append((name, e, e))
        else:
            out.append((f"{name}:description", e, kb.descriptions[e]))
            out.append((f"{name}:name", e, name.replace("_", " ")))
    return out


def cmd_eval(args) -> int:
    model, cfg = _load_checkpoint(args)
    samples, spec, kb, _, _ = load_dataset(args.dataset)
    if kb != model.kb:
        raise UsageError("dataset knowledge base differs from the checkpoint's")
    parts = dict(zip(("train", "val", "test"), split_dataset(cfg, samples)))
    part = parts[args.split or cfg.eval.split]
    names = [n.strip() for n in args.queries.split(",")] if args.queries else None
    queries = _entity_queries(model, names)
    if not cfg.eval.include_names and not names:
        queries = [q for q in queries if not q[0].endswith(":name")]
    records = evaluate(model, part, queries, cfg.eval.batch_size)
    text = format_report(records)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(summary_table(records), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_ground(args) -> int:
    model, _ = _load_checkpoint(args)
    image = read_image(args.image, model.cfg.channels)
    if image.shape[:2] != (model.cfg.image_size, model.cfg.image_size):
        raise UsageError(f"image is {image.shape[1]}x{image.shape[0]}, model expects "
                         f"{model.cfg.image_size}x{model.cfg.image_size}")
    if args.query_description:
        query = args.query_description
    else:
        e = model.kb.entity_id(args.query)
        if e not in model.kb.seen:
            raise UsageError(f"{args.query!r} was not seen in training; pass --query-description")
        query = e
    scores, maps = predict(model, image, query)
    write_pgm(args.out, maps[0])
    print(f"score {scores[0]:.6f} heatmap {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, wall = gradcheck.run(args.seed or 0, args.coords)
    _echo(r.line() for r in results)
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed for r in results) and wall < args.time_limit
    print(f"checks={len(results)} max_rel_error={worst:.3e} wall={wall:.1f}s "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_vocab(args) -> int:
    cfg = resolve_config(args)
    kb = cfg.knowledge_base()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kb.save(out / "kb.txt")
    cfg.grammar(kb).save(out / "grammar.txt")
    print(f"wrote {out / 'kb.txt'} and {out / 'grammar.txt'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="python -m entalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate a synthetic dataset directory")
    _add_config_args(p)
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("dataset", nargs="?")
    _add_config_args(p)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha-loc", type=float)
    p.add_argument("--no-entity-translation", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="print the effective config and stop")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "metric report for a checkpoint on a dataset split"),
                             ("ground", cmd_ground, "score one image and write its heatmap")):
        p = sub.add_parser(name, help=text)
        p.add_argument("checkpoint")
        p.add_argument("dataset" if name == "eval" else "image")
        p.add_argument("--preset", choices=PRESETS, default="desk")
        p.add_argument("--config", help="reject the checkpoint unless it was trained under this config")
        p.add_argument("--allow-config-mismatch", action="store_true")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--split", choices=("train", "val", "test"))
            p.add_argument("--queries", help="comma-separated entity names (default: all)")
            p.add_argument("--out", help="metric report path (default: stdout)")
        else:
            q = p.add_mutually_exclusive_group(required=True)
            q.add_argument("--query", help="seen entity name")
            q.add_argument("--query-description", help="free-text description (zero-shot)")
            p.add_argument("--out", required=True, help="output .pgm heatmap")

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    p.add_argument("--seed", type=int)
    p.add_argument("--coords", type=int, default=4, help="coordinates per parameter tensor")
    p.add_argument("--time-limit", type=float, default=60.0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("vocab", help="write the knowledge base and grammar files")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:                      # noqa: BLE001 - exit-code contract
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

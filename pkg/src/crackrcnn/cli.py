"""Command-line driver: ``crackrcnn {train,evaluate,infer,report,validate-data}``.

Exit status 0 on success, 1 on usage or validation errors, 2 on runtime
failures. Diagnostics go to stderr; tables go to stdout or ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from .checkpoint import IntegrityError, load_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .dataset import DatasetError, load_coco

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

log = logging.getLogger("crackrcnn")


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Usage(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crackrcnn", description="Mask R-CNN crack detection experiments.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. backbone.kind=hrnet")

    t = sub.add_parser("train", help="train a model")
    with_config(t)
    t.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a labelled split")
    with_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--images", required=True)
    e.add_argument("--out", help="write the evaluation record (JSON) here")

    i = sub.add_parser("infer", help="predict on images, writing detection records and overlays")
    with_config(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("images", nargs="+")

    r = sub.add_parser("report", help="render stored evaluations as tables")
    r.add_argument("--from", dest="sources", action="append", required=True, metavar="EVAL_JSON")
    r.add_argument("--out", help="write the table here instead of stdout")

    v = sub.add_parser("validate-data", help="check an annotation file")
    v.add_argument("--annotations", required=True)
    v.add_argument("--images", help="image root; enables the missing-file check")
    return p


def _checkpoint_config(args, ckpt) -> RunConfig:
    """Stored config of the checkpoint, or ``--config`` when it matches the weights."""
    if args.config:
        cfg = load_config(args.config, args.overrides)
        if cfg.digest() != ckpt.config_digest:
            raise ConfigError(
                f"config digest {cfg.digest()} does not match checkpoint digest {ckpt.config_digest}"
            )
        return cfg
    return parse_config(ckpt.config_text, args.overrides)


def _cmd_train(args) -> int:
    from .pipeline import train

    cfg = load_config(args.config, args.overrides)
    sys.stderr.write("effective config:\n" + cfg.to_ini())
    if not cfg.data.train_annotations:
        raise ConfigError("data.train_annotations is not set", "data.train_annotations")
    train_split = load_coco(cfg.data.train_annotations, cfg.data.train_images, name="train")
    val_split = None
    if cfg.data.val_annotations:
        val_split = load_coco(cfg.data.val_annotations, cfg.data.val_images, name="val")
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(cfg, train_split, val_split, out_dir=args.out, train_root=cfg.data.train_images,
                   val_root=cfg.data.val_images, resume=resume)
    for entry in result.log:
        log.info("epoch %s: %s", entry["epoch"], {k: v for k, v in entry.items() if k != "epoch"})
    return EXIT_OK


def _emit(text: str, out: Optional[str]):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_evaluate(args) -> int:
    from .pipeline import evaluate
    from .report import format_report

    ckpt = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    split = load_coco(args.annotations, args.images, name="test")
    rep = evaluate(ckpt, split, cfg, image_root=args.images)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(rep.to_json())
    sys.stdout.write(format_report(rep))
    return EXIT_OK


def _cmd_infer(args) -> int:
    from .pipeline import infer

    ckpt = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    failed = infer(ckpt, args.images, args.out, cfg)
    if failed:
        log.error("%d image(s) could not be read", len(failed))
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_report(args) -> int:
    from .pipeline import EvalReport
    from .report import compare_report, format_report

    reports = []
    for path in args.sources:
        try:
            with open(path, encoding="utf-8") as fh:
                reports.append((os.path.splitext(os.path.basename(path))[0], EvalReport.from_dict(json.load(fh))))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path} is not an evaluation record: {exc}") from None
    if len(reports) == 1:
        text = format_report(reports[0][1])
    else:
        try:
            text = compare_report(reports)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    _emit(text, args.out)
    return EXIT_OK


def _cmd_validate(args) -> int:
    split = load_coco(args.annotations, args.images)
    n_ann = sum(len(v) for v in split.annotations.values())
    sys.stdout.write(f"ok: {len(split)} images, {n_ann} annotations\n")
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "infer": _cmd_infer,
    "report": _cmd_report,
    "validate-data": _cmd_validate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, DatasetError, IntegrityError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level driver reports and exits
        log.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

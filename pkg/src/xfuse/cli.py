"""Command-line entry point: ``xfuse <subcommand> [flags]``.

Exit status: 0 success, 1 invalid input (usage, config, validation), 2 runtime
failure (corrupt files, missing maps, divergence, I/O). Diagnostics go to
stderr; artifacts are written under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .checkpoint import atomic_write_text, load_checkpoint
from .config import RunConfig, parse_on_off, load_config, parse_overrides
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DivergenceError,
    ManifestError,
    ShapeError,
    TransferError,
    ValidationError,
)
from .metrics import confusion_from_csv, roc_from_csv
from .plot import confusion_svg, roc_svg

log = logging.getLogger("xfuse")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _on_off(text: str) -> bool:
    try:
        return parse_on_off(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int, help="epochs for the stage(s) this command trains")
    common.add_argument("--size", type=int, help="image edge S")
    common.add_argument("--fusion", type=_on_off, metavar="on|off")
    common.add_argument("--transfer", type=_on_off, metavar="on|off")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any config override")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")

    p = _Parser(prog="xfuse", description="Cross-attention fusion of fundus images and lesion maps.")
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True
    sub.add_parser("synth", parents=[common], help="export both synthetic datasets")
    sub.add_parser("train-seg", parents=[common], help="train the lesion segmenter")
    g = sub.add_parser("gen-maps", parents=[common], help="lesion maps for the image-labeled set")
    g.add_argument("--checkpoint", required=True, help="segmentation checkpoint")
    t = sub.add_parser("train-cls", parents=[common], help="train one classifier cell")
    t.add_argument("--checkpoint", help="segmentation checkpoint (required with --transfer on)")
    t.add_argument("--maps", help="lesion-map directory (required with --fusion on)")
    e = sub.add_parser("eval", parents=[common], help="evaluate a classifier on the test split")
    e.add_argument("--checkpoint", required=True, help="classification checkpoint")
    e.add_argument("--maps", help="lesion-map directory (required for fusion models)")
    e.add_argument("--no-svg", action="store_true")
    a = sub.add_parser("ablate", parents=[common], help="fusion x transfer grid")
    a.add_argument("--seeds", type=int, help="number of consecutive seeds")
    a.add_argument("--cells", help="'all' or e.g. on:on,off:off")
    pl = sub.add_parser("plot", parents=[common], help="SVGs from ROC / confusion CSVs")
    pl.add_argument("--roc", required=True)
    pl.add_argument("--confusion", required=True)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    cfg = parse_overrides(pairs, cfg)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.size is not None:
        changes["size"] = args.size
    if args.fusion is not None:
        changes["fusion"] = args.fusion
    if args.transfer is not None:
        changes["transfer"] = args.transfer
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "seeds", None) is not None:
        changes["seeds"] = args.seeds
    if getattr(args, "cells", None) is not None:
        changes["cells"] = args.cells
    if args.epochs is not None:
        if args.command in ("train-seg", "ablate"):
            changes["seg_epochs"] = args.epochs
        if args.command in ("train-cls", "ablate"):
            changes["cls_epochs"] = args.epochs
    stage = {"train-seg": "seg-train", "gen-maps": "map-gen", "train-cls": "cls-train", "eval": "eval"}
    changes["stage"] = stage.get(args.command, "ablate")
    return cfg.replace(**changes)


def run(args, cfg: RunConfig) -> None:
    out = Path(cfg.out)
    cmd = args.command
    if cmd == "synth":
        harness.export_samples(harness.seg_dataset(cfg), out / "pixel")
        harness.export_samples(harness.cls_dataset(cfg), out / "image")
    elif cmd == "train-seg":
        res = harness.train_seg(cfg, out)
        d, j = harness.evaluate_seg(cfg, res.checkpoint)
        print(f"best_epoch,val_dice,test_dice,test_iou\n{res.best_epoch},{res.val_dice!r},{d!r},{j!r}")
    elif cmd == "gen-maps":
        harness.gen_maps(cfg, load_checkpoint(args.checkpoint, "segmentation"), out)
    elif cmd == "train-cls":
        if cfg.transfer and not args.checkpoint:
            raise UsageError("train-cls: --transfer on needs --checkpoint SEG_CHECKPOINT")
        if cfg.fusion and not args.maps:
            raise UsageError("train-cls: --fusion on needs --maps DIR")
        seg = load_checkpoint(args.checkpoint, "segmentation") if cfg.transfer else None
        res = harness.train_cls(cfg, args.maps if cfg.fusion else None, seg, out)
        print(f"best_epoch,threshold\n{res.best_epoch},{res.threshold!r}")
    elif cmd == "eval":
        ck = load_checkpoint(args.checkpoint, "classification")
        rep = harness.evaluate(cfg, ck, args.maps, out, svg=not args.no_svg)
        sys.stdout.write(rep.to_csv())
        if rep.threshold_fallback:
            print("warning: no stored threshold, used 0.5", file=sys.stderr)
    elif cmd == "ablate":
        _, agg = harness.ablate(cfg, out)
        sys.stdout.write(harness.csv_text(harness.ABLATION_HEADER, agg))
    elif cmd == "plot":
        curve = roc_from_csv(Path(args.roc).read_text(encoding="utf-8"))
        cm, thr = confusion_from_csv(Path(args.confusion).read_text(encoding="utf-8"))
        atomic_write_text(out / "roc.svg", roc_svg(curve))
        atomic_write_text(out / "confusion.svg", confusion_svg(cm, thr))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        run(args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ValidationError, ShapeError, TransferError) as e:
        print(f"xfuse: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, ManifestError, DivergenceError, ContractError, OSError) as e:
        print(f"xfuse: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

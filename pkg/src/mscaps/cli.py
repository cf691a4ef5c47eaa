"""Command-line front end: ``mscaps <subcommand> [flags]``.

Exit status is 0 on success, 1 when a stage fails on its data or files and
2 for usage errors. ``--config FILE`` reads ``key=value`` lines whose keys
are long flag names (``patch-size=9``); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .capsnet import LossConfig, min_patch_size
from .evaluation import confusion, infer_change_map, metrics
from .imageio import read_image, write_image
from .pseudo_label import LabelMap
from .training import Checkpoint, TrainConfig

log = logging.getLogger("mscaps")

MAX_PATCH = 31
BOOL_FLAGS = {"deterministic"}


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _region(text: str) -> tuple[int, int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected r0,c0,r1,c1, got {text!r}")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser, out_help: str = "output directory") -> None:
    p.add_argument("-o", "--out", type=Path, default=Path("."), help=out_help)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    p.add_argument("--config", type=Path, help="key=value file of flag defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--patch-size", type=int, default=d.r)
    p.add_argument("--samples", type=int, default=d.n_samples)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--routing-iters", type=int, default=d.routing_iters)
    p.add_argument("--m-plus", type=float, default=d.loss.m_plus)
    p.add_argument("--m-minus", type=float, default=d.loss.m_minus)
    p.add_argument("--lam", type=float, default=d.loss.lam)


def _label_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--label-window", type=int, default=P.DEFAULT_LABEL_WINDOW,
                   help="odd neighbourhood size for clustering (1 = per pixel)")


def _pair_flags(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--img1", type=Path, required=required)
    p.add_argument("--img2", type=Path, required=required)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="mscaps", description="SAR change detection with a multiscale capsule network.")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("synth", help="write a gamma-speckled synthetic image pair and truth")
    _common(p)
    p.add_argument("--size", type=_size, default=(128, 128), help="HxW")
    p.add_argument("--region", type=_region, action="append", help="r0,c0,r1,c1 (half-open, repeatable)")
    p.add_argument("--looks", type=int, default=4)
    p.add_argument("--contrast", type=float, default=3.0)
    subs["synth"] = p

    p = sub.add_parser("di", help="log-ratio difference image -> di.pgm")
    _common(p)
    _pair_flags(p, required=True)
    subs["di"] = p

    p = sub.add_parser("label", help="hierarchical FCM pseudo labels -> labels.pgm")
    _common(p)
    p.add_argument("--di", type=Path)
    _pair_flags(p)
    _label_flags(p)
    subs["label"] = p

    p = sub.add_parser("train", help="train the network -> model.ckpt")
    _common(p)
    p.add_argument("--di", type=Path)
    p.add_argument("--labels", type=Path)
    _pair_flags(p)
    _label_flags(p)
    _train_flags(p)
    subs["train"] = p

    p = sub.add_parser("infer", help="classify every pixel -> changemap.png")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--di", type=Path)
    _pair_flags(p)
    p.add_argument("--batch-size", type=int, default=256)
    subs["infer"] = p

    p = sub.add_parser("eval", help="score a change map against ground truth -> metrics.txt")
    _common(p, "directory for metrics.txt (omit to only print)")
    p.set_defaults(out=None)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    subs["eval"] = p

    p = sub.add_parser("run", help="all stages in sequence")
    _common(p)
    _pair_flags(p, required=True)
    p.add_argument("--truth", type=Path)
    _label_flags(p)
    _train_flags(p)
    subs["run"] = p

    p = sub.add_parser("sweep", help="rerun the pipeline over patch sizes or sample counts -> sweep.csv")
    _common(p)
    _pair_flags(p, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--axis", choices=("patch-size", "samples"), required=True)
    p.add_argument("--values", type=_int_list, required=True)
    _label_flags(p)
    _train_flags(p)
    subs["sweep"] = p
    return parser, subs


def read_config(path: Path, p: argparse.ArgumentParser) -> dict[str, object]:
    known = {a.dest: a for a in p._actions if a.option_strings}
    out = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest == "config":
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        if dest in BOOL_FLAGS:
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}:{n}: {key} expects a boolean")
            out[dest] = val.lower() in ("true", "1", "yes")
        elif isinstance(known[dest], argparse._AppendAction):
            # repeatable flags take ';'-separated values
            try:
                out[dest] = [known[dest].type(v.strip()) for v in val.split(";")]
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"{path}:{n}: {exc}") from exc
        else:
            out[dest] = val  # strings are converted by argparse using the flag's type
    return out


def _config_path(argv: list[str]) -> Path | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    cfg_path = _config_path(argv)
    if cfg_path is not None and argv and argv[0] in subs:
        p = subs[argv[0]]
        try:
            defaults = read_config(cfg_path, p)
        except UsageError as exc:
            p.error(str(exc))
        p.set_defaults(**defaults)
        for a in p._actions:
            if a.dest in defaults:
                a.required = False
    args = parser.parse_args(argv)
    args._parser = subs[args.command]
    return args


def _check_patch(p: argparse.ArgumentParser, r: int) -> None:
    if r % 2 == 0:
        p.error(f"--patch-size must be odd, got {r}")
    if not min_patch_size() <= r <= MAX_PATCH:
        p.error(f"--patch-size must lie in [{min_patch_size()}, {MAX_PATCH}], got {r}")


def _train_config(args, r: int | None = None, n: int | None = None) -> TrainConfig:
    p = args._parser
    r = args.patch_size if r is None else r
    n = args.samples if n is None else n
    if n < 1:
        p.error(f"--samples must be positive, got {n}")
    if args.epochs < 0 or args.batch_size < 1 or args.routing_iters < 1 or args.lr < 0:
        p.error("--epochs must be >= 0, --batch-size and --routing-iters >= 1, --lr >= 0")
    try:
        loss = LossConfig(args.m_plus, args.m_minus, args.lam)
    except ValueError as exc:
        p.error(str(exc))
    return TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                       routing_iters=args.routing_iters, seed=args.seed, r=r, n_samples=n, loss=loss)


def _check_window(args) -> None:
    w = args.label_window
    if w < 1 or w % 2 == 0:
        args._parser.error(f"--label-window must be a positive odd integer, got {w}")


def _load_truth(path: Path) -> np.ndarray:
    return read_image(path) != 0


def _di_from_args(args):
    """DI from --di, else computed from --img1/--img2."""
    if getattr(args, "di", None) is not None:
        with P.stage("di"):
            return P.dequantize_di(read_image(args.di))
    if args.img1 is None or args.img2 is None:
        args._parser.error("need --di or both --img1 and --img2")
    with P.stage("di"):
        return P.make_di(P.load_pair(args.img1, args.img2))


def cmd_synth(args) -> None:
    p = args._parser
    if args.looks < 1:
        p.error(f"--looks must be >= 1, got {args.looks}")
    if not args.contrast >= 1.0:
        p.error(f"--contrast must be >= 1, got {args.contrast}")
    regions = args.region or [(40, 40, 80, 80)]
    h, w = args.size
    for r0, c0, r1, c1 in regions:
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            p.error(f"--region {r0},{c0},{r1},{c1} is empty or outside the {h}x{w} scene")
    with P.stage("synth"):
        P.write_synth(args.out, args.seed, args.size, regions, args.looks, args.contrast)


def cmd_di(args) -> None:
    di = _di_from_args(args)
    with P.stage("di"):
        args.out.mkdir(parents=True, exist_ok=True)
        write_image(args.out / "di.pgm", P.quantize_di(di))


def cmd_label(args) -> None:
    _check_window(args)
    di = _di_from_args(args)
    with P.stage("label"):
        labels = P.label_scene(di, args.seed, args.label_window)
        args.out.mkdir(parents=True, exist_ok=True)
        write_image(args.out / "labels.pgm", labels.to_gray())
    log.info("labels %s", labels.counts())


def cmd_train(args) -> None:
    _check_patch(args._parser, args.patch_size)
    _check_window(args)
    cfg = _train_config(args)
    di = _di_from_args(args)
    with P.stage("label"):
        if args.labels is not None:
            labels = LabelMap.from_gray(read_image(args.labels))
        else:
            labels = P.label_scene(di, args.seed, args.label_window)
    with P.stage("train"):
        ckpt = P.fit(di, labels, cfg, on_epoch=lambda e, l: log.info("epoch %d loss %.6f", e + 1, l))
        args.out.mkdir(parents=True, exist_ok=True)
        ckpt.save(args.out / "model.ckpt")


def cmd_infer(args) -> None:
    if args.batch_size < 1:
        args._parser.error("--batch-size must be >= 1")
    with P.stage("infer"):
        ckpt = Checkpoint.load(args.model)
    di = _di_from_args(args)
    with P.stage("infer"):
        cm = infer_change_map(di, ckpt, args.batch_size)
        args.out.mkdir(parents=True, exist_ok=True)
        write_image(args.out / "changemap.png", P.change_map_image(cm))


def cmd_eval(args) -> None:
    with P.stage("eval"):
        m = metrics(confusion(read_image(args.map) != 0, _load_truth(args.truth)))
        print(m.record())
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "metrics.txt").write_text(m.record() + "\n")


def cmd_run(args) -> None:
    _check_patch(args._parser, args.patch_size)
    _check_window(args)
    cfg = _train_config(args)
    with P.stage("di"):
        pair = P.load_pair(args.img1, args.img2)
    truth = None
    if args.truth is not None:
        with P.stage("eval"):
            truth = _load_truth(args.truth)
    res = P.run_pipeline(pair, cfg, args.label_window, truth, args.out)
    if res.metrics is not None:
        print(res.metrics.record())


def cmd_sweep(args) -> None:
    p = args._parser
    _check_window(args)
    values = []
    for v in args.values:
        if v in values:
            print(f"warning: duplicate sweep value {v} dropped", file=sys.stderr)
        else:
            values.append(v)
    if not values:
        p.error("--values is empty")
    if args.axis == "patch-size":
        even = [v for v in values if v % 2 == 0]
        if even:
            p.error(f"patch sizes must be odd, got {even}")
        if any(v < 1 or v > MAX_PATCH for v in values):
            p.error(f"patch sizes must lie in [1, {MAX_PATCH}]")
        _train_config(args)
    else:
        if any(v < 1 for v in values):
            p.error("sample counts must be positive")
        _check_patch(p, args.patch_size)
        _train_config(args)
    with P.stage("di"):
        pair = P.load_pair(args.img1, args.img2)
    with P.stage("eval"):
        truth = _load_truth(args.truth)
    with P.stage("di"):
        di = P.make_di(pair)
    with P.stage("label"):
        labels = P.label_scene(di, args.seed, args.label_window)
    rows = []
    for v in values:
        if args.axis == "patch-size" and v < min_patch_size():
            print(f"warning: patch size {v} is below the network minimum {min_patch_size()}; row is NA",
                  file=sys.stderr)
            rows.append([v, "NA", "NA", "NA", "NA", "NA"])
            continue
        cfg = _train_config(args, r=v) if args.axis == "patch-size" else _train_config(args, n=v)
        with P.stage("train"):
            ckpt = P.fit(di, labels, cfg)
        with P.stage("infer"):
            cm = infer_change_map(di, ckpt)
        m = metrics(confusion(cm, truth))
        log.info("%s=%d %s", args.axis, v, m.record())
        rows.append([v, m.FP, m.FN, m.OE, f"{m.PCC:.2f}", f"{m.KC:.2f}"])
    with P.stage("sweep"):
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([args.axis.replace("-", "_"), "FP", "FN", "OE", "PCC", "KC"])
            w.writerows(rows)


COMMANDS = {
    "synth": cmd_synth,
    "di": cmd_di,
    "label": cmd_label,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "run": cmd_run,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with P.deterministic(args.deterministic):
            COMMANDS[args.command](args)
    except SystemExit as exc:  # parser.error inside a command
        return int(exc.code or 0)
    except P.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

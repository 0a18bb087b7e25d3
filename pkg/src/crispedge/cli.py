"""``crispedge`` command line.

Exit codes: 0 success, 2 usage/config error, 3 I/O or format error,
4 numeric failure during training.  Only the human summary goes to stdout;
logs go to stderr and machine-readable results to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_overrides
from .data import (
    AugmentSpec, augment, load_annotation, load_dataset, load_image, load_manifest, save_image, write_dataset,
)
from .errors import ConfigurationError, CorruptCheckpointError, FormatError, NumericError, UsageError
from .evaluate import crispness_report, emit_pr, pr_svg, pr_sweep, read_pr_csv
from .experiment import run_ab, synth_split, train, write_synth_split
from .model import load_checkpoint, multiscale_predict, predict, save_checkpoint

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("crispedge")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = parse_overrides(args.set or [], cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    if args.n is not None:
        cfg = cfg.replace(synth_n=args.n, synth_train=min(cfg.synth_train, args.n - 1) if args.n > 1 else 0)
    if cfg.synth_train < 1:
        raise UsageError("synth needs n >= 2 so that both splits are non-empty")
    paths = write_synth_split(cfg, _out_dir(args.out))
    print(f"synth: {cfg.synth_n} images ({cfg.synth_train} train) -> {paths['train.tsv'].parent}")


def cmd_augment(args, cfg):
    spec = AugmentSpec(
        scale_range=(args.scale_min, args.scale_max),
        scales_per_sample=args.scales,
        rotations=args.rotations,
        flips=(False, True) if args.flip else (False,),
        seed=cfg.seed,
    )
    samples = load_dataset(args.manifest)
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(lambda s: augment(s, spec), samples))
    out = [s for r in results for s in r.samples]
    dropped = sum(r.dropped for r in results)
    write_dataset(out, _out_dir(args.out))
    print(f"augment: {len(samples)} samples -> {len(out)} ({dropped} dropped) in {args.out}")


def cmd_train(args, cfg):
    samples = load_dataset(cfg.train_manifest) if cfg.train_manifest else synth_split(cfg).train
    res = train(cfg, samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(save_checkpoint(res.net))
    log_path = Path(args.loss_log) if args.loss_log else out.with_suffix(".loss.tsv")
    log_path.write_text("epoch\tloss\n" + "".join(f"{i + 1}\t{v:.9g}\n" for i, v in enumerate(res.epoch_loss)))
    print(f"train: {cfg.loss} loss, {cfg.epochs} epochs, final loss {res.epoch_loss[-1]:.6g} -> {out}")


def _read_checkpoint(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return load_checkpoint(data)


def cmd_predict(args, cfg):
    net = _read_checkpoint(args.checkpoint)
    if args.manifest:
        paths = [img for img, _ in load_manifest(args.manifest)]
    else:
        paths = [Path(p) for p in args.images]
    if not paths:
        raise UsageError("predict needs --manifest or image paths")
    out = _out_dir(args.out)
    fn = multiscale_predict if (args.multiscale or cfg.multiscale) else predict
    seen = set()
    for path in paths:
        if path in seen:
            continue
        seen.add(path)
        save_image(out / (path.stem + ".pgm"), fn(net, load_image(path)), maxval=65535)
    print(f"predict: {len(seen)} edge maps -> {out}")


def _load_eval_inputs(pred_dir, manifest):
    preds, gts = [], []
    for img, ann in load_manifest(manifest):
        preds.append(load_image(Path(pred_dir) / (img.stem + ".pgm"), allow_16bit=True))
        gts.append(load_annotation(ann))
    return preds, gts


def cmd_eval(args, cfg):
    preds, gts = _load_eval_inputs(args.pred, args.manifest)
    ecfg = cfg.eval_config()
    if args.nms:
        ecfg.apply_nms = True
    out = _out_dir(args.out)
    if args.crispness:
        rep = crispness_report(preds, gts, ecfg, args.threads)
        (out / "crispness.txt").write_text(rep.to_text())
        emit_pr(rep.pre, out / "pr_pre_nms.csv", out / "pr_pre_nms.svg")
        emit_pr(rep.post, out / "pr_post_nms.csv", out / "pr_post_nms.svg")
        print(f"eval: ODS pre-NMS {rep.pre_nms_ods:.4f}  post-NMS {rep.post_nms_ods:.4f}"
              f"  thickness {rep.thickness_ratio:.3f}")
        return
    rep = pr_sweep(preds, gts, ecfg, args.threads)
    (out / "report.txt").write_text(rep.to_text())
    emit_pr(rep, out / "pr.csv", out / "pr.svg")
    print(f"eval: ODS {rep.ods_f:.4f} @ {rep.ods_threshold:.2f}  OIS {rep.ois_f:.4f}")


def cmd_ab(args, cfg):
    result = run_ab(cfg, args.threads)
    table = result.to_table()
    if args.out:
        out = _out_dir(args.out)
        (out / "ab_table.txt").write_text(table + "\n")
        for name, rep in result.rows.items():
            (out / f"{name}_crispness.txt").write_text(rep.to_text())
            emit_pr(rep.pre, out / f"{name}_pr_pre_nms.csv")
            emit_pr(rep.post, out / f"{name}_pr_post_nms.csv")
    print(table)


class _CsvCurve:
    """Adapter giving a PR csv the attributes pr_svg reads."""

    def __init__(self, arr):
        self.precision, self.recall, f = arr[:, 1], arr[:, 2], arr[:, 3]
        i = int(np.argmax(f))
        self.ods_f, self.ods_precision, self.ods_recall = f[i], arr[i, 1], arr[i, 2]


def cmd_plot(args, cfg):
    curves = [(Path(p).stem, _CsvCurve(read_pr_csv(p))) for p in args.csv]
    Path(args.out).write_text(pr_svg(curves))
    print(f"plot: {len(curves)} curves -> {args.out}")


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="crispedge", description="Crisp edge detection toolkit.")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for eval/augment (default 1)")
    parser.add_argument("--config", help="flat key=value run config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic train/test split")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None, help="number of images (default: synth_n)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="scale/rotate/flip a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", type=int, default=1, help="random scales per sample")
    p.add_argument("--scale-min", type=float, default=0.7)
    p.add_argument("--scale-max", type=float, default=1.3)
    p.add_argument("--rotations", type=int, default=16)
    p.add_argument("--no-flip", dest="flip", action="store_false")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", default=None, help="per-epoch loss TSV (default: <out>.loss.tsv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write 16-bit P5 edge maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--multiscale", action="store_true")
    p.add_argument("images", nargs="*")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="PR sweep, ODS/OIS and optional crispness report")
    p.add_argument("--pred", required=True, help="directory of predicted edge maps")
    p.add_argument("--manifest", required=True, help="ground-truth manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--nms", action="store_true", help="thin predictions before matching")
    p.add_argument("--crispness", action="store_true", help="report pre/post-NMS ODS and thickness")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ab", help="weighted-CE vs fusion crispness comparison")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ab)

    p = sub.add_parser("plot", help="overlay PR curves from csv files")
    p.add_argument("--out", required=True)
    p.add_argument("csv", nargs="+")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (ConfigurationError, UsageError) as exc:
        print(f"crispedge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, CorruptCheckpointError) as exc:
        print(f"crispedge: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"crispedge: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())

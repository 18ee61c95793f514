"""Command-line surface: train, encode, decode, eval, rdplot, bdrate.

Exit codes: 0 on success, 2 on usage errors, 3 on data errors (unreadable
images, malformed bitstreams, incompatible checkpoints, bad curves).
"""

import argparse
import sys
from pathlib import Path

from .config import TrainConfig
from .data import IMAGE_EXTENSIONS, load_image, save_image
from .entropy import Bitstream
from .exceptions import BgvaeError, EvaluationError, IngestionError
from .metrics import EvalReport, EvalRow, bdrate, psnr
from .model import load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3


def _parse_lambdas(spec: str) -> list[float]:
    try:
        values = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad lambda list {spec!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty lambda list")
    return values


def _cmd_train(args) -> int:
    from .distill import train

    config = TrainConfig.from_yaml(args.config)
    if args.seed is not None:
        config.seed = args.seed
    result = train(config, teacher_ckpt=args.teacher, out_dir=args.out)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"metrics:    {result['metrics']}")
    return EXIT_OK


def _cmd_encode(args) -> int:
    model, _ = load_checkpoint(args.checkpoint, use_ema=args.ema)
    x = load_image(args.input)
    stream = model.compress(x, args.lam)
    Path(args.out).write_bytes(stream.to_bytes())
    print(f"{args.out}: {len(stream.payload)} payload bytes, {stream.bpp:.4f} bpp")
    return EXIT_OK


def _cmd_decode(args) -> int:
    model, _ = load_checkpoint(args.checkpoint, use_ema=args.ema)
    stream = Bitstream.from_bytes(Path(args.input).read_bytes())
    recon = model.decompress(stream)
    save_image(recon, args.out)
    print(f"{args.out}: {stream.width}x{stream.height}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint, use_ema=args.ema)
    root = Path(args.directory)
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise IngestionError(f"no images found under {root}")
    report = EvalReport(checkpoint=str(args.checkpoint), label=args.label or root.name)
    for path in paths:
        x = load_image(path)
        for lam in args.lambdas:
            stream = model.compress(x, lam)
            recon = model.decompress(stream)
            report.rows.append(
                EvalRow(path.name, lam, stream.bpp, psnr(x.numpy(), recon[0].numpy()))
            )
    report.to_csv(args.out)
    print(f"{args.out}: {len(report.rows)} rows, "
          f"mean {report.mean_bpp:.4f} bpp / {report.mean_psnr:.2f} dB")
    return EXIT_OK


def curve_labels(reports: list[EvalReport]) -> list[str]:
    """Legend labels; curves after the first are annotated with their BD-rate
    against the first curve when it is computable."""
    labels = []
    for i, report in enumerate(reports):
        label = report.label
        if i > 0:
            try:
                delta = bdrate(reports[0].curve(), report.curve())
                label = f"{label} (BD-rate {delta:+.1f}%)"
            except EvaluationError:
                pass
        labels.append(label)
    return labels


def _cmd_rdplot(args) -> int:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = [EvalReport.from_csv(p) for p in args.reports]
    out = Path(args.out)
    points_csv = out.with_suffix(".csv")
    fig, ax = plt.subplots(figsize=(6, 4.5))
    with open(points_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "bpp", "psnr"])
        for report, label in zip(reports, curve_labels(reports)):
            curve = report.curve()
            for b, p in curve.points:
                writer.writerow([report.label, repr(b), repr(p)])
            ax.plot(curve.bpp, curve.psnr, marker="o", label=label)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.4)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    print(f"wrote {out} and {points_csv}")
    return EXIT_OK


def _cmd_bdrate(args) -> int:
    anchor = EvalReport.from_csv(args.anchor)
    test = EvalReport.from_csv(args.test)
    delta = bdrate(anchor.curve(), test.curve())
    print(f"{delta:+.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgvae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a student or teacher model")
    p.add_argument("--config", required=True, help="YAML training config")
    p.add_argument("--teacher", default=None, help="teacher checkpoint for guidance")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("encode", help="compress a PNG into a .bgv bitstream")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decompress a .bgv bitstream to PNG")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval", help="sweep lambdas over an image directory")
    p.add_argument("directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lambdas", type=_parse_lambdas,
                   default=[64, 128, 256, 512, 1024, 2048, 4096, 8192])
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--label", default="")
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("rdplot", help="plot RD curves from eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True, help="figure path (points CSV sits next to it)")
    p.set_defaults(func=_cmd_rdplot)

    p = sub.add_parser("bdrate", help="BD-rate between two eval reports")
    p.add_argument("anchor")
    p.add_argument("test")
    p.set_defaults(func=_cmd_bdrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BgvaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

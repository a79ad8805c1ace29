"""Command-line front end: ``caecodec {train,encode,decode,eval,rd-curve,bd-rate}``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .container import RateTarget, decode_image, encode_image
from .errors import CodecError
from .fsutil import atomic_write
from .imageio import read_image, write_image
from .metrics import ImageTooSmallError, RdCurve, RdPoint, bd_rate, ms_ssim, psnr, read_rd_csv, weighted_psnr, write_rd_csv
from .network import load_checkpoint, load_params, save_checkpoint, train, write_history_csv
from .pipeline import PlanarImage, ingest_dataset

log = logging.getLogger("caecodec")

DEFAULT_LADDER = "0.12,0.5,1.0,2.4"


def _rates(text):
    try:
        rates = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid rate list {text!r}") from None
    if not rates or any(not r > 0 for r in rates):
        raise argparse.ArgumentTypeError("rates must be positive numbers")
    return rates


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def quality(ref: np.ndarray, test: np.ndarray):
    """(PSNR, MS-SSIM, luma PSNR) for a pair of images.

    Colour images are scored in YCbCr: PSNR is the 6:1:1 weighted mean of
    the plane PSNRs, MS-SSIM is taken on luma. MS-SSIM is NaN for images
    too small for five scales.
    """
    a, b = PlanarImage.from_array(ref).planes, PlanarImage.from_array(test).planes
    if a.shape != b.shape:
        raise CodecError(f"image shapes differ: {ref.shape} vs {test.shape}")
    if a.shape[0] == 3:
        score = weighted_psnr(*(psnr(x, y) for x, y in zip(a, b)))
    else:
        score = psnr(a[0], b[0])
    try:
        ms = ms_ssim(a[0], b[0])
    except ImageTooSmallError as exc:
        log.warning("MS-SSIM skipped: %s", exc)
        ms = math.nan
    return score, ms, psnr(a[0], b[0])


def cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.iterations is not None:
        cfg.train.max_iterations = args.iterations
    source = ingest_dataset(args.dataset, cfg.architecture.patch_size, cfg.patches, cfg.dataset_seed)
    log.info("dataset: %d patches from %d images, %d rejected", len(source), len(source.images), len(source.rejects))
    resume = load_checkpoint(args.resume) if args.resume else None
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)

    def progress(row):
        if (row.iteration + 1) % args.log_every == 0:
            log.info("iter %d  J=%.6g  mse=%.6g  rate=%.6g", row.iteration + 1, row.total, row.mse, row.rate)

    result = train(
        source,
        cfg.train,
        architecture=cfg.architecture,
        resume=resume,
        checkpoint_dir=args.checkpoint_dir,
        progress=progress,
    )
    start = resume.iteration if resume else 0
    save_checkpoint(args.out, result.params, start + len(result.history), result.optimizer)
    if args.history:
        write_history_csv(args.history, result.history)
    log.info("wrote %s", args.out)


def cmd_encode(args):
    image = read_image(args.image)
    params = load_params(args.model)
    h, w = image.shape[:2]
    rate = RateTarget() if args.bpp is None else RateTarget.from_bpp(args.bpp, w, h)
    comp = encode_image(image, params, rate)
    atomic_write(args.out, comp.to_bytes())
    log.info("wrote %s: %d bytes, %.4f bpp", args.out, comp.num_bits // 8, comp.bpp)


def cmd_decode(args):
    data = Path(args.file).read_bytes()
    image = decode_image(data, load_params(args.model))
    write_image(args.out, image)
    log.info("wrote %s", args.out)


def cmd_eval(args):
    if len(args.images) % 2:
        raise CodecError("eval expects reference/test image pairs")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["reference", "test", "psnr_db", "psnr_y_db", "msssim"])
    for ref_path, test_path in zip(args.images[::2], args.images[1::2]):
        score, ms, luma_db = quality(read_image(ref_path), read_image(test_path))
        writer.writerow([ref_path, test_path, repr(score), repr(luma_db), repr(ms)])
        log.info("%s vs %s: %.3f dB, MS-SSIM %.5f", ref_path, test_path, score, ms)
    text = buf.getvalue()
    if args.out:
        atomic_write(args.out, text.encode())
    else:
        sys.stdout.write(text)


def cmd_rd_curve(args):
    image = read_image(args.image)
    params = load_params(args.model)
    h, w = image.shape[:2]
    label = args.label or Path(args.image).stem
    points = []
    for bpp in sorted(args.rates):
        comp = encode_image(image, params, RateTarget.from_bpp(bpp, w, h))
        score, ms, _ = quality(image, decode_image(comp.to_bytes(), params))
        points.append(RdPoint(comp.bpp, score, ms))
        log.info("target %.3f bpp -> %.4f bpp, %.3f dB", bpp, comp.bpp, score)
    if any(b.bpp <= a.bpp for a, b in zip(points, points[1:])):
        log.warning("achieved rates are not strictly increasing; the codec saturated on this image")
    atomic_write(args.out, write_rd_csv([RdCurve(label, points)]).encode())


def cmd_bd_rate(args):
    anchor, test = read_rd_csv(args.anchor), read_rd_csv(args.test)
    pairs = [(k, anchor[k], test[k]) for k in anchor if k in test]
    if not pairs and len(anchor) == 1 and len(test) == 1:
        (ka, ca), (kt, ct) = next(iter(anchor.items())), next(iter(test.items()))
        pairs = [(f"{ka}/{kt}", ca, ct)]
    if not pairs:
        raise CodecError(f"no common curve labels between {args.anchor} and {args.test}")
    results = [(label, bd_rate(a, t)) for label, a, t in pairs]
    mean = float(np.mean([v for _, v in results]))
    if args.report:
        text = "image,bd_rate_percent\n" + "".join(f"{k},{v!r}\n" for k, v in results)
        atomic_write(args.report, text.encode())
    print(round(mean, 4) + 0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caecodec", description="Convolutional-autoencoder image codec.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a directory of images")
    p.add_argument("dataset", help="directory of PPM/PGM training images")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--history", help="CSV of per-iteration loss terms")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--checkpoint-dir", help="directory for periodic checkpoints")
    p.add_argument("--iterations", type=int, help="override max_iterations")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="compress an image")
    p.add_argument("image")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--bpp", type=_positive_float, help="target rate; omit to keep every bitplane")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a .cae file")
    p.add_argument("file")
    p.add_argument("model")
    p.add_argument("--out", required=True, help="output image (.ppm/.pgm, or any Pillow format)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="PSNR and MS-SSIM of image pairs")
    p.add_argument("images", nargs="+", metavar="REF TEST", help="reference/test pairs")
    p.add_argument("--out", help="CSV output (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd-curve", help="encode an image at several rates")
    p.add_argument("image")
    p.add_argument("model")
    p.add_argument("--rates", type=_rates, default=_rates(DEFAULT_LADDER), help=f"comma-separated bpp (default {DEFAULT_LADDER})")
    p.add_argument("--label", help="curve label (default: image file stem)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rd_curve)

    p = sub.add_parser("bd-rate", help="Bjontegaard delta rate of TEST against ANCHOR in percent")
    p.add_argument("anchor")
    p.add_argument("test")
    p.add_argument("--report", help="per-label CSV")
    p.set_defaults(func=cmd_bd_rate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    start = time.perf_counter()
    try:
        args.func(args)
    except (CodecError, OSError, ValueError) as exc:
        print(f"caecodec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: synth -> pack -> train -> predict -> evaluate.

Exit codes: 0 success, 2 usage, 3 I/O failure, 4 data/shape mismatch,
5 training diverged. All commands are deterministic for fixed flags/seeds.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import (
    Sample,
    SynthOpts,
    normalize,
    pack_records,
    read_netpbm,
    read_records,
    resize,
    synth_generate,
    write_netpbm,
)
from .errors import LesionSegError, TrainingDivergedError
from .evaluate import aggregate, confusion, contact_sheet, jaccard, write_report
from .model import (
    ModelConfig,
    TrainConfig,
    build_model,
    checkpoint_load,
    checkpoint_save,
    predict,
    train_step,
)
from .tensor import RngState, rng_perm

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionseg",
        description="Lesion segmentation: synthesize, pack, train, predict, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic image/mask pairs")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=513)
    p.add_argument("--hair-prob", type=float, default=0.3)

    p = sub.add_parser("pack", help="resize pairs and pack them into a record file")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=513)

    p = sub.add_parser("train", help="train a model on packed records")
    p.add_argument("--records", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--fg-weight", type=float, default=100.0)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--crop", type=int, default=513)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--log", default=None,
                   help="loss log CSV path (default: <out>.loss.csv)")

    p = sub.add_parser("predict", help="segment every image in a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-upscale", action="store_true",
                   help="write predictions at crop size instead of original size")

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--threshold", type=float, default=0.650)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--sheets", default=None)
    return parser


def _fail(code: int, message: str) -> int:
    print(f"lesionseg: error: {message}", file=sys.stderr)
    return code


def _mask_id(path: Path) -> str:
    stem = path.stem
    for suffix in ("_pred", "_mask"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def _load_binary_mask(path: Path) -> np.ndarray:
    """Read a 0/255 PGM mask and remap to 0/1."""
    arr = read_netpbm(path)
    if arr.ndim != 2:
        raise LesionSegError(f"{path.name}: mask must be grayscale")
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise LesionSegError(
            f"{path.name}: mask values must be 0 or 255, found {bad.tolist()}")
    return (arr == 255).astype(np.uint8)


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = SynthOpts(count=args.count, seed=args.seed, size=args.size,
                     hair_prob=args.hair_prob)
    samples = synth_generate(opts)
    lines = ["id,orig_h,orig_w"]
    for s in samples:
        write_netpbm(out / f"{s.id}.ppm", s.image)
        write_netpbm(out / f"{s.id}_mask.pgm", s.mask * np.uint8(255))
        lines.append(f"{s.id},{s.orig_h},{s.orig_w}")
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(samples)} image/mask pairs to {out}")
    return EXIT_OK


def cmd_pack(args) -> int:
    src = Path(args.images)
    images = sorted(src.glob("*.ppm"))
    if not images:
        return _fail(EXIT_DATA, f"no .ppm images found in {src}")
    unpaired = [p.stem for p in images if not (src / f"{p.stem}_mask.pgm").exists()]
    if unpaired:
        return _fail(EXIT_DATA, f"images without masks: {', '.join(unpaired)}")

    orig_dims: dict[str, tuple[int, int]] = {}
    manifest = src / "manifest.csv"
    if manifest.exists():
        for line in manifest.read_text().splitlines()[1:]:
            ident, oh, ow = line.split(",")
            orig_dims[ident] = (int(oh), int(ow))

    samples = []
    for img_path in images:
        ident = img_path.stem
        image = read_netpbm(img_path)
        if image.ndim != 3:
            return _fail(EXIT_DATA, f"{img_path.name}: expected an RGB image")
        mask = _load_binary_mask(src / f"{ident}_mask.pgm")
        if mask.shape != image.shape[:2]:
            return _fail(EXIT_DATA, f"{ident}: image/mask dimensions differ")
        oh, ow = orig_dims.get(ident, image.shape[:2])
        samples.append(Sample(
            id=ident,
            image=resize(image, args.size, args.size, "bilinear"),
            mask=resize(mask, args.size, args.size, "nearest"),
            orig_h=oh, orig_w=ow))
    pack_records(samples, args.out)
    print(f"packed {len(samples)} records into {args.out}")
    return EXIT_OK


def _batch_stream(n: int, batch: int, seed: int):
    """Yield index batches, reshuffling each pass; batches may span passes."""
    rng = RngState(seed)
    pending: list[int] = []
    while True:
        perm, rng = rng_perm(rng, n)
        pending.extend(int(i) for i in perm)
        while len(pending) >= batch:
            yield pending[:batch]
            del pending[:batch]


def cmd_train(args) -> int:
    samples = read_records(args.records)
    if not samples:
        return _fail(EXIT_DATA, f"record file {args.records} holds no samples")
    if args.resume:
        model = checkpoint_load(args.resume)
        crop = model.config.crop
    else:
        crop = args.crop
        model = build_model(ModelConfig(crop=crop, base_channels=args.base_channels,
                                        seed=args.seed))
    wrong = [s.id for s in samples if s.image.shape[:2] != (crop, crop)]
    if wrong:
        return _fail(EXIT_DATA,
                     f"records not sized {crop}x{crop}: {', '.join(wrong[:5])}")

    tcfg = TrainConfig(base_lr=args.lr, fg_weight=args.fg_weight, batch=args.batch,
                       max_steps=model.step + args.steps, seed=args.seed)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".loss.csv")
    stream = _batch_stream(len(samples), args.batch, args.seed)
    mode = "a" if (args.resume and log_path.exists()) else "w"
    with open(log_path, mode) as log:
        if mode == "w":
            log.write("step,loss,lr\n")
        try:
            for _ in range(args.steps):
                idx = next(stream)
                images = np.stack([normalize(samples[i].image) for i in idx])
                masks = np.stack([samples[i].mask for i in idx])
                metrics = train_step(model, (images, masks), tcfg)
                log.write(f"{metrics['step']},{metrics['loss']:.6f},"
                          f"{metrics['lr']:.8e}\n")
        except TrainingDivergedError as exc:
            log.flush()
            return _fail(EXIT_DIVERGED,
                         f"training diverged; last finite step {exc.step - 1}")
    checkpoint_save(model, args.out)
    print(f"trained {args.steps} steps -> {args.out} (loss log: {log_path})")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = checkpoint_load(args.checkpoint)
    crop = model.config.crop
    src = Path(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = sorted(src.glob("*.ppm"))
    if not images:
        return _fail(EXIT_DATA, f"no .ppm images found in {src}")
    for img_path in images:
        image = read_netpbm(img_path)
        if image.ndim != 3:
            return _fail(EXIT_DATA, f"{img_path.name}: expected an RGB image")
        h, w = image.shape[:2]
        x = normalize(resize(image, crop, crop, "bilinear"))
        mask = predict(model, x) * np.uint8(255)
        if not args.no_upscale:
            mask = resize(mask, h, w, "nearest")
        write_netpbm(out / f"{img_path.stem}_pred.pgm", mask)
    print(f"wrote {len(images)} predictions to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    preds = {_mask_id(p): p for p in sorted(pred_dir.glob("*.pgm"))}
    gts = {_mask_id(p): p for p in sorted(gt_dir.glob("*.pgm"))}
    if not preds or not set(preds) & set(gts):
        return _fail(EXIT_DATA, "no prediction/ground-truth pairs share an id")
    missing = sorted(set(preds) - set(gts))
    if missing:
        return _fail(EXIT_DATA, f"predictions without ground truth: {', '.join(missing)}")

    sheets_dir = Path(args.sheets) if args.sheets else None
    if sheets_dir is not None:
        sheets_dir.mkdir(parents=True, exist_ok=True)
    ids = sorted(preds)
    values = []
    for ident in ids:
        p = _load_binary_mask(preds[ident])
        g = _load_binary_mask(gts[ident])
        values.append(jaccard(confusion(p, g)))
        if sheets_dir is not None:
            write_netpbm(sheets_dir / f"{ident}_sheet.ppm", contact_sheet(p, g))
    report = aggregate(values, threshold=args.threshold, ids=ids)
    write_report(report, args.report, format=args.format)
    print(f"images {len(ids)}  mean {report.mean:.4f}  median {report.median:.4f}  "
          f"std {report.std:.4f}  success_rate {report.success_rate:.4f} "
          f"@ {report.threshold:.3f}")
    return EXIT_OK


def _validate(args, parser: argparse.ArgumentParser) -> None:
    if args.command == "synth":
        if args.count < 1:
            parser.error("--count must be >= 1")
        if not 0.0 <= args.hair_prob <= 1.0:
            parser.error("--hair-prob must be in [0, 1]")
        if args.size < 2:
            parser.error("--size must be >= 2")
    elif args.command == "pack":
        if args.size < 2:
            parser.error("--size must be >= 2")
    elif args.command == "train":
        if args.steps < 0:
            parser.error("--steps must be >= 0")
        if args.batch < 1:
            parser.error("--batch must be >= 1")
        if args.crop < 17 or args.crop % 16 != 1:
            parser.error("--crop must be 1 mod 16 and >= 17")
        if args.lr <= 0 or args.fg_weight <= 0:
            parser.error("--lr and --fg-weight must be > 0")
    elif args.command == "evaluate":
        if not 0.0 <= args.threshold <= 1.0:
            parser.error("--threshold must be in [0, 1]")


_COMMANDS = {
    "synth": cmd_synth,
    "pack": cmd_pack,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args, parser)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except TrainingDivergedError as exc:
        return _fail(EXIT_DIVERGED, str(exc))
    except LesionSegError as exc:
        return _fail(EXIT_DATA, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))


if __name__ == "__main__":
    sys.exit(main())

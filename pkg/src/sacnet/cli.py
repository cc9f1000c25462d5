"""Command line entry point: ``sacnet <subcommand> ...``."""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("sacnet")


def cmd_gen_data(args) -> int:
    from .data import gen_synthetic, save_dataset

    samples = gen_synthetic(args.seed, args.count, args.size, args.classes)
    save_dataset(samples, args.out, {"seed": args.seed, "size": args.size, "classes": args.classes})
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .trainer import run_training

    cfg = load_config(args.config)
    out = args.out_dir or str(Path(args.config).resolve().parent)
    report = run_training(cfg, resume=args.resume, out_dir=out)
    best = report["best"]
    print(f"best epoch {report['best_epoch']}: mIoU {best['miou']:.4f} mDSC {best['mdsc']:.4f} "
          f"mHD95 {best['mhd95']:.4f}")
    print(f"checkpoint {report['best_checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset, stack
    from .trainer import evaluate, load_model

    model = load_model(args.ckpt)
    images, masks = stack(load_dataset(args.data))
    C = model.cfg.num_classes
    if masks.max() >= C:
        raise ValueError(f"{args.data}: labels reach {masks.max()}, checkpoint model has {C} classes")
    report = evaluate(model, images, masks, C)
    report["samples"] = int(len(images))
    report["checkpoint"] = str(args.ckpt)
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"mIoU {report['miou']:.4f} mDSC {report['mdsc']:.4f} mHD95 {report['mhd95']:.4f} "
          f"over {len(images)} samples -> {args.report}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradchecks import run_checks

    t0 = time.time()
    failed = 0
    for group, name, rep, tol in run_checks(args.op, args.tol):
        status = "ok  " if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{status} {group:<10} {name:<32} rel {rep.max_rel_err:.2e} abs {rep.max_abs_err:.2e} "
              f"tol {tol:g} ({rep.checked} coords)")
    print(f"{'all passed' if not failed else f'{failed} failed'} in {time.time() - t0:.1f}s")
    return 1 if failed else 0


def _read_image(path: Path) -> np.ndarray:
    from .data import ppm_to_image, read_array

    if path.suffix.lower() == ".ppm":
        return ppm_to_image(path)
    img = read_array(path)
    if img.ndim != 3:
        raise ValueError(f"{path}: expected a (3, H, W) image, got shape {img.shape}")
    return img.astype(np.float64)


def cmd_infer(args) -> int:
    from .data import mask_to_pgm, write_array
    from .trainer import predict, load_model

    model = load_model(args.ckpt)
    image = _read_image(Path(args.image))
    want = tuple(model.cfg.input_size)
    if image.shape[1:] != want:
        raise ValueError(f"{args.image}: image is {image.shape[1]}x{image.shape[2]}, model expects "
                         f"{want[0]}x{want[1]}")
    mask = predict(model, image[None])[0].astype(np.uint8)
    out = Path(args.out)
    if out.suffix.lower() == ".pgm":
        mask_to_pgm(mask, out)
    else:
        write_array(out, mask)
    counts = np.bincount(mask.ravel(), minlength=model.cfg.num_classes)
    print(f"wrote {out}; pixels per class {counts.tolist()}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import read_rows

    rows = read_rows(args.log)
    if not rows:
        raise ValueError(f"{args.log}: no epochs logged")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    epochs = [r["epoch"] for r in rows]
    C = sum(1 for k in rows[0] if k.startswith("iou_"))

    def series(key):
        return [r[key] for r in rows]

    written = []
    panels = [
        ("loss.png", "train loss", [("train loss", "train_loss")]),
        ("iou.png", "validation IoU", [("mean", "miou")] + [(f"class {c}", f"iou_{c}") for c in range(C)]),
        ("kappa.png", "kappa", [(f"class {c}", f"kappa_{c}") for c in range(C)]),
    ]
    for fname, ylabel, lines in panels:
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, key in lines:
            ax.plot(epochs, series(key), label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        if len(lines) > 1:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / fname, dpi=100)
        plt.close(fig)
        written.append(str(out / fname))
    print("wrote " + ", ".join(written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sacnet", description="Deformable-conv segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic segmentation dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out-dir", help="base directory for checkpoints/logs (default: config's directory)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--op", default="all", choices=["all", "primitives", "dcnv3", "arfm", "losses", "model"])
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("infer", help="segment one image (.bin array or .ppm)")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="mask file; .pgm for text, otherwise binary array")
    i.set_defaults(func=cmd_infer)

    pl = sub.add_parser("plot", help="draw loss / IoU / kappa curves from metrics.csv")
    pl.add_argument("--log", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

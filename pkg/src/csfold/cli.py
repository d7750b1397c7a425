"""Command-line interface: train, reconstruct, eval, count, noise-sweep, gradcheck.

Exit codes: 0 success, 1 configuration/usage error, 2 I/O error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint
from .config import RunConfig, build_model
from .errors import (
    ConfigurationError,
    ContractError,
    CsfoldError,
    DimensionError,
    ImageIOError,
    NumericalError,
)
from .imageio import load_image, save_image
from .metrics import count_flops, evaluate_image, noise_sweep, psnr, reconstruct_image, ssim
from .training import LrSchedule, PatchDataset, train

IMAGE_SUFFIXES = (".pgm", ".png")


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.from_json(path) if path else RunConfig()


def _list_images(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise ImageIOError(f"{root}: no such directory")
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ImageIOError(f"{root}: no {'/'.join(IMAGE_SUFFIXES)} images found")
    return paths


def _load_gray_images(directory: str) -> list[tuple[str, np.ndarray]]:
    return [(p.name, load_image(p).data[0]) for p in _list_images(directory)]


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    images = []
    for name, img in _load_gray_images(args.data):
        if img.shape[0] < cfg.patch_size or img.shape[1] < cfg.patch_size:
            print(f"note: skipping {name} (smaller than patch size {cfg.patch_size})", file=sys.stderr)
            continue
        images.append(img)
    if not images:
        raise ConfigurationError(f"no image in {args.data} is at least {cfg.patch_size}x{cfg.patch_size}")
    dataset = PatchDataset(
        images=images,
        patch_size=cfg.patch_size,
        patches_per_epoch=cfg.patches_per_epoch,
        augment_enabled=cfg.augment,
        seed=cfg.seed,
    )
    schedule = LrSchedule(
        lr_max=cfg.lr_max, lr_min=cfg.lr_min,
        warmup_epochs=cfg.warmup_epochs, total_epochs=cfg.epochs,
    )
    model = build_model(cfg)
    out_dir = Path(args.out)
    result = train(
        model, dataset, schedule,
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
        out_dir=out_dir, config=cfg,
    )
    for epoch in range(cfg.epochs):
        rows = [r for r in result.metrics if r["epoch"] == epoch]
        mean_loss = sum(r["loss"] for r in rows) / len(rows)
        print(f"epoch {epoch}: mean loss {mean_loss:.6e}, last lr {rows[-1]['lr']:.3e}")
    print(f"wrote {len(result.checkpoints)} checkpoints and metrics.csv to {out_dir}")
    return 0


def cmd_reconstruct(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    image = load_image(args.input)
    recon = reconstruct_image(model, image.data[0])
    save_image(args.output, np.clip(recon, 0.0, 1.0))
    value = psnr(recon, image.data[0])
    print(f"PSNR: {'inf' if math.isinf(value) else f'{value:.4f}'} dB")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    rows = []
    for name, img in _load_gray_images(args.data):
        p, s = evaluate_image(model, img)
        rows.append((name, p, s))
    print("name,psnr_db,ssim")
    for name, p, s in rows:
        print(f"{name},{'inf' if math.isinf(p) else f'{p:.6f}'},{s:.6f}")
    mean_p = float(np.mean([p for _, p, _ in rows]))
    mean_s = float(np.mean([s for _, _, s in rows]))
    print(f"mean,{'inf' if math.isinf(mean_p) else f'{mean_p:.6f}'},{mean_s:.6f}")
    return 0


def cmd_count(args) -> int:
    cfg = _load_config(args.config)
    try:
        h_txt, w_txt = args.hw.lower().split("x")
        h, w = int(h_txt), int(w_txt)
    except ValueError:
        raise ConfigurationError(f"--hw must look like 256x256, got {args.hw!r}") from None
    model = build_model(cfg)
    report = count_flops(model, h, w)
    sys.stdout.write(report.to_csv())
    print(f"# total parameters: {report.total_params / 1e6:.3f}M", file=sys.stderr)
    print(f"# total flops at {h}x{w}: {report.total_flops / 1e9:.2f}G (multiply-add = 2 flops)", file=sys.stderr)
    return 0


def cmd_noise_sweep(args) -> int:
    model, cfg, _ = load_checkpoint(args.ckpt)
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--sigmas must be comma-separated floats, got {args.sigmas!r}") from None
    images = [img for _, img in _load_gray_images(args.data)]
    seed = cfg.seed if args.seed is None else args.seed
    result = noise_sweep(model, images, sigmas, seed)
    out = Path(args.out)
    try:
        out.write_text(result.to_csv())
    except OSError as exc:
        raise ImageIOError(f"{out}: cannot write CSV ({exc})") from exc
    sys.stdout.write(result.to_csv())
    return 0


def cmd_gradcheck(args) -> int:
    failures = gradcheck.run_suite(seeds=args.seeds, float64=args.f64, report=print)
    if failures:
        raise NumericalError(f"{len(failures)} gradient checks failed")
    print("all gradient checks passed")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csfold",
        description="Block-based compressive sensing with a learned sampler and an unrolled cross-attention reconstructor.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a directory of images")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--data", required=True, help="directory of training images (PGM/PNG)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one image through a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="mean PSNR/SSIM over a directory, CSV to stdout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="parameter and FLOP report")
    p.add_argument("--config", default=None, help="JSON run configuration (defaults apply when omitted)")
    p.add_argument("--hw", default="256x256", help="image extents for the FLOP count, e.g. 256x256")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("noise-sweep", help="reconstruction quality vs input noise level")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sigmas", required=True, help="comma-separated ascending noise levels, e.g. 0,0.02,0.05")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=None, help="noise seed (defaults to the checkpoint's seed)")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--f64", action="store_true", help="run in the 64-bit test mode (tolerance 1e-4)")
    p.add_argument("--seeds", type=int, default=10, help="number of random seeds (default 10)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigurationError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ImageIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CsfoldError as exc:  # pragma: no cover - base-class fallback
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:  # console-script shim
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

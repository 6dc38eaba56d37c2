"""Command-line interface.

Exit codes: 0 success, 2 configuration or usage errors, 3 runtime failures.
Every run that takes a configuration prints the fully resolved key=value
form before doing any work. Setting CYCLEMOD_DETERMINISTIC=1 pins torch to
one thread and zeroes the ``seconds`` field of metrics lines so repeated
runs produce bit-identical logs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch
from PIL import Image

from .config import (
    ConfigError,
    ExperimentConfig,
    PRESETS,
    apply_overrides,
    format_config,
    parse_config_text,
    preset,
)
from .data import ToyDomainSpec, make_toy_dataset, tensor_to_image, to_tensor
from .evaluation import evaluate, make_extractor
from .pretrain import run_pretraining
from .trainer import (
    TrainingDiverged,
    deterministic_mode,
    load_generator_for_inference,
    run_training,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="full", choices=sorted(PRESETS), help="base configuration")
    p.add_argument("--config", help="flat key=value config file applied over the preset")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="single key override; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclemod",
        description="Unpaired image translation: pretraining, training, inference, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="inpainting pretraining of the generator")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset root with trainA/trainB")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="adversarial translation training")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset root with trainA/trainB")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pretrained", help="generator checkpoint from pretraining")
    p.add_argument("--resume", help="training checkpoint to continue from")

    p = sub.add_parser("translate", help="run a trained generator over a folder")
    p.add_argument("--ckpt", required=True, help="training checkpoint")
    p.add_argument("--input", required=True, help="folder of source images")
    p.add_argument("--out", required=True, help="output folder for translations")
    p.add_argument("--direction", default="ab", choices=("ab", "ba"))
    p.add_argument("--no-ema", action="store_true", help="use live instead of averaged weights")

    p = sub.add_parser("evaluate", help="metric report for a translated folder")
    _add_config_args(p)
    p.add_argument("--translated", required=True)
    p.add_argument("--target", required=True, help="real images of the target domain")
    p.add_argument("--source", required=True, help="source images paired with the translations")
    p.add_argument("--protocol", choices=("lq_legacy", "hq_adhoc", "consistent"))
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--landmarks-source", help="folder of per-image landmark JSON files")
    p.add_argument("--landmarks-translated", help="folder of per-image landmark JSON files")

    p = sub.add_parser("grid", help="side-by-side input/translation sheet")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--direction", default="ab", choices=("ab", "ba"))
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("inputs", nargs="+", help="source image paths, one row each")

    p = sub.add_parser("make-toy", help="write the synthetic two-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--test-count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = preset(args.preset)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config_text(path.read_text(), base=cfg)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    return cfg


def _print_config(cfg: ExperimentConfig) -> None:
    print("resolved configuration:")
    print(format_config(cfg), end="")


def _prep_input(img: Image.Image, size: int) -> Image.Image:
    from .data import resize_smaller_side

    if img.size == (size, size):
        return img
    img = resize_smaller_side(img, size, resample=Image.LANCZOS)
    w, h = img.size
    left, top = (w - size) // 2, (h - size) // 2
    return img.crop((left, top, left + size, top + size))


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _print_config(cfg)
    paths = run_pretraining(cfg, args.data, args.out)
    print(f"pretrained checkpoint: {paths['checkpoint']}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _print_config(cfg)
    try:
        paths = run_training(
            cfg, args.data, args.out, pretrained=args.pretrained, resume=args.resume
        )
    except TrainingDiverged as err:
        snapshot = Path(args.out) / "diverged.json"
        snapshot.parent.mkdir(parents=True, exist_ok=True)
        snapshot.write_text(json.dumps(err.metrics, indent=2) + "\n")
        print(f"training diverged: {err} (snapshot at {snapshot})", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"final checkpoint: {paths['checkpoint']}")
    return EXIT_OK


def cmd_translate(args: argparse.Namespace) -> int:
    gen, cfg = load_generator_for_inference(args.ckpt, args.direction, use_ema=not args.no_ema)
    _print_config(cfg)
    in_dir = Path(args.input)
    files = sorted(
        p for p in in_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    ) if in_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no images under {in_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = cfg.generator.image_size
    with torch.no_grad():
        for path in files:
            with Image.open(path) as img:
                tensor = to_tensor(_prep_input(img.convert("RGB"), size)).unsqueeze(0)
            translated = gen(tensor)[0]
            tensor_to_image(translated).save(out_dir / (path.stem + ".png"))
    print(f"translated {len(files)} images into {out_dir}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.protocol:
        cfg.eval.kind = args.protocol
        cfg.validate()
    _print_config(cfg)
    extractor = make_extractor(cfg.eval.extractor)
    report = evaluate(
        args.translated,
        args.target,
        args.source,
        cfg.eval,
        extractor=extractor,
        landmarks_source=args.landmarks_source,
        landmarks_translated=args.landmarks_translated,
    )
    report.write_json(args.out)
    print(
        f"protocol={report.protocol} fid={report.fid:.6g} kid={report.kid_mean:.6g}"
        f" psnr={report.psnr:.4g} ssim={report.ssim:.4g} report={args.out}"
    )
    return EXIT_OK


def cmd_grid(args: argparse.Namespace) -> int:
    gen, cfg = load_generator_for_inference(args.ckpt, args.direction, use_ema=not args.no_ema)
    _print_config(cfg)
    size = cfg.generator.image_size
    rows = []
    with torch.no_grad():
        for path in args.inputs:
            with Image.open(path) as img:
                prepped = _prep_input(img.convert("RGB"), size)
            tensor = to_tensor(prepped).unsqueeze(0)
            rows.append((prepped, tensor_to_image(gen(tensor)[0])))
    sheet = Image.new("RGB", (2 * size, size * len(rows)))
    for i, (left, right) in enumerate(rows):
        sheet.paste(left, (0, i * size))
        sheet.paste(right, (size, i * size))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(out)
    print(f"grid with {len(rows)} rows written to {out}")
    return EXIT_OK


def cmd_make_toy(args: argparse.Namespace) -> int:
    spec = ToyDomainSpec(
        image_size=args.image_size,
        train_count=args.train_count,
        test_count=args.test_count,
        seed=args.seed,
    )
    root = make_toy_dataset(args.out, spec)
    print(f"toy dataset written to {root}")
    return EXIT_OK


_HANDLERS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "make-toy": cmd_make_toy,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if deterministic_mode():
        torch.set_num_threads(1)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - CLI boundary maps failures to exit 3
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())

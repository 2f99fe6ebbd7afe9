"""``stylecodes`` command line.

stdout carries only the primary result; diagnostics go to stderr.
Exit codes: 0 ok, 2 usage/format, 3 checkpoint, 4 version mismatch.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, datagen, diffusion, trainer
from .errors import (CheckpointError, ConfigError, FormatError, StylecodesError, TrainingAborted,
                     ValidationError, VersionMismatch)
from .unet import CLASSES, NULL_PROMPT

log = logging.getLogger("stylecodes")

EXIT_OK, EXIT_USAGE, EXIT_CKPT, EXIT_VERSION = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _strict_context(strict: bool):
    if not strict:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def load_png(path, size: int = 32) -> np.ndarray:
    """8-bit PNG of any size -> ``[3, size, size]`` in [-1, 1] (area-average resize)."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except FileNotFoundError:
        raise CliError(f"image not found: {path}") from None
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise CliError(f"cannot read PNG {path}: {exc}") from None
    if rgb.size != (size, size):
        rgb = rgb.resize((size, size), Image.Resampling.BOX)
    arr = np.asarray(rgb, dtype=np.float32).transpose(2, 0, 1)
    return arr / 127.5 - 1.0


def _load_model(path, require_style=False):
    from .model import load_model

    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_CKPT)
    return load_model(path, require_style=require_style)


def _writable_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory not writable: {p} ({exc})") from None
    return p


def _writable_file(path) -> Path:
    p = Path(path)
    _writable_dir(p.parent if str(p.parent) else ".")
    return p


def _parse_prompt(name):
    if name is None or name == "none":
        return NULL_PROMPT
    if name not in CLASSES:
        raise CliError(f"unknown class {name!r}; valid classes: {', '.join(CLASSES)}")
    return CLASSES.index(name)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_datagen(args):
    if args.styles < 2:
        raise CliError("need ≥2 styles")
    out = _writable_dir(args.out)
    ds = datagen.build_dataset(args.styles, args.per_style, args.seed)
    if args.holdout > 0:
        datagen.attach_holdout(ds, args.holdout, args.seed)
    datagen.write_dataset(ds, out)
    print(f"entries\t{len(ds)}")
    print(f"manifest_sha256\t{datagen.manifest_hash(ds.manifest)}")


def cmd_train(args):
    overrides = {"phase": args.phase, "steps": args.steps, "batch_size": args.batch_size, "lr": args.lr,
                 "seed": args.seed, "T": args.T, "eval_every": args.eval_every}
    if args.strict:
        overrides["strict_deterministic"] = True
    if args.config:
        cfg = trainer.TrainConfig.from_json(args.config, **overrides)
    else:
        cfg = trainer.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    ds = datagen.load_dataset(args.dataset)
    if "holdout" in ds.manifest:
        ds, _ = datagen.split_from_manifest(ds)
    out = _writable_file(args.out)
    log_path = args.log or str(out) + ".log.jsonl"
    if cfg.phase == "pretrain":
        trainer.pretrain_base(ds, cfg, out, log_path)
    else:
        if not args.base:
            raise CliError("--base checkpoint is required for the joint phase")
        base = _load_model(args.base)
        trainer.train_stylecodes(ds, base, cfg, out, log_path)
    print(out)


def cmd_encode(args):
    model = _load_model(args.ckpt, require_style=True)
    img = load_png(args.image, model.cfg.image_size)
    print(model.encode_code(img))


def cmd_decode(args):
    print(json.dumps([float(v) for v in codec.decode_code(args.code)]))


def cmd_generate(args):
    if args.code and args.image:
        raise CliError("--code and --image are mutually exclusive")
    if args.prompt and args.prompts:
        raise CliError("--prompt and --prompts are mutually exclusive")
    names = args.prompts.split(",") if args.prompts else [args.prompt]
    prompts = [_parse_prompt(n) for n in names]
    if args.code:
        codec.validate_code(args.code)
    out = _writable_file(args.out)
    model = _load_model(args.ckpt, require_style=bool(args.code or args.image))
    source = None
    code = args.code
    if args.image:
        source = load_png(args.image, model.cfg.image_size)
        code = model.encode_code(source)
    latent = model.decode_code(code) if code else None
    sampler = diffusion.SamplerConfig(args.sampler, args.steps, args.eta, args.cfg_text, args.seed, args.clip_x0)
    styles = None if latent is None else np.repeat(latent[None], len(prompts), axis=0)
    imgs = model.generate(prompts, styles, [args.seed] * len(prompts), sampler, args.cfg_style)
    if len(prompts) == 1 and not args.prompts:
        datagen.write_png(out, imgs[0])
    else:
        tiles = ([source] if source is not None else []) + list(imgs)
        datagen.write_png(out, np.concatenate(tiles, axis=2))
        if args.figure:
            from .report import plot_grid

            plot_grid(source, imgs, names, args.figure, code)
    if code:
        print(code, file=sys.stderr)
    print(out)


def cmd_eval(args):
    from .evaluate import eval_style_transfer

    model = _load_model(args.ckpt)
    ds = datagen.load_dataset(args.dataset)
    try:
        _, ev = datagen.split_from_manifest(ds)
    except ConfigError as exc:
        raise CliError(str(exc)) from None
    if not args.oracle and not model.has_style:
        raise CliError("checkpoint has no style/control parameters", EXIT_CKPT)
    sampler = diffusion.SamplerConfig("ddim", args.steps, args.eta, args.cfg_text, clip_x0=args.clip_x0)
    metrics = eval_style_transfer(model, ev, args.n, args.k, args.seed, sampler, oracle=args.oracle,
                                  style_scale=args.cfg_style)
    metrics["checkpoint"] = str(args.ckpt)
    validate_metrics(metrics)
    text = json.dumps(metrics, indent=1, sort_keys=True)
    if args.out:
        _writable_file(args.out).write_text(text + "\n")
        if args.figure:
            from .report import plot_retrieval

            plot_retrieval(metrics, args.figure)
    print(text)


def cmd_report(args):
    from .report import plot_retrieval, plot_training

    out = _writable_dir(args.out)
    written = []
    if args.log:
        logs = {Path(p).stem: p for p in args.log}
        written.append(plot_training(logs, out / "training_loss.png"))
    if args.metrics:
        metrics = json.loads(Path(args.metrics).read_text())
        validate_metrics(metrics)
        written.append(plot_retrieval(metrics, out / "retrieval.png"))
        with (out / "retrieval.tsv").open("w") as fh:
            fh.write("style\tcode\taccuracy\tintra\tinter\n")
            for r in metrics["per_style"]:
                fh.write(f"{r['style']}\t{r['code']}\t{r['accuracy']:.4f}\t{r['intra']:.4f}\t{r['inter']:.4f}\n")
        written.append(out / "retrieval.tsv")
    for p in written:
        print(p)


def metrics_schema() -> dict:
    from importlib import resources

    return json.loads(resources.files("stylecodes").joinpath("schemas/metrics.schema.json").read_text())


def validate_metrics(metrics: dict) -> None:
    import jsonschema

    jsonschema.validate(metrics, metrics_schema())


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stylecodes", description=__doc__.splitlines()[0])
    ap.add_argument("--strict-deterministic", action="store_true",
                    help="single-threaded BLAS for bit-reproducible results")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="write a procedural style dataset")
    p.add_argument("--styles", type=int, required=True)
    p.add_argument("--per-style", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.25, help="fraction of styles held out (0 disables)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="pretrain the base or train the style modules")
    p.add_argument("--phase", choices=["pretrain", "joint"], required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="base checkpoint (joint phase)")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--log")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="print the stylecode of a PNG image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="print the dequantized latent of a stylecode as JSON")
    p.add_argument("--code", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("generate", help="sample an image (or a prompt grid) from a stylecode")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--code")
    p.add_argument("--image", help="source style image; encoded to a stylecode first")
    p.add_argument("--prompt")
    p.add_argument("--prompts", help="comma-separated classes: grid mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--sampler", choices=["ddim", "ddpm"], default="ddim")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--clip-x0", action="store_true", help="clip the predicted clean image to [-1, 1] each step")
    p.add_argument("--cfg-text", type=float, default=1.0)
    p.add_argument("--cfg-style", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="grid mode: also write a labelled matplotlib figure here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="style retrieval accuracy on held-out styles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--eta", type=float, default=0.0, help="DDIM stochasticity, 0 deterministic, 1 ancestral")
    p.add_argument("--clip-x0", action="store_true", help="clip the predicted clean image to [-1, 1] each step")
    p.add_argument("--cfg-text", type=float, default=1.0)
    p.add_argument("--cfg-style", type=float, default=1.0)
    p.add_argument("--oracle", action="store_true", help="metric self-test on ground-truth renders")
    p.add_argument("--out", help="write metrics JSON here")
    p.add_argument("--figure", help="write the per-style accuracy figure here (needs --out)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures from training logs and metrics")
    p.add_argument("--log", action="append", help="JSONL training log (repeatable)")
    p.add_argument("--metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _strict_context(args.strict_deterministic):
            args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except VersionMismatch as exc:
        print(f"error: {exc} (found {exc.found}, expected {exc.expected})", file=sys.stderr)
        return EXIT_VERSION
    except FormatError as exc:
        where = f" (position {exc.position})" if exc.position is not None else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except TrainingAborted as exc:
        print(f"error: {exc}; last good checkpoint: {exc.last_good}", file=sys.stderr)
        return 1
    except (ConfigError, ValidationError, StylecodesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

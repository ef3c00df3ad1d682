"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from ..foundation import GenImgError
from ..inferers import TileSpec, ood_score
from ..metrics import MetricReport, config_hash, write_reports
from .config import TrainingConfig
from .data import DatasetManifest, ShapeWorldSpec, generate_shapeworld
from .evaluation import GUIDANCE_WEIGHTS, PrototypeAligner, evaluate, sweep_guidance
from .io import read_array, read_raw, write_array, write_raw
from .training import load_estimator, train_autoencoder, train_controlnet, train_diffusion, train_transformer

log = logging.getLogger("genimg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def read_images(path, split: Optional[str] = None):
    """Images from a manifest (``.json``) or a single image/array file, as ``(N, C, *S)``."""
    p = Path(path)
    if p.suffix == ".json":
        return DatasetManifest.load(p).load_split(split)
    if p.suffix == ".gra":
        a = read_raw(p)
    elif p.suffix == ".png":
        a = read_array(p, "png_2d")[None, None]
    elif p.suffix in (".nii", ".gz"):
        a = read_array(p, "nifti_3d")[None, None]
    else:
        raise GenImgError(f"unsupported input file {path}")
    return torch.as_tensor(np.asarray(a, dtype=np.float32)), None, None, None


def write_images(out_dir, images: torch.Tensor, prefix: str = "sample") -> None:
    """Exact float32 array (``<prefix>s.gra``) plus one preview file per image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arr = images.detach().float().numpy()
    write_raw(out / f"{prefix}s.gra", arr)
    fmt, ext = ("png_2d", ".png") if arr.ndim == 4 else ("nifti_3d", ".nii")
    for i, img in enumerate(arr):
        write_array(out / f"{prefix}_{i:04d}{ext}", np.clip(img[0], 0, 1), fmt)


def _training_config(args) -> TrainingConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.manifest:
        overrides.append(f"data.manifest={args.manifest}")
    return TrainingConfig.from_file(args.config, overrides)


def cmd_make_data(args) -> int:
    spec = ShapeWorldSpec.from_file(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    man = generate_shapeworld(spec, args.n, args.out)
    print(f"wrote {len(man.items)} items to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _training_config(args)
    if args.command == "train-autoencoder":
        path = train_autoencoder(cfg)
    elif args.command == "train-diffusion":
        path = train_diffusion(cfg, args.autoencoder)
    elif args.command == "train-transformer":
        path = train_transformer(cfg, args.vqvae)
    else:
        path = train_controlnet(cfg, args.diffusion)
    print(path)
    return 0


def _sample_settings(args) -> dict:
    return {"checkpoint": str(args.checkpoint), "n": args.n, "seed": args.seed or 0, "prompt": args.prompt,
            "guidance": args.guidance, "steps": args.steps, "scheduler": args.scheduler, "eta": args.eta,
            "temperature": args.temperature}


def cmd_sample(args) -> int:
    if args.from_manifest:
        settings = json.loads(Path(args.from_manifest).read_text())["settings"]
    else:
        if not args.checkpoint:
            raise UsageError("sample: --checkpoint or --from-manifest is required")
        settings = _sample_settings(args)
    est, _ = load_estimator(settings["checkpoint"])
    from ..estimators import LatentDiffusion, LatentTransformer

    if isinstance(est, LatentDiffusion):
        images = est.sample(settings["n"], settings["prompt"], settings["guidance"], settings["steps"],
                            settings["scheduler"], settings["seed"], settings["eta"])
    elif isinstance(est, LatentTransformer):
        images = est.sample(settings["n"], settings["seed"], settings["temperature"])
    else:
        raise GenImgError("sample needs a diffusion or transformer checkpoint")
    write_images(args.out, images)
    manifest = {"settings": settings, "checkpoint_sha256": _sha256(settings["checkpoint"]),
                "samples": "samples.gra"}
    (Path(args.out) / "sample_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(images)} samples to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    est, meta = load_estimator(args.checkpoint)
    images, captions, paired, _ = read_images(args.manifest, args.split)
    seed = args.seed or 0
    chash = meta.get("config_hash") or config_hash({"checkpoint": _sha256(args.checkpoint)})
    reports = evaluate(est, images, captions, paired, args.n_samples, seed, chash, args.steps)
    _emit(reports, args.out)
    return 0


def _emit(reports: Sequence[MetricReport], out: Optional[str]) -> None:
    if out:
        write_reports(out, reports)
    for r in reports:
        print(r.to_json())


def cmd_ood_score(args) -> int:
    est, meta = load_estimator(args.checkpoint)
    if not hasattr(est, "score_samples"):
        raise GenImgError("ood-score needs a transformer checkpoint")
    x_in = read_images(args.in_data, args.split)[0]
    x_out = read_images(args.out_data, args.split)[0]
    res = ood_score(lambda x: torch.as_tensor(est.score_samples(x)), x_in, x_out, args.seed or 0,
                    meta.get("config_hash"))
    _emit([res["report"]], args.out)
    if args.scores:
        with open(args.scores, "w") as fh:
            fh.write("set,index,score\n")
            for tag, arr in (("in", res["scores_in"]), ("out", res["scores_out"])):
                for i, v in enumerate(arr):
                    fh.write(f"{tag},{i},{float(v)!r}\n")
    return 0


def cmd_translate(args) -> int:
    est, _ = load_estimator(args.checkpoint)
    if not hasattr(est, "controlnet_"):
        raise GenImgError("translate needs a ControlNet checkpoint")
    images, _, paired, _ = read_images(args.input, args.split)
    cond = paired if paired is not None else images
    out = est.predict(cond, seed=args.seed or 0, num_inference_steps=args.steps)
    write_images(args.out, out, "translated")
    print(f"wrote {len(out)} images to {args.out}")
    return 0


def cmd_upscale(args) -> int:
    est, _ = load_estimator(args.checkpoint)
    if not hasattr(est, "aug_schedule"):
        raise GenImgError("upscale needs an upscaler checkpoint")
    low = read_images(args.input, args.split)[0]
    if args.downsample:
        low = est.downsample(low)
    tiles = None
    if args.tile:
        dims = _ints(args.tile)
        overlap = _ints(args.overlap) if args.overlap else (0,) * len(dims)
        tiles = TileSpec(dims, overlap, args.blend)
    out = est.predict(low, args.noise_level, tiles, args.seed or 0, args.steps)
    write_images(args.out, out, "upscaled")
    print(f"wrote {len(out)} images to {args.out}")
    return 0


def cmd_sweep_guidance(args) -> int:
    est, meta = load_estimator(args.checkpoint)
    if not getattr(est, "cross_attention_dim", None):
        raise GenImgError("sweep-guidance needs a text-conditioned diffusion checkpoint")
    images, captions, _, labels = read_images(args.manifest, args.split)
    class_names = args.classes.split(",")
    aligner = PrototypeAligner(class_names).fit(images, labels)
    prompts = [f"a {class_names[i % len(class_names)]}" for i in range(args.n_samples)]
    weights = _floats(args.weights) if args.weights else GUIDANCE_WEIGHTS
    rows = sweep_guidance(est, prompts, images, aligner, weights, args.seed or 0, args.steps,
                          meta.get("config_hash"))
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genimg", description="Generative models for medical-style images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
        p.set_defaults(fn=fn)
        return p

    p = add("make-data", cmd_make_data, "Render a synthetic shapeworld dataset.")
    p.add_argument("--spec", required=True, help="INI file with a [shapeworld] section")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)

    for name, extra, help_text in (
        ("train-autoencoder", None, "Train a KL or VQ compression model."),
        ("train-diffusion", ("--autoencoder", False), "Train a (latent) diffusion model or upscaler."),
        ("train-transformer", ("--vqvae", True), "Train a transformer over VQ-VAE tokens."),
        ("train-controlnet", ("--diffusion", True), "Train a ControlNet on a frozen diffusion model."),
    ):
        p = add(name, cmd_train, help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        p.add_argument("--manifest", help="overrides data.manifest")
        if extra:
            p.add_argument(extra[0], required=extra[1], help="upstream checkpoint")

    p = add("sample", cmd_sample, "Draw samples from a diffusion or transformer checkpoint.")
    p.add_argument("--checkpoint")
    p.add_argument("--from-manifest", help="re-run the settings of an earlier sample_manifest.json")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--prompt")
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--scheduler", choices=("ddpm", "ddim", "pndm"), default="ddim")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "Compute metric reports for a checkpoint on a test split.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--n-samples", type=int, default=64)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", help="JSON-lines report path")

    p = add("ood-score", cmd_ood_score, "Score in- and out-of-distribution images by likelihood.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-data", required=True)
    p.add_argument("--out-data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scores", help="CSV of per-image scores")
    p.add_argument("--out", help="JSON-lines report path")

    p = add("translate", cmd_translate, "Translate conditioning images with a ControlNet checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="manifest (paired images used) or array file")
    p.add_argument("--split", default="test")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True)

    p = add("upscale", cmd_upscale, "Super-resolve low-resolution images.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--downsample", action="store_true", help="downsample the input first (for testing)")
    p.add_argument("--noise-level", type=int, default=1)
    p.add_argument("--tile", help="tile dims in low-res pixels, e.g. 8,8")
    p.add_argument("--overlap", help="tile overlap, e.g. 2,2")
    p.add_argument("--blend", choices=("average", "linear_ramp"), default="linear_ramp")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True)

    p = add("sweep-guidance", cmd_sweep_guidance, "FID and alignment across guidance weights.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--classes", default="disc,square,cross")
    p.add_argument("--weights", help="comma-separated guidance weights")
    p.add_argument("--n-samples", type=int, default=32)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out")
    return parser


def _check_flags(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Name the first unknown ``--flag`` before argparse complains about anything else."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    cmd = next((a for a in argv if not a.startswith("-")), None)
    if cmd is None or cmd not in sub.choices:
        return
    known = set(parser._option_string_actions) | set(sub.choices[cmd]._option_string_actions)
    for a in argv:
        if a.startswith("--") and a.split("=", 1)[0] not in known:
            raise UsageError(f"genimg {cmd}: unrecognized flag {a.split('=', 1)[0]}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _check_flags(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("genimg: a subcommand is required")
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (GenImgError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())

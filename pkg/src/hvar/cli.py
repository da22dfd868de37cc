"""Command-line entry point: ``hvar <command> ...``."""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import CheckpointMismatch, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .formats import FormatError
from .imageio import read_png, write_png
from .metrics import evaluate, write_report
from .pipeline import (build_rqvae, build_var, make_pairs, rqvae_from_checkpoint, super_resolve,
                       to_checkpoint, var_from_checkpoint)
from .quantizer import read_tokens, write_tokens
from .resample import Image
from .synth import generate_dataset, load_directory, write_dataset
from .var import Sampler, train_var

log = logging.getLogger("hvar")

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_FORMAT = 4
SCALE_FACTORS = {1: 1, 2: 2, 4: 3}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        self.code, self.kind = code, kind
        super().__init__(message)


# manifests ---------------------------------------------------------------------------
def git_blob_digest(data: bytes) -> str:
    """SHA-1 over ``b"blob <len>\\0" + data``, the object id git would assign."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(directory: str, command: str, cfg: RunConfig, argv: list[str],
                   outputs: list[str]) -> str:
    os.makedirs(directory, exist_ok=True)
    text = cfg.to_text()
    path = os.path.join(directory, "manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"command = {command}\n")
        fh.write(f"argv = {' '.join(argv)}\n")
        fh.write(f"version = {__version__}\n")
        fh.write(f"seed = {cfg.seed}\n")
        fh.write(f"config_digest = {git_blob_digest(text.encode())}\n")
        for out in outputs:
            fh.write(f"output = {os.path.basename(out)}\n")
        fh.write("[config]\n")
        fh.write(text)
    return path


# helpers ------------------------------------------------------------------------------
def _need_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise CliError(EXIT_INPUT, "missing-file", f"{what} not found: {path}")
    return path


def _parse_sets(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(EXIT_USAGE, "usage", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _config(args) -> RunConfig:
    if args.config:
        _need_file(args.config, "config file")
    try:
        cfg = load_config(args.config, args.preset, _parse_sets(args.set))
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_USAGE, "config", str(exc)) from None
    if args.seed is not None:
        cfg = cfg.updated(seed=args.seed)
    return cfg


def _dataset(args, cfg: RunConfig) -> np.ndarray:
    if args.data:
        if not os.path.isdir(args.data):
            raise CliError(EXIT_INPUT, "missing-file", f"dataset directory not found: {args.data}")
        data = load_directory(args.data)
    else:
        data = generate_dataset(cfg.dataset())
    if data.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise CliError(EXIT_INPUT, "shape", f"images are {data.shape[-2:]}, config expects "
                                            f"{cfg.image_size}x{cfg.image_size}")
    return data


def _load_rqvae(path: str):
    ckpt = load_checkpoint(_need_file(path, "autoencoder checkpoint"), kind="rqvae")
    model, cfg = rqvae_from_checkpoint(ckpt)
    return model, cfg, ckpt


def _out_dir(path: str) -> str:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


# commands -----------------------------------------------------------------------------
def cmd_synth(args) -> None:
    cfg = _config(args)
    if args.count is not None:
        cfg = cfg.updated(dataset_count=args.count)
    if args.resolution is not None:
        cfg = cfg.updated(image_size=args.resolution)
    spec = cfg.dataset(seed=cfg.seed if args.seed is not None else None)
    paths = write_dataset(args.out, spec)
    write_manifest(args.out, "synth", cfg, args.argv, paths)
    print(f"wrote {len(paths)} images to {args.out}")


def cmd_rqvae_train(args) -> None:
    from .autoencoder import finetune_vocabulary, train_rqvae

    cfg = _config(args)
    data = _dataset(args, cfg)
    model = build_rqvae(cfg)
    history = train_rqvae(model, data, cfg.rqvae_training())
    if cfg.vocab_finetune_steps:
        for d in model.decoders:
            d.set_trainable(False)
        finetune_vocabulary(model, data, steps=cfg.vocab_finetune_steps, seed=cfg.seed)
        for d in model.decoders:
            d.set_trainable(True)
    out_dir = _out_dir(args.out)
    save_checkpoint(args.out, to_checkpoint(model, cfg, "rqvae", len(history)))
    write_manifest(out_dir, "rqvae-train", cfg, args.argv, [args.out])
    print(f"saved autoencoder checkpoint {args.out} (final loss {history[-1].total:.5f})")


def cmd_tokenize(args) -> None:
    model, cfg, _ = _load_rqvae(args.checkpoint)
    img = read_png(_need_file(args.image, "image"))
    if img.shape[1:] != (cfg.image_size, cfg.image_size):
        raise CliError(EXIT_INPUT, "shape", f"image is {img.shape[1:]}, checkpoint expects "
                                            f"{cfg.image_size}x{cfg.image_size}")
    tokens = model.tokenize(img)
    write_tokens(args.out, tokens, cfg.codebook_size)
    write_manifest(_out_dir(args.out), "tokenize", cfg, args.argv, [args.out])
    print(f"wrote {len(tokens)} tokens to {args.out}")


def cmd_decode(args) -> None:
    model, cfg, _ = _load_rqvae(args.checkpoint)
    tokens, vocab = read_tokens(_need_file(args.tokens, "token file"))
    if tokens.schedule != cfg.schedule or vocab != cfg.codebook_size:
        raise CliError(EXIT_INPUT, "incompatible", "token file schedule/vocabulary does not match checkpoint")
    n = args.scale
    if not 1 <= n <= cfg.schedule.num_scales:
        raise CliError(EXIT_USAGE, "usage", f"--scale must be in 1..{cfg.schedule.num_scales}")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"scale{n}.png")
    write_png(path, model.decode_tokens(tokens, n))
    write_manifest(args.out, "decode", cfg, args.argv, [path])
    print(f"decoded levels 1..{cfg.schedule.boundaries[n - 1]} to {path}")


def cmd_var_train(args) -> None:
    rqvae, tok_cfg, rq_ckpt = _load_rqvae(args.rqvae)
    cfg = _config(args)
    keep = {k: getattr(tok_cfg, k) for k in ("image_size", "resolutions", "scales", "f", "latent_dim",
                                              "codebook_size", "ae_channels", "ae_res_blocks", "learned_phi")}
    cfg = cfg.updated(rqvae_digest=rq_ckpt.digest, **keep)
    data = _dataset(args, cfg)
    pairs, _ = make_pairs(rqvae, data, cfg.degradation(), cfg.seed)
    model = build_var(cfg)
    tcfg = cfg.var_training()
    if args.no_dpo:
        tcfg.dpo_weight = 0.0
        cfg = cfg.updated(dpo_weight=0.0)
    history = train_var(model, pairs, rqvae.codebook, rqvae.phi, tcfg)
    out_dir = _out_dir(args.out)
    save_checkpoint(args.out, to_checkpoint(model, cfg, "var", len(history)))
    write_manifest(out_dir, "var-train", cfg, args.argv, [args.out])
    print(f"saved transformer checkpoint {args.out} (final ce {history[-1].ce:.4f})")


def cmd_sr(args) -> None:
    rqvae, tok_cfg, rq_ckpt = _load_rqvae(args.rqvae)
    var_ckpt = load_checkpoint(_need_file(args.var, "transformer checkpoint"), kind="var")
    model, cfg = var_from_checkpoint(var_ckpt, rq_ckpt, force=args.force)
    lr = read_png(_need_file(args.image, "image"))
    side = tok_cfg.image_size // 4
    if lr.shape[1:] != (side, side):
        raise CliError(EXIT_INPUT, "shape", f"LR image is {lr.shape[1:]}, expected {side}x{side}")
    upto = SCALE_FACTORS[args.scale]
    sampler = Sampler(top_k=args.top_k, seed=cfg.seed if args.seed is None else args.seed)
    outs, _ = super_resolve(rqvae, model, lr.pixels[None], [args.cls], tok_cfg.image_size, upto,
                            sampler, args.cfg)
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for factor, img in zip((1, 2, 4), outs):
        path = os.path.join(args.out, f"x{factor}.png")
        write_png(path, Image(img[0]))
        paths.append(path)
    run_cfg = cfg.updated(cfg_weight=args.cfg, top_k=args.top_k,
                          seed=cfg.seed if args.seed is None else args.seed)
    write_manifest(args.out, "sr", run_cfg, args.argv, paths)
    print("wrote " + " ".join(paths))


def cmd_eval(args) -> None:
    for d in (args.pred, args.ref):
        if not os.path.isdir(d):
            raise CliError(EXIT_INPUT, "missing-file", f"directory not found: {d}")
    names = sorted(n for n in os.listdir(args.ref) if n.lower().endswith(".png"))
    if not names:
        raise CliError(EXIT_INPUT, "missing-file", f"no PNG images in {args.ref}")
    reports = []
    for name in names:
        pred = read_png(_need_file(os.path.join(args.pred, name), "prediction"))
        ref = read_png(os.path.join(args.ref, name))
        if pred.shape != ref.shape:
            raise CliError(EXIT_INPUT, "shape", f"{name}: prediction {pred.shape} vs reference {ref.shape}")
        reports.append(evaluate(pred, ref, name))
    write_report(args.out, reports)
    write_manifest(_out_dir(args.out), "eval", RunConfig(), args.argv, [args.out])
    print(f"evaluated {len(reports)} images -> {args.out}")


# parser -------------------------------------------------------------------------------
def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=("desk", "paper"), help="base preset (default desk)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvar", description="Hierarchical RQ tokenizer and next-scale SR")
    parser.add_argument("--version", action="version", version=f"hvar {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic PNG dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rqvae-train", help="train the multi-scale autoencoder")
    _add_config_flags(p)
    p.add_argument("--data", help="directory of PNG images (default: synthetic set from config)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_rqvae_train)

    p = sub.add_parser("tokenize", help="image -> HVTK token file")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("decode", help="HVTK token file -> image at one scale")
    p.add_argument("--tokens", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scale", type=int, required=True, help="scale index n (1 = coarsest)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("var-train", help="train the transformer on (HR, degraded LR) pairs")
    _add_config_flags(p)
    p.add_argument("--rqvae", required=True, help="autoencoder checkpoint")
    p.add_argument("--data", help="directory of HR PNG images (default: synthetic set from config)")
    p.add_argument("--no-dpo", action="store_true", help="cross-entropy only (ablation)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_var_train)

    p = sub.add_parser("sr", help="super-resolve one LR image at x1, x2 and x4 in one pass")
    p.add_argument("--image", required=True)
    p.add_argument("--rqvae", required=True)
    p.add_argument("--var", required=True)
    p.add_argument("--scale", type=int, choices=(1, 2, 4), default=4)
    p.add_argument("--class", dest="cls", type=int, choices=(0, 1), default=0)
    p.add_argument("--cfg", type=float, default=0.0, help="classifier-free guidance weight")
    p.add_argument("--top-k", type=int, default=0, help="0 = greedy")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="ignore checkpoint digest mismatch")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM of matching PNG files in two directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="report path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    args.argv = list(sys.argv[1:] if argv is None else argv)
    if args.command == "sr" and args.cfg < 0:
        parser.error("--cfg must be non-negative")
    t0 = time.time()
    try:
        args.func(args)
    except CliError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointMismatch as exc:
        print(f"error[incompatible-checkpoint]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"error[format]: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    log.info("%s finished in %.1fs", args.command, time.time() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Glue between configs, models, checkpoints and the super-resolution loop."""
from __future__ import annotations

import numpy as np

from .autoencoder import RQVAE
from .checkpoint import Checkpoint, CheckpointMismatch
from .config import RunConfig, parse_config_text
from .resample import DegradationConfig, Image, degrade, interpolate
from .var import PairSet, Sampler, VarTransformer, generate, prepare_pairs

TOKENIZER_KEYS = ("image_size", "resolutions", "scales", "f", "latent_dim", "codebook_size",
                  "ae_channels", "ae_res_blocks", "learned_phi")


def build_rqvae(cfg: RunConfig) -> RQVAE:
    return RQVAE(cfg.autoencoder(), cfg.schedule, seed=cfg.seed)


def build_var(cfg: RunConfig) -> VarTransformer:
    return VarTransformer(cfg.transformer(), seed=cfg.seed)


def to_checkpoint(model, cfg: RunConfig, kind: str, step: int = 0) -> Checkpoint:
    return Checkpoint(kind, cfg.to_text(), model.state_dict(), step)


def rqvae_from_checkpoint(ckpt: Checkpoint) -> tuple[RQVAE, RunConfig]:
    if ckpt.kind != "rqvae":
        raise CheckpointMismatch(f"expected an rqvae checkpoint, got {ckpt.kind!r}")
    cfg = parse_config_text(ckpt.config_text)
    model = build_rqvae(cfg)
    model.load_state_dict(ckpt.tensors)
    return model, cfg


def var_from_checkpoint(ckpt: Checkpoint, rqvae_ckpt: Checkpoint | None = None,
                        force: bool = False) -> tuple[VarTransformer, RunConfig]:
    """Rebuild a transformer trained against ``rqvae_ckpt`` (checked unless ``force``)."""
    if ckpt.kind != "var":
        raise CheckpointMismatch(f"expected a var checkpoint, got {ckpt.kind!r}")
    cfg = parse_config_text(ckpt.config_text)
    if rqvae_ckpt is not None and not force:
        if cfg.rqvae_digest and cfg.rqvae_digest != rqvae_ckpt.digest:
            raise CheckpointMismatch(f"transformer was trained against autoencoder config "
                                     f"{cfg.rqvae_digest[:12]}, got {rqvae_ckpt.digest[:12]} "
                                     f"(use --force to override)")
        tokenizer_cfg = parse_config_text(rqvae_ckpt.config_text)
        bad = [k for k in TOKENIZER_KEYS if getattr(cfg, k) != getattr(tokenizer_cfg, k)]
        if bad:
            raise CheckpointMismatch(f"transformer and autoencoder disagree on {', '.join(bad)}")
    model = build_var(cfg)
    model.load_state_dict(ckpt.tensors)
    return model, cfg


def degrade_batch(hr: np.ndarray, cfg: DegradationConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Degrade every image with its own derived seed; returns LR images and classes."""
    lrs, classes = [], []
    for i, img in enumerate(hr):
        lr, cls = degrade(Image(img), cfg, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        lrs.append(lr.pixels)
        classes.append(int(cls))
    return np.stack(lrs), np.asarray(classes, dtype=np.int64)


def make_pairs(rqvae: RQVAE, hr: np.ndarray, cfg: DegradationConfig, seed: int) -> tuple[PairSet, np.ndarray]:
    lr, classes = degrade_batch(hr, cfg, seed)
    return prepare_pairs(rqvae, hr, lr, classes), lr


def lr_features(rqvae: RQVAE, lr: np.ndarray, size: int) -> np.ndarray:
    return rqvae.encode_array(interpolate(np.asarray(lr, dtype=np.float64), size, size, "bilinear"))


def super_resolve(rqvae: RQVAE, var: VarTransformer, lr: np.ndarray, classes, size: int,
                  upto_scale: int | None = None, sampler: Sampler | None = None,
                  cfg_weight: float | None = None) -> tuple[list[np.ndarray], object]:
    """Images for scales ``1..upto_scale`` from one autoregressive pass."""
    lr = np.asarray(lr, dtype=np.float64)
    feats = lr_features(rqvae, lr, size)
    gen = generate(var, feats, classes, rqvae.codebook, rqvae.phi, upto_scale, sampler, cfg_weight)
    n = len(gen.levels)
    outputs = []
    for scale in range(1, rqvae.schedule.num_scales + 1):
        if rqvae.schedule.boundaries[scale - 1] > n:
            break
        outputs.append(rqvae.decode_array(rqvae.latent_from_tokens(gen.levels, scale), scale))
    return outputs, gen

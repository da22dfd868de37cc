"""Convolutional RQ-VAE with one decoder head per target scale."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, GroupNorm, Module, assign_names
from .optim import AdamW
from .quantizer import (Codebook, HierarchicalResult, PhiFilter, ScaleSchedule, TokenSequence,
                        assemble, assemble_latent, hierarchical_quantize, scale_images)
from .resample import Image
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


@dataclass
class AutoencoderConfig:
    f: float = 0.25
    latent_dim: int = 8
    channels: tuple[int, int] = (32, 64)
    res_blocks: int = 1
    groups: int = 8
    codebook_size: int = 256
    learned_phi: bool = True

    def __post_init__(self):
        if abs(1.0 / self.f - round(1.0 / self.f)) > 1e-9 or round(1.0 / self.f) != 4:
            raise ValueError("this architecture implements f = 0.25 (two stride-2 stages)")


@dataclass
class RqvaeLossReport:
    reconstruction: list[float]
    codebook: float
    commitment: float
    total: float
    quantized: bool


@dataclass
class RqvaeTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    drop_quant_prob: float = 0.5
    perceptual_weight: float = 5.0
    edge_norm: str = "l2"
    commitment_weight: float = 0.25
    seed: int = 0
    log_every: int = 100
    lr_warmup: int = 50
    final_lr_frac: float = 0.1


def depth_to_space(x, r: int):
    b, c, h, w = x.shape
    x = T.reshape(x, (b, c // (r * r), r, r, h, w))
    x = T.transpose(x, (0, 1, 4, 2, 5, 3))
    return T.reshape(x, (b, c // (r * r), h * r, w * r))


class ResBlock(Module):
    def __init__(self, ch: int, groups: int, rng):
        self.norm1 = GroupNorm(groups, ch)
        self.conv1 = Conv2d(ch, ch, 3, rng)
        self.norm2 = GroupNorm(groups, ch)
        self.conv2 = Conv2d(ch, ch, 3, rng, init_scale=0.1)

    def forward(self, x):
        h = self.conv1(T.silu(self.norm1(x)))
        h = self.conv2(T.silu(self.norm2(h)))
        return x + h


class Encoder(Module):
    """Two stride-2 stages (4x4 kernels), residual blocks, 1x1 projection to the latent."""

    def __init__(self, cfg: AutoencoderConfig, rng):
        c1, c2 = cfg.channels
        self.down1 = Conv2d(3, c1, 4, rng, stride=2, padding=1)
        self.down2 = Conv2d(c1, c2, 4, rng, stride=2, padding=1)
        self.blocks = [ResBlock(c2, cfg.groups, rng) for _ in range(cfg.res_blocks)]
        self.norm = GroupNorm(cfg.groups, c2)
        self.proj = Conv2d(c2, cfg.latent_dim, 1, rng)

    def forward(self, x):
        h = T.silu(self.down1(x * 2.0 - 1.0))
        h = self.down2(h)
        for blk in self.blocks:
            h = blk(h)
        return self.proj(T.silu(self.norm(h)))


class Decoder(Module):
    """Mirror of :class:`Encoder`: sub-pixel convolutions undo the two stride-2 stages."""

    def __init__(self, cfg: AutoencoderConfig, rng):
        c1, c2 = cfg.channels
        self.proj = Conv2d(cfg.latent_dim, c2, 3, rng)
        self.blocks = [ResBlock(c2, cfg.groups, rng) for _ in range(cfg.res_blocks)]
        self.norm = GroupNorm(cfg.groups, c2)
        self.up1 = Conv2d(c2, 4 * c1, 3, rng)
        self.up2 = Conv2d(c1, 4 * 3, 3, rng)

    def forward(self, z):
        h = self.proj(z)
        for blk in self.blocks:
            h = blk(h)
        h = depth_to_space(self.up1(T.silu(self.norm(h))), 2)
        h = depth_to_space(self.up2(T.silu(h)), 2)
        return h * 0.5 + 0.5


class RQVAE(Module):
    """Encoder, shared codebook and phi filter, and ``N`` scale-specific decoders."""

    def __init__(self, cfg: AutoencoderConfig, schedule: ScaleSchedule, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.schedule = schedule
        self.encoder = Encoder(cfg, rng)
        self.decoders = [Decoder(cfg, rng) for _ in range(schedule.num_scales)]
        self.codebook = Codebook.random(cfg.codebook_size, cfg.latent_dim, rng, scale=0.5)
        self.phi = PhiFilter(cfg.latent_dim if cfg.learned_phi else None)
        assign_names(self)

    @property
    def f(self) -> float:
        return self.cfg.f

    def decoder_parameters(self):
        return [p for d in self.decoders for p in d.parameters()]

    # eval-mode helpers ---------------------------------------------------------
    def encode_array(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        h, w = images.shape[-2:]
        side = round(1.0 / self.f)
        if h % side or w % side:
            raise ValueError(f"input {h}x{w} not divisible by {side}")
        with T.no_grad():
            return self.encoder(Tensor(images)).data

    def encode(self, image: Image) -> np.ndarray:
        return self.encode_array(image.pixels[None])[0]

    def decode_array(self, latents: np.ndarray, n: int) -> np.ndarray:
        side = self.schedule.latent_size(n)
        if latents.shape[-2:] != (side, side):
            raise T.ShapeError(f"decode_scale {n}", latents.shape[-2:], (side, side))
        with T.no_grad():
            return np.clip(self.decoders[n - 1](Tensor(latents)).data, 0.0, 1.0)

    def decode_scale(self, latent: np.ndarray, n: int) -> Image:
        if not 1 <= n <= self.schedule.num_scales:
            raise IndexError(f"scale {n} outside 1..{self.schedule.num_scales}")
        return Image(self.decode_array(np.asarray(latent)[None], n)[0])

    def quantize_batch(self, images: np.ndarray, on_input=None) -> HierarchicalResult:
        return hierarchical_quantize(images, self.encode_array, self.codebook, self.schedule,
                                     self.phi, self.f, on_input)

    def tokenize(self, image: Image) -> TokenSequence:
        res = self.quantize_batch(image.pixels[None])
        return TokenSequence([t[0] for t in res.tokens], self.schedule)

    def tokenize_batch(self, images: np.ndarray) -> list[np.ndarray]:
        return self.quantize_batch(images).tokens

    def latent_from_tokens(self, levels, n: int) -> np.ndarray:
        """Batched ``assemble_latent`` for per-level ``(B, rho, rho)`` grids."""
        b = self.schedule.boundaries[n - 1]
        with T.no_grad():
            return assemble(levels[:b], self.schedule.latent_size(n), Tensor(self.codebook.vectors),
                            self.phi).data

    def decode_tokens(self, tokens: TokenSequence, n: int) -> Image:
        return self.decode_scale(assemble_latent(tokens, n, self.codebook, self.phi), n)

    def reconstruct_batch(self, images: np.ndarray, n: int | None = None) -> np.ndarray:
        n = self.schedule.num_scales if n is None else n
        tokens = self.tokenize_batch(images)
        return self.decode_array(self.latent_from_tokens(tokens, n), n)


# losses ------------------------------------------------------------------------
def commitment_loss(z, r):
    """``mean ||z - stopgrad(r)||^2``."""
    return T.mean((z - T.stop_gradient(r)) ** 2)


def edge_loss(pred, target: np.ndarray, norm: str = "l2"):
    """Distance between finite-difference image gradients (stand-in for a perceptual loss).

    ``norm="l1"`` uses absolute differences, ``"l2"`` squared differences.
    """
    dx_p = pred[:, :, :, 1:] - pred[:, :, :, :-1]
    dy_p = pred[:, :, 1:, :] - pred[:, :, :-1, :]
    dx_t = target[:, :, :, 1:] - target[:, :, :, :-1]
    dy_t = target[:, :, 1:, :] - target[:, :, :-1, :]
    if norm == "l1":
        return T.mean(T.absolute(dx_p - dx_t)) + T.mean(T.absolute(dy_p - dy_t))
    if norm == "l2":
        return T.mean((dx_p - dx_t) ** 2) + T.mean((dy_p - dy_t) ** 2)
    raise ValueError(f"unknown edge norm {norm!r}")


def _lr_at(step: int, cfg: RqvaeTrainConfig | object, base: float) -> float:
    warm = getattr(cfg, "lr_warmup", 0)
    if warm and step < warm:
        return base * (step + 1) / warm
    total = max(getattr(cfg, "steps", 1), 1)
    frac = getattr(cfg, "final_lr_frac", 1.0)
    t = min(step / total, 1.0)
    return base * (frac + (1.0 - frac) * 0.5 * (1.0 + np.cos(np.pi * t)))


def rqvae_step(model: RQVAE, images: np.ndarray, quantize: bool, cfg: RqvaeTrainConfig,
               on_input=None) -> tuple[Tensor, RqvaeLossReport]:
    """Loss for one batch. With ``quantize`` the decoders see straight-through latents."""
    sched = model.schedule
    scaled = scale_images(images, sched, model.f)
    feats = [model.encoder(Tensor(img)) for img in scaled]
    recon_terms, cb_loss, commit = [], None, None
    if quantize:
        res = hierarchical_quantize(images, _feature_lookup(feats, model.f), model.codebook, sched, model.phi,
                                    model.f, on_input)
        model.codebook.record_usage(np.concatenate([t.reshape(-1) for t in res.tokens]))
    total = None
    for n, (img, z) in enumerate(zip(scaled, feats), start=1):
        if quantize:
            b = sched.boundaries[n - 1]
            zq = assemble(res.tokens[:b], sched.latent_size(n), model.codebook.weight, model.phi)
            cbl = T.mean((T.stop_gradient(z) - zq) ** 2)
            cml = commitment_loss(z, zq)
            cb_loss = cbl if cb_loss is None else cb_loss + cbl
            commit = cml if commit is None else commit + cml
            latent = T.straight_through(z, zq)
        else:
            latent = z
        out = model.decoders[n - 1](latent)
        rec = T.mean((out - img) ** 2) + cfg.perceptual_weight * edge_loss(out, img, cfg.edge_norm)
        recon_terms.append(rec)
        total = rec if total is None else total + rec
    if quantize:
        total = total + cb_loss + cfg.commitment_weight * commit
    report = RqvaeLossReport(
        reconstruction=[float(r.item()) for r in recon_terms],
        codebook=float(cb_loss.item()) if cb_loss is not None else 0.0,
        commitment=float(commit.item()) if commit is not None else 0.0,
        total=float(total.item()),
        quantized=quantize,
    )
    return total, report


def _feature_lookup(feats, f: float):
    """Encoder stand-in returning precomputed per-scale features by spatial size."""
    by_size = {z.shape[-1]: z.data for z in feats}
    side = round(1.0 / f)

    def encode(img):
        return by_size[img.shape[-1] // side]

    return encode


def train_rqvae(model: RQVAE, dataset: np.ndarray, cfg: RqvaeTrainConfig,
                callback=None) -> list[RqvaeLossReport]:
    """Train encoder, decoders, codebook and phi jointly; returns the loss history.

    Each step flips a coin with probability ``drop_quant_prob`` of feeding raw
    encoder features to the decoders instead of quantized latents.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable_parameters()
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay,
                no_decay={"codebook.weight"})
    steps_per_epoch = max(1, len(dataset) // cfg.batch_size)
    candidates: list[np.ndarray] = []

    def collect(x):
        flat = x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
        candidates.append(flat[rng.integers(0, len(flat), size=min(64, len(flat)))])

    history: list[RqvaeLossReport] = []
    model.codebook.reset_usage()
    t0 = time.time()
    for step in range(cfg.steps):
        idx = rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)), replace=False)
        quantize = rng.random() >= cfg.drop_quant_prob
        opt.zero_grad()
        loss, report = rqvae_step(model, dataset[idx], quantize, cfg, collect)
        if not np.isfinite(report.total):
            raise NonFiniteError(f"RQ-VAE loss diverged at step {step}: {report}")
        loss.backward()
        opt.state.lr = _lr_at(step, cfg, cfg.lr)
        opt.step()
        history.append(report)
        if (step + 1) % steps_per_epoch == 0:
            if candidates:
                pool = np.concatenate(candidates[-4 * steps_per_epoch:])
                dead = model.codebook.reseed_dead(pool, rng)
                if dead:
                    log.debug("step %d: reseeded %d dead codes", step, dead)
            model.codebook.reset_usage()
            candidates.clear()
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("rqvae step %d  loss %.5f  rec %s  (%.0fs)", step + 1, report.total,
                     " ".join(f"{r:.4f}" for r in report.reconstruction), time.time() - t0)
        if callback is not None:
            callback(step, report)
    return history


def vocabulary_loss(model: RQVAE, images: np.ndarray) -> Tensor:
    """Sum over scales of ``mean (Z_n - assembled_n)^2`` with encoder features held fixed."""
    res = model.quantize_batch(images)
    total = None
    for n, z in enumerate(res.features, start=1):
        b = model.schedule.boundaries[n - 1]
        zq = assemble(res.tokens[:b], model.schedule.latent_size(n), model.codebook.weight, model.phi)
        term = T.mean((Tensor(z) - zq) ** 2)
        total = term if total is None else total + term
    return total


def finetune_vocabulary(model: RQVAE, dataset: np.ndarray, steps: int = 200, lr: float = 1e-3,
                        batch_size: int = 16, seed: int = 0) -> list[float]:
    """Update only codebook vectors to align assembled tokens with encoder features.

    The decoders must already be frozen; the encoder and phi are frozen here.
    """
    if any(p.trainable for p in model.decoder_parameters()):
        raise RuntimeError("finetune_vocabulary requires frozen decoders (set_trainable(False))")
    dataset = np.asarray(dataset, dtype=np.float64)
    saved = {id(p): p.trainable for p in model.parameters()}
    for p in model.parameters():
        p.trainable = p is model.codebook.weight
    rng = np.random.default_rng(seed)
    opt = AdamW([model.codebook.weight], lr=lr, betas=(0.9, 0.95), weight_decay=0.0)
    losses = []
    try:
        for _ in range(steps):
            idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
            opt.zero_grad()
            loss = vocabulary_loss(model, dataset[idx])
            loss.check_finite("vocabulary loss")
            loss.backward()
            opt.step()
            losses.append(loss.item())
    finally:
        for p in model.parameters():
            p.trainable = saved[id(p)]
    return losses

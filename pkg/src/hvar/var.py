"""Next-scale autoregressive transformer for super-resolution.

Sequence layout: ``[class | LR features (rho_L^2) | level 1 | ... | level L]``.
A query may attend to any key whose group index is not larger than its own;
the class token and the LR features share group 0, level ``l`` is group ``l``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Embedding, LayerNorm, Linear, Module, Parameter, assign_names
from .optim import AdamW
from .quantizer import IDENTITY_PHI, Codebook, PhiFilter, ScaleSchedule, TokenSequence, stack_tokens
from .resample import DegradationClass, interpolate
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

NUM_CLASSES = 3
CLASS_FREE = int(DegradationClass.CLASS_FREE)


@dataclass
class VarConfig:
    depth: int = 2
    heads: int = 2
    width: int = 64
    vocab_size: int = 256
    latent_dim: int = 8
    resolutions: tuple[int, ...] = (2, 3, 4, 6, 8, 12, 16)
    scales: tuple[float, ...] = (0.25, 0.5, 1.0)
    mlp_ratio: int = 4
    num_classes: int = NUM_CLASSES
    dpo_beta: float = 1.0
    cfg_weight: float = 0.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError("class count must be 3 (degraded, non-degraded, class-free)")
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.scales = tuple(float(s) for s in self.scales)

    @property
    def schedule(self) -> ScaleSchedule:
        return ScaleSchedule(self.resolutions, self.scales)

    @property
    def cond_tokens(self) -> int:
        return self.resolutions[-1] ** 2

    @property
    def prefix_length(self) -> int:
        return 1 + self.cond_tokens

    @property
    def sequence_length(self) -> int:
        return self.prefix_length + sum(r * r for r in self.resolutions)


@dataclass
class VarTrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.005
    dpo_weight: float = 1.0
    class_free_prob: float = 0.1
    lr_warmup: int = 50
    final_lr_frac: float = 0.1
    seed: int = 0
    log_every: int = 100


# masks and positional views -------------------------------------------------------
def group_ids(cfg: VarConfig) -> np.ndarray:
    ids = [np.zeros(cfg.prefix_length, dtype=np.int64)]
    ids += [np.full(r * r, l, dtype=np.int64) for l, r in enumerate(cfg.resolutions, start=1)]
    return np.concatenate(ids)


def attention_mask(cfg: VarConfig) -> np.ndarray:
    """Boolean ``(S, S)``; ``mask[q, k]`` is True when query ``q`` may see key ``k``."""
    g = group_ids(cfg)
    return g[None, :] <= g[:, None]


class PositionalEmbedding(Module):
    """Learnable ``width x rho_L x rho_L`` grid; coarser levels use area-downsampled views."""

    def __init__(self, width: int, top: int, rng):
        self.grid = Parameter(rng.normal(0.0, 0.02, size=(width, top, top)))

    def view(self, rho: int) -> Tensor:
        return interpolate(self.grid, rho, rho, "area")

    def tokens(self, rho: int) -> Tensor:
        """``(rho^2, width)`` token-major view."""
        v = self.view(rho)
        return T.transpose(T.reshape(v, (v.shape[0], rho * rho)), (1, 0))


# transformer blocks -----------------------------------------------------------------
class Attention(Module):
    def __init__(self, width: int, heads: int, rng):
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng)
        self.out = Linear(width, width, rng, init_scale=0.5)

    def _split(self, x):
        b, s, w = x.shape
        qkv = T.reshape(self.qkv(x), (b, s, 3, self.heads, w // self.heads))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # 3, B, H, S, D
        return T.getitem(qkv, 0), T.getitem(qkv, 1), T.getitem(qkv, 2)

    def _merge(self, o):
        b, h, s, d = o.shape
        return self.out(T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, s, h * d)))

    def forward(self, x, bias: np.ndarray, cache: dict | None = None):
        """``bias`` is an additive ``(S_q, S_k)`` mask; ``cache`` holds keys/values of earlier groups."""
        q, k, v = self._split(x)
        if cache is not None:
            if "k" in cache:
                k = T.concat([cache["k"], k], axis=2)
                v = T.concat([cache["v"], v], axis=2)
            cache["k"], cache["v"] = k, v
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
        attn = T.softmax(scores + bias, axis=-1)
        return self._merge(T.matmul(attn, v))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, rng):
        self.norm1 = LayerNorm(width)
        self.attn = Attention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width, rng)
        self.fc2 = Linear(mlp_ratio * width, width, rng, init_scale=0.5)

    def forward(self, x, bias, cache=None):
        x = x + self.attn(self.norm1(x), bias, cache)
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


# the model ----------------------------------------------------------------------------
class VarTransformer(Module):
    def __init__(self, cfg: VarConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.schedule = cfg.schedule
        self.class_embed = Embedding(cfg.num_classes, cfg.width, rng)
        self.level_embed = Embedding(len(cfg.resolutions) + 1, cfg.width, rng)
        self.pos = PositionalEmbedding(cfg.width, cfg.resolutions[-1], rng)
        self.start = Parameter(rng.normal(0.0, 0.02, size=cfg.width))
        self.feature_proj = Linear(cfg.latent_dim, cfg.width, rng)
        self.word_proj = Linear(cfg.latent_dim, cfg.width, rng)
        self.skip_proj = Linear(cfg.latent_dim, cfg.width, rng)
        self.blocks = [Block(cfg.width, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.head_norm = LayerNorm(cfg.width)
        self.head = Linear(cfg.width, cfg.vocab_size, rng, init_scale=0.5)
        self.code_query = Linear(cfg.width, cfg.latent_dim, rng)
        self.code_scale = Parameter(np.array(4.0))
        _init_residual_path(self, cfg)
        assign_names(self)
        self._mask = attention_mask(cfg)
        self._bias = np.where(self._mask, 0.0, -np.inf)
        self._starts = np.concatenate([[cfg.prefix_length],
                                       cfg.prefix_length + np.cumsum([r * r for r in cfg.resolutions])])

    # input construction ---------------------------------------------------------------
    def prefix(self, features: np.ndarray, classes: np.ndarray) -> Tensor:
        """Class token followed by projected LR features, ``(B, 1 + rho_L^2, width)``."""
        top = self.cfg.resolutions[-1]
        features = np.asarray(features, dtype=np.float64)
        if features.shape[1:] != (self.cfg.latent_dim, top, top):
            raise T.ShapeError("conditioning features", features.shape[1:], (self.cfg.latent_dim, top, top))
        b = features.shape[0]
        level0 = T.getitem(self.level_embed.weight, 0)
        cls = T.reshape(self.class_embed(np.asarray(classes)), (b, 1, self.cfg.width)) + level0
        feats = features.reshape(b, self.cfg.latent_dim, top * top).transpose(0, 2, 1)
        body = self.feature_proj(Tensor(feats)) + self.pos.tokens(top) + level0
        return T.concat([cls, body], axis=1)

    def level_input(self, level: int, classes: np.ndarray, features: np.ndarray,
                    cumulative: np.ndarray | None) -> Tensor:
        """Tokens fed for ``level`` (1-based).

        Level 1 sees a learned start vector plus the class embedding; later
        levels see the projected area-downsampled running reconstruction.
        Every level also gets the LR features resized to its own grid, so the
        token at a position can read the conditioning at the same place.
        """
        rho = self.cfg.resolutions[level - 1]
        b = len(classes)
        extra = (self.pos.tokens(rho) + T.getitem(self.level_embed.weight, level)
                 + self.skip_proj(Tensor(_grid_tokens(features, rho))))
        if level == 1:
            base = T.reshape(self.class_embed(np.asarray(classes)), (b, 1, self.cfg.width)) + self.start
            return base + extra
        return self.word_proj(Tensor(_grid_tokens(cumulative, rho))) + extra

    def _trunk(self, x, bias, caches=None):
        for i, blk in enumerate(self.blocks):
            x = blk(x, bias, None if caches is None else caches[i])
        return x

    def _logits(self, x, vectors: np.ndarray) -> Tensor:
        # a learned head plus a scaled negative squared distance between a
        # predicted latent and every codebook entry
        q = self.code_query(x)
        dist = T.matmul(q, Tensor(2.0 * vectors.T)) - Tensor(np.sum(vectors ** 2, axis=1))
        return self.head(self.head_norm(x)) + self.code_scale * dist

    # teacher forcing -------------------------------------------------------------------
    def forward(self, levels, features: np.ndarray, classes, codebook: Codebook,
                phi: PhiFilter = IDENTITY_PHI) -> Tensor:
        """Logits ``(B, sum rho_l^2, K)`` for every level position in one pass.

        ``levels`` is a list of ``(B, rho_l, rho_l)`` index grids (or a single
        :class:`TokenSequence`).
        """
        levels = _as_levels(levels, self.schedule)
        classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
        cums = cumulative_maps(levels, codebook.vectors, phi, self.cfg.resolutions[-1])
        parts = [self.prefix(features, classes)]
        for l in range(1, len(self.cfg.resolutions) + 1):
            parts.append(self.level_input(l, classes, features, cums[l - 2] if l > 1 else None))
        hidden = self._trunk(T.concat(parts, axis=1), self._bias)
        return self._logits(T.getitem(hidden, (slice(None), slice(self.cfg.prefix_length, None))),
                            codebook.vectors)

    def level_logits(self, logits: Tensor | np.ndarray, level: int):
        """Slice of teacher-forced logits belonging to ``level`` (1-based)."""
        a, b = self._starts[level - 1] - self.cfg.prefix_length, self._starts[level] - self.cfg.prefix_length
        if isinstance(logits, Tensor):
            return T.getitem(logits, (slice(None), slice(int(a), int(b))))
        return logits[:, a:b]

    # incremental decoding --------------------------------------------------------------
    def start_cache(self, features: np.ndarray, classes) -> list[dict]:
        classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
        caches = [{} for _ in self.blocks]
        p = self.cfg.prefix_length
        with T.no_grad():
            self._trunk(self.prefix(features, classes), self._bias[:p, :p], caches)
        return caches

    def step(self, caches: list[dict], level: int, classes, features: np.ndarray,
             cumulative: np.ndarray | None, vectors: np.ndarray) -> np.ndarray:
        """Logits ``(B, rho_l^2, K)`` for ``level`` given cached earlier groups; extends the cache."""
        classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
        lo, hi = self._starts[level - 1], self._starts[level]
        with T.no_grad():
            x = self.level_input(level, classes, features, cumulative)
            return self._logits(self._trunk(x, self._bias[lo:hi, :hi], caches), vectors).data


def _init_residual_path(model: VarTransformer, cfg: VarConfig):
    """Start the code-distance path at "nearest code to LR features minus reconstruction so far"."""
    eye = np.eye(cfg.width, cfg.latent_dim)
    model.skip_proj.weight.data[...] = eye
    model.word_proj.weight.data[...] = -eye
    model.code_query.weight.data[...] = eye.T
    model.code_query.bias.data[...] = 0.0


def _grid_tokens(maps: np.ndarray, rho: int) -> np.ndarray:
    """Area-resize ``(B, C, H, W)`` maps to ``rho x rho`` and lay them out as ``(B, rho^2, C)``."""
    small = interpolate(np.asarray(maps, dtype=np.float64), rho, rho, "area")
    return small.reshape(small.shape[0], small.shape[1], rho * rho).transpose(0, 2, 1)


def _as_levels(levels, schedule: ScaleSchedule) -> list[np.ndarray]:
    if isinstance(levels, TokenSequence):
        levels = [g[None] for g in levels.levels]
    elif levels and isinstance(levels[0], TokenSequence):
        levels = stack_tokens(levels)
    levels = [np.asarray(g, dtype=np.int64) for g in levels]
    if len(levels) != schedule.levels:
        raise T.ShapeError("token levels vs schedule", (len(levels),), (schedule.levels,))
    for g, r in zip(levels, schedule.resolutions):
        if g.shape[1:] != (r, r):
            raise T.ShapeError("token grid vs schedule", g.shape[1:], (r, r))
    return levels


def cumulative_maps(levels, vectors: np.ndarray, phi: PhiFilter, top: int) -> list[np.ndarray]:
    """Running ``sum_{k<=l} phi(up(embed(level_k), rho_L))`` for ``l = 1..L-1``."""
    out, total = [], None
    for grid in levels[:-1]:
        emb = vectors[grid].transpose(0, 3, 1, 2)
        term = phi(interpolate(emb, top, top, "bilinear"))
        total = term if total is None else total + term
        out.append(total)
    return out


# losses -------------------------------------------------------------------------------
def _flat_targets(tokens, batch: int) -> np.ndarray:
    if isinstance(tokens, TokenSequence):
        return tokens.flat()[None]
    if isinstance(tokens, (list, tuple)):
        if tokens and isinstance(tokens[0], TokenSequence):
            return np.stack([t.flat() for t in tokens])
        return np.concatenate([np.asarray(g).reshape(batch, -1) for g in tokens], axis=1)
    return np.asarray(tokens, dtype=np.int64).reshape(batch, -1)


def loss_ce(logits, tokens) -> Tensor:
    """Mean negative log-likelihood of the target indices over all positions."""
    logits = T.as_tensor(logits)
    target = _flat_targets(tokens, logits.shape[0])
    if target.shape != logits.shape[:2]:
        raise T.ShapeError("loss_ce", logits.shape, target.shape)
    picked = T.gather(T.log_softmax(logits, axis=-1), target[..., None], axis=-1)
    return -T.mean(picked)


def sequence_log_prob(logits, tokens) -> Tensor:
    """Per-sample sum of log-probabilities, shape ``(B,)``."""
    logits = T.as_tensor(logits)
    target = _flat_targets(tokens, logits.shape[0])
    if target.shape != logits.shape[:2]:
        raise T.ShapeError("sequence_log_prob", logits.shape, target.shape)
    picked = T.gather(T.log_softmax(logits, axis=-1), target[..., None], axis=-1)
    return T.tsum(picked, axis=(1, 2))


def loss_dpo(logits, z_hr, z_lr, beta: float = 1.0) -> Tensor:
    """``-log sigmoid(beta * (log p(z_hr) - log p(z_lr)))`` averaged over the batch.

    Both likelihoods are read from the same logits; positions where the two
    sequences agree cancel exactly.
    """
    logits = T.as_tensor(logits)
    b = logits.shape[0]
    hr, lr = _flat_targets(z_hr, b), _flat_targets(z_lr, b)
    if hr.shape != lr.shape or hr.shape != logits.shape[:2]:
        raise T.ShapeError("loss_dpo", logits.shape, hr.shape, lr.shape)
    logp = T.log_softmax(logits, axis=-1)
    diff = T.gather(logp, hr[..., None], axis=-1) - T.gather(logp, lr[..., None], axis=-1)
    ratio = T.tsum(diff, axis=(1, 2))
    return -T.mean(T.log_sigmoid(ratio * beta))


def classifier_free_guidance(cond, free, w: float):
    """``cond + w (cond - free)``; ``w = 0`` returns ``cond`` unchanged."""
    if w == 0:
        return cond
    return cond + w * (cond - free)


# sampling -----------------------------------------------------------------------------
@dataclass
class Sampler:
    """Greedy argmax when ``top_k`` is 0, otherwise seeded top-k sampling."""

    top_k: int = 0
    temperature: float = 1.0
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, logits: np.ndarray) -> np.ndarray:
        if self.top_k <= 0:
            return np.argmax(logits, axis=-1)
        k = min(self.top_k, logits.shape[-1])
        flat = logits.reshape(-1, logits.shape[-1]) / self.temperature
        top = np.argpartition(-flat, k - 1, axis=-1)[:, :k]
        sub = np.take_along_axis(flat, top, axis=-1)
        p = np.exp(sub - sub.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        u = self.rng.random((len(p), 1))
        choice = np.minimum((p.cumsum(axis=-1) < u).sum(axis=-1), k - 1)
        return top[np.arange(len(top)), choice].reshape(logits.shape[:-1])


@dataclass
class Generation:
    levels: list[np.ndarray]
    logits: list[np.ndarray]
    schedule: ScaleSchedule

    def sequences(self) -> list[TokenSequence]:
        """Per-sample token prefixes (only the generated levels)."""
        b = len(self.levels[0])
        return [TokenSequence([g[i] for g in self.levels], self.schedule) for i in range(b)]


def generate(model: VarTransformer, features: np.ndarray, classes, codebook: Codebook,
             phi: PhiFilter = IDENTITY_PHI, upto_scale: int | None = None,
             sampler: Sampler | None = None, cfg_weight: float | None = None) -> Generation:
    """Level-by-level decoding with a KV cache, stopping after scale ``upto_scale``.

    With a non-zero guidance weight a class-free copy of the batch runs
    alongside and logits are combined by :func:`classifier_free_guidance`.
    """
    sched = model.schedule
    n = sched.num_scales if upto_scale is None else upto_scale
    if not 1 <= n <= sched.num_scales:
        raise IndexError(f"scale {n} outside 1..{sched.num_scales}")
    sampler = sampler or Sampler()
    w = model.cfg.cfg_weight if cfg_weight is None else cfg_weight
    features = np.asarray(features, dtype=np.float64)
    classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    b = len(classes)
    if w:
        features = np.concatenate([features, features])
        run_classes = np.concatenate([classes, np.full(b, CLASS_FREE)])
    else:
        run_classes = classes
    caches = model.start_cache(features, run_classes)
    top = sched.top
    levels, all_logits, total = [], [], None
    for level in range(1, sched.boundaries[n - 1] + 1):
        rho = sched.resolutions[level - 1]
        cum = None if total is None else (np.concatenate([total, total]) if w else total)
        logits = model.step(caches, level, run_classes, features, cum, codebook.vectors)
        if w:
            logits = classifier_free_guidance(logits[:b], logits[b:], w)
        all_logits.append(logits)
        grid = sampler(logits).reshape(b, rho, rho)
        levels.append(grid)
        emb = codebook.vectors[grid].transpose(0, 3, 1, 2)
        term = phi(interpolate(emb, top, top, "bilinear"))
        total = term if total is None else total + term
    return Generation(levels, all_logits, sched)


# training -----------------------------------------------------------------------------
@dataclass
class PairSet:
    """Precomputed training pairs: HR/LR token grids, LR features and degradation classes."""

    hr_levels: list[np.ndarray]
    lr_levels: list[np.ndarray]
    features: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return len(self.classes)

    def take(self, idx):
        return ([g[idx] for g in self.hr_levels], [g[idx] for g in self.lr_levels],
                self.features[idx], self.classes[idx])


def prepare_pairs(rqvae, hr: np.ndarray, lr: np.ndarray, classes) -> PairSet:
    """Tokenize HR images and bilinear-upsampled LR images; encode the upsampled LR."""
    hr = np.asarray(hr, dtype=np.float64)
    size = hr.shape[-1]
    up = interpolate(np.asarray(lr, dtype=np.float64), size, size, "bilinear")
    hr_levels, lr_levels, feats = [], [], []
    for i in range(0, len(hr), 32):
        hr_levels.append(rqvae.tokenize_batch(hr[i:i + 32]))
        lr_levels.append(rqvae.tokenize_batch(up[i:i + 32]))
        feats.append(rqvae.encode_array(up[i:i + 32]))
    cat = lambda chunks: [np.concatenate(parts) for parts in zip(*chunks)]  # noqa: E731
    return PairSet(cat(hr_levels), cat(lr_levels), np.concatenate(feats),
                   np.asarray(classes, dtype=np.int64))


@dataclass
class VarStepReport:
    ce: float
    dpo: float
    total: float


def var_losses(model: VarTransformer, batch, codebook: Codebook, phi: PhiFilter,
               dpo_weight: float = 1.0, beta: float | None = None):
    hr, lr, feats, classes = batch
    logits = model(hr, feats, classes, codebook, phi)
    ce = loss_ce(logits, hr)
    if dpo_weight:
        dpo = loss_dpo(logits, hr, lr, model.cfg.dpo_beta if beta is None else beta)
        total = ce + dpo * dpo_weight
    else:
        dpo, total = None, ce
    return total, VarStepReport(ce.item(), dpo.item() if dpo is not None else 0.0, total.item())


def _lr_at(step: int, cfg: VarTrainConfig) -> float:
    if cfg.lr_warmup and step < cfg.lr_warmup:
        return cfg.lr * (step + 1) / cfg.lr_warmup
    t = min(step / max(cfg.steps, 1), 1.0)
    return cfg.lr * (cfg.final_lr_frac + (1 - cfg.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * t)))


def train_var(model: VarTransformer, pairs: PairSet, codebook: Codebook, phi: PhiFilter,
              cfg: VarTrainConfig, callback=None) -> list[VarStepReport]:
    """Minimise ``CE + dpo_weight * DPO`` with class-free replacement of the class label."""
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.trainable_parameters(), lr=cfg.lr, betas=cfg.betas,
                weight_decay=cfg.weight_decay)
    history = []
    t0 = time.time()
    for step in range(cfg.steps):
        idx = rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False)
        hr, lr, feats, classes = pairs.take(idx)
        classes = np.where(rng.random(len(classes)) < cfg.class_free_prob, CLASS_FREE, classes)
        opt.zero_grad()
        loss, report = var_losses(model, (hr, lr, feats, classes), codebook, phi, cfg.dpo_weight)
        if not np.isfinite(report.total):
            raise NonFiniteError(f"VAR loss diverged at step {step}: {report}")
        loss.backward()
        opt.state.lr = _lr_at(step, cfg)
        opt.step()
        history.append(report)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("var step %d  ce %.4f  dpo %.4f  (%.0fs)", step + 1, report.ce, report.dpo,
                     time.time() - t0)
        if callback is not None:
            callback(step, report)
    return history

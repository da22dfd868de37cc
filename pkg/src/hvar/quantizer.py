"""Vector quantization, multi-scale residual quantization, and hierarchical tokenization.

Shapes: latents are ``(B, n_z, h, w)``; a level's tokens are ``(B, rho, rho)``
integer grids.  Single-image helpers accept ``(n_z, h, w)`` and drop the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .formats import FormatError, Reader, pack_f64, pack_u32, pack_u64, pack_varint
from .nn import Module, Parameter
from .resample import Image, interpolate
from .tensor import Tensor

TOKEN_MAGIC = b"HVTK"
TOKEN_VERSION = 1
_EPS = 1e-9


class Codebook(Module):
    """``K`` learnable vectors of dimension ``n_z`` plus per-entry usage counts."""

    def __init__(self, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] < 2:
            raise ValueError(f"codebook needs shape (K >= 2, n_z), got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("codebook vectors must be finite")
        self.weight = Parameter(vectors, name="codebook")
        self.usage = np.zeros(vectors.shape[0], dtype=np.int64)

    @classmethod
    def random(cls, size: int, dim: int, rng: np.random.Generator, scale: float = 1.0) -> "Codebook":
        return cls(rng.uniform(-scale, scale, size=(size, dim)))

    @property
    def size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @property
    def vectors(self) -> np.ndarray:
        return self.weight.data

    def lookup(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= self.size):
            raise IndexError(f"codebook index out of range [0, {self.size})")
        return self.weight.data[index]

    def record_usage(self, index: np.ndarray) -> None:
        self.usage += np.bincount(np.asarray(index).reshape(-1), minlength=self.size)

    def reset_usage(self) -> None:
        self.usage[:] = 0

    def reseed_dead(self, candidates: np.ndarray, rng: np.random.Generator) -> int:
        """Replace entries with zero usage by randomly drawn candidate vectors."""
        dead = np.flatnonzero(self.usage == 0)
        if dead.size and len(candidates):
            pick = rng.integers(0, len(candidates), size=dead.size)
            self.weight.data[dead] = candidates[pick]
        return int(dead.size)


@dataclass(frozen=True)
class ScaleSchedule:
    """Level resolutions ``rho_1 < ... < rho_L`` and target scales ``s_1 < ... < s_N = 1``.

    ``boundaries[n]`` is the (1-based) index of the last level owned by scales
    ``<= n``: the largest ``k`` with ``rho_k <= s_n * rho_L``.
    """

    resolutions: tuple[int, ...]
    scales: tuple[float, ...] = (1.0,)
    boundaries: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        rho = tuple(int(r) for r in self.resolutions)
        scales = tuple(float(s) for s in self.scales)
        object.__setattr__(self, "resolutions", rho)
        object.__setattr__(self, "scales", scales)
        if not rho or rho[0] < 1 or any(b <= a for a, b in zip(rho, rho[1:])):
            raise ValueError(f"resolutions must be positive and strictly increasing: {rho}")
        if not scales or abs(scales[-1] - 1.0) > _EPS or any(not 0 < s <= 1 for s in scales) \
                or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must increase within (0, 1] and end at 1: {scales}")
        bounds = []
        for s in scales:
            target = s * rho[-1]
            if abs(target - round(target)) > 1e-6:
                raise ValueError(f"scale {s} gives non-integral latent size {target}")
            owned = [k + 1 for k, r in enumerate(rho) if r <= target + 1e-9]
            if not owned:
                raise ValueError(f"scale {s} owns no level (rho_1={rho[0]} > {target})")
            bounds.append(owned[-1])
        object.__setattr__(self, "boundaries", tuple(bounds))

    @property
    def levels(self) -> int:
        return len(self.resolutions)

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def top(self) -> int:
        return self.resolutions[-1]

    def latent_size(self, n: int) -> int:
        """Spatial size of the latent for scale ``n`` (1-based)."""
        return int(round(self.scales[n - 1] * self.top))

    def token_count(self, upto_level: int | None = None) -> int:
        return sum(r * r for r in self.resolutions[:upto_level])

    def scale_of_level(self, level: int) -> int:
        """1-based scale that commits ``level`` (1-based)."""
        for n, b in enumerate(self.boundaries, start=1):
            if level <= b:
                return n
        raise IndexError(level)

    def truncated(self, n: int) -> "ScaleSchedule":
        """Schedule seen by the scale-``n`` image alone: levels ``1..b_n``, scales rescaled."""
        b = self.boundaries[n - 1]
        top = self.latent_size(n)
        if self.resolutions[b - 1] != top:
            raise ValueError("truncation needs rho_{b_n} == s_n * rho_L")
        sn = self.scales[n - 1]
        return ScaleSchedule(self.resolutions[:b], tuple(s / sn for s in self.scales[:n]))


@dataclass
class TokenSequence:
    """Per-level index grids of one image under ``schedule``."""

    levels: list[np.ndarray]
    schedule: ScaleSchedule

    def __post_init__(self):
        if len(self.levels) > self.schedule.levels:
            raise ValueError("more level grids than schedule levels")
        for grid, rho in zip(self.levels, self.schedule.resolutions):
            if np.shape(grid) != (rho, rho):
                raise ValueError(f"level grid shape {np.shape(grid)} != {(rho, rho)}")
        self.levels = [np.asarray(g, dtype=np.int64) for g in self.levels]

    @property
    def boundaries(self) -> tuple[int, ...]:
        return self.schedule.boundaries

    def flat(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.levels]) if self.levels else np.zeros(0, np.int64)

    def __len__(self) -> int:
        return sum(g.size for g in self.levels)

    def prefix(self, n: int) -> list[np.ndarray]:
        return self.levels[:self.schedule.boundaries[n - 1]]

    def validate(self, vocab: int) -> None:
        for g in self.levels:
            if g.size and (g.min() < 0 or g.max() >= vocab):
                raise ValueError(f"token index outside vocabulary of size {vocab}")

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenSequence) and self.schedule == other.schedule
                and len(self.levels) == len(other.levels)
                and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels)))


def stack_tokens(seqs: Sequence[TokenSequence]) -> list[np.ndarray]:
    """Batch single-image sequences into per-level ``(B, rho, rho)`` arrays."""
    return [np.stack([s.levels[i] for s in seqs]) for i in range(len(seqs[0].levels))]


def unstack_tokens(levels: Sequence[np.ndarray], schedule: ScaleSchedule) -> list[TokenSequence]:
    return [TokenSequence([lv[b] for lv in levels], schedule) for b in range(levels[0].shape[0])]


class PhiFilter(Module):
    """Shared residual 3x3 convolution ``x + conv(x)`` applied to upsampled maps.

    ``PhiFilter(None)`` is the identity.  The learned variant starts at the
    identity (zero kernel) so tokenization is unchanged until it is trained.
    """

    def __init__(self, dim: int | None = None):
        self.weight = Parameter(np.zeros((dim, dim, 3, 3)), name="phi.weight") if dim else None
        self.bias = Parameter(np.zeros(dim), name="phi.bias") if dim else None

    @property
    def is_identity(self) -> bool:
        return self.weight is None

    def forward(self, x):
        if self.weight is None:
            return x
        if isinstance(x, Tensor):
            return x + T.conv2d(x, self.weight, self.bias, 1, 1)
        with T.no_grad():
            return x + T.conv2d(Tensor(x), self.weight, self.bias, 1, 1).data


IDENTITY_PHI = PhiFilter(None)


# quantization ----------------------------------------------------------------
def nearest_codes(points: np.ndarray, vectors: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the closest codebook vector for each row; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    out = np.empty(points.shape[0], dtype=np.int64)
    for start in range(0, points.shape[0], chunk):
        p = points[start:start + chunk]
        d = ((p[:, None, :] - vectors[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + chunk] = np.argmin(d, axis=1)
    return out


def vq_quantize(z: np.ndarray, cb: Codebook) -> tuple[int, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cb.dim,):
        raise T.ShapeError("vq_quantize", z.shape, (cb.dim,))
    idx = int(nearest_codes(z[None, :], cb.vectors)[0])
    return idx, cb.vectors[idx].copy()


def quantize_map(x: np.ndarray, cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise VQ of a ``(B, n_z, h, w)`` map -> (indices (B, h, w), lookup map)."""
    b, c, h, w = x.shape
    idx = nearest_codes(x.transpose(0, 2, 3, 1).reshape(-1, c), cb.vectors).reshape(b, h, w)
    return idx, lookup_map(idx, cb.vectors)


def lookup_map(idx: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return vectors[idx].transpose(0, 3, 1, 2)


def _as_batch(z: np.ndarray) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3:
        return z[None], True
    if z.ndim != 4:
        raise ValueError(f"latent must be (n_z, h, w) or (B, n_z, h, w), got {z.shape}")
    return z, False


def rq_levels(z: np.ndarray, cb: Codebook, resolutions: Sequence[int], phi: PhiFilter = IDENTITY_PHI,
              on_input: Callable[[np.ndarray], None] | None = None):
    """Multi-scale residual quantization of a batch at its native resolution.

    Returns (token grids, committed lookup maps, cumulative map, residual norms).
    ``residual_norms[l]`` is the per-sample L2 norm after ``l`` levels.
    """
    b, c, h, w = z.shape
    residual = z.copy()
    cumulative = np.zeros_like(z)
    tokens, maps = [], []
    norms = [np.sqrt((residual ** 2).sum(axis=(1, 2, 3)))]
    for rho in resolutions:
        small = interpolate(residual, rho, rho, "area") if rho != h else residual
        if on_input is not None:
            on_input(small)
        idx, r = quantize_map(small, cb)
        contrib = phi(interpolate(r, h, w, "bilinear"))
        residual = residual - contrib
        cumulative = cumulative + contrib
        tokens.append(idx)
        maps.append(r)
        norms.append(np.sqrt((residual ** 2).sum(axis=(1, 2, 3))))
    return tokens, maps, cumulative, np.stack(norms, axis=1)


def var_rq_tokenize(z: np.ndarray, cb: Codebook, schedule, phi: PhiFilter = IDENTITY_PHI):
    """Next-scale residual quantization of a latent at resolution ``rho_L``.

    ``schedule`` is a :class:`ScaleSchedule` or a plain non-decreasing list of
    level resolutions (repeating the top resolution gives classic pointwise RQ).
    Returns (tokens, cumulative map); tokens are a :class:`TokenSequence` when
    a schedule is given, else a list of grids.
    """
    zb, single = _as_batch(z)
    resolutions = schedule.resolutions if isinstance(schedule, ScaleSchedule) else tuple(schedule)
    top = resolutions[-1]
    if zb.shape[2:] != (top, top):
        raise T.ShapeError("var_rq_tokenize (latent vs rho_L)", zb.shape[2:], (top, top))
    tokens, _, cumulative, _ = rq_levels(zb, cb, resolutions, phi)
    if single:
        grids = [t[0] for t in tokens]
        seq = TokenSequence(grids, schedule) if isinstance(schedule, ScaleSchedule) else grids
        return seq, cumulative[0]
    if isinstance(schedule, ScaleSchedule):
        return unstack_tokens(tokens, schedule), cumulative
    return tokens, cumulative


@dataclass
class HierarchicalResult:
    """Everything Alg.-style tokenization produces for a batch."""

    tokens: list[np.ndarray]  # per level, (B, rho, rho)
    maps: list[np.ndarray]  # per level, (B, n_z, rho, rho) committed lookups
    features: list[np.ndarray]  # per scale, encoder output before any subtraction
    residuals: list[np.ndarray]  # per scale, what remains after that scale's levels


def scale_images(images: np.ndarray, schedule: ScaleSchedule, f: float) -> list[np.ndarray]:
    """Area-resized copies of ``images`` (B, 3, H, W), one per target scale."""
    out = []
    for n in range(1, schedule.num_scales + 1):
        side = int(round(schedule.latent_size(n) / f))
        out.append(interpolate(images, side, side, "area"))
    return out


def hierarchical_quantize(images: np.ndarray, encode: Callable[[np.ndarray], np.ndarray], cb: Codebook,
                          schedule: ScaleSchedule, phi: PhiFilter, f: float,
                          on_input: Callable[[np.ndarray], None] | None = None) -> HierarchicalResult:
    """Tokenize a batch so that levels ``1..b_n`` alone describe the scale-``n`` image.

    For each scale (ascending) the resized image is encoded; levels committed
    by earlier scales are only subtracted (after resizing to the current
    latent size and ``phi``), and the scale's own levels are quantized from the
    area-downsampled running residual.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"images must be (B, 3, H, W), got {images.shape}")
    if abs(images.shape[2] * f - schedule.top) > 1e-9 or abs(images.shape[3] * f - schedule.top) > 1e-9:
        raise T.ShapeError("hierarchical_tokenize (f*H vs rho_L)", images.shape[2:],
                           (schedule.top / f, schedule.top / f))
    tokens: list[np.ndarray] = []
    maps: list[np.ndarray] = []
    features, residuals = [], []
    prev = 0
    for n, img in enumerate(scale_images(images, schedule, f), start=1):
        side = schedule.latent_size(n)
        z = np.asarray(encode(img), dtype=np.float64)
        if z.shape[2:] != (side, side):
            raise T.ShapeError("encoder output vs scale latent", z.shape[2:], (side, side))
        features.append(z)
        residual = z
        for r in maps[:prev]:
            residual = residual - phi(interpolate(r, side, side, "bilinear"))
        b = schedule.boundaries[n - 1]
        if b > prev:
            new_tokens, new_maps, cum, _ = rq_levels(residual, cb, schedule.resolutions[prev:b], phi, on_input)
            residual = residual - cum
            tokens.extend(new_tokens)
            maps.extend(new_maps)
        residuals.append(residual)
        prev = b
    return HierarchicalResult(tokens, maps, features, residuals)


def hierarchical_tokenize(image, encoder, cb: Codebook, schedule: ScaleSchedule,
                          phi: PhiFilter = IDENTITY_PHI, f: float | None = None):
    """Tokenize one :class:`Image` (or a ``(B, 3, H, W)`` batch) hierarchically.

    ``encoder`` is callable on ``(B, 3, h, w)`` arrays; ``f`` defaults to
    ``encoder.f``.
    """
    f = encoder.f if f is None else f
    encode = encoder.encode_array if hasattr(encoder, "encode_array") else encoder
    if isinstance(image, Image):
        res = hierarchical_quantize(image.pixels[None], encode, cb, schedule, phi, f)
        return TokenSequence([t[0] for t in res.tokens], schedule)
    res = hierarchical_quantize(image, encode, cb, schedule, phi, f)
    return unstack_tokens(res.tokens, schedule)


def assemble(levels: Sequence, size: int, weight, phi: PhiFilter = IDENTITY_PHI) -> Tensor:
    """Differentiable ``sum_l phi(resize(lookup(tokens_l), size))`` for batched grids."""
    total = None
    for grid in levels:
        emb = T.embed_lookup(weight, grid)  # B, rho, rho, n_z
        emb = T.transpose(emb, (0, 3, 1, 2))
        term = phi(interpolate(emb, size, size, "bilinear"))
        total = term if total is None else total + term
    return total


def assemble_latent(tokens: TokenSequence, upto_scale: int, cb: Codebook,
                    phi: PhiFilter = IDENTITY_PHI) -> np.ndarray:
    """Latent map ``(n_z, s_n rho_L, s_n rho_L)`` decodable at scale ``upto_scale``."""
    sched = tokens.schedule
    if not 1 <= upto_scale <= sched.num_scales:
        raise IndexError(f"scale {upto_scale} outside 1..{sched.num_scales}")
    b = sched.boundaries[upto_scale - 1]
    if len(tokens.levels) < b:
        raise ValueError(f"scale {upto_scale} needs {b} levels, sequence has {len(tokens.levels)}")
    with T.no_grad():
        out = assemble([g[None] for g in tokens.levels[:b]], sched.latent_size(upto_scale),
                       Tensor(cb.vectors), phi)
    return out.data[0]


# HVTK token files ----------------------------------------------------------------
def serialize_tokens(tokens: TokenSequence, vocab_size: int) -> bytes:
    sched = tokens.schedule
    if len(tokens.levels) != sched.levels:
        raise ValueError("only complete sequences can be serialized")
    tokens.validate(vocab_size)
    parts = [TOKEN_MAGIC, pack_u32(TOKEN_VERSION), pack_u32(vocab_size), pack_u32(sched.levels)]
    parts += [pack_u32(r) for r in sched.resolutions]
    parts.append(pack_u32(sched.num_scales))
    parts += [pack_f64(s) for s in sched.scales]
    flat = tokens.flat()
    parts.append(pack_u64(flat.size))
    parts.append(b"".join(pack_varint(int(v)) for v in flat))
    return b"".join(parts)


def deserialize_tokens(buf: bytes) -> tuple[TokenSequence, int]:
    """Parse an HVTK buffer -> (sequence, vocabulary size)."""
    r = Reader(buf)
    r.magic(TOKEN_MAGIC)
    version = r.u32("version")
    if version != TOKEN_VERSION:
        raise FormatError(f"unsupported HVTK version {version}", 4)
    vocab = r.u32("vocabulary size")
    count_pos = r.pos
    levels = r.u32("level count")
    if not 1 <= levels <= 4096:
        raise FormatError(f"implausible level count {levels}", count_pos)
    rho = tuple(r.u32(f"rho_{i + 1}") for i in range(levels))
    nscale_pos = r.pos
    nscales = r.u32("scale count")
    if not 1 <= nscales <= levels:
        raise FormatError(f"implausible scale count {nscales}", nscale_pos)
    scales = tuple(r.f64(f"s_{i + 1}") for i in range(nscales))
    try:
        schedule = ScaleSchedule(rho, scales)
    except ValueError as exc:
        raise FormatError(f"invalid schedule: {exc}", 16) from None
    total_pos = r.pos
    total = r.u64("token count")
    if total != schedule.token_count():
        raise FormatError(f"token count {total} != schedule total {schedule.token_count()}", total_pos)
    flat = np.empty(total, dtype=np.int64)
    for i in range(total):
        pos = r.pos
        v = r.varint("token stream")
        if v >= vocab:
            raise FormatError(f"token {v} outside vocabulary {vocab}", pos)
        flat[i] = v
    r.expect_end()
    grids, start = [], 0
    for p in rho:
        grids.append(flat[start:start + p * p].reshape(p, p))
        start += p * p
    return TokenSequence(grids, schedule), vocab


def write_tokens(path, tokens: TokenSequence, vocab_size: int) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_tokens(tokens, vocab_size))


def read_tokens(path) -> tuple[TokenSequence, int]:
    with open(path, "rb") as fh:
        return deserialize_tokens(fh.read())

"""Run configuration: named presets, ``key = value`` files and command-line overrides."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .autoencoder import AutoencoderConfig, RqvaeTrainConfig
from .quantizer import ScaleSchedule
from .resample import DegradationConfig
from .synth import SyntheticDatasetSpec
from .var import VarConfig, VarTrainConfig


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    # tokenizer
    image_size: int = 64
    resolutions: tuple[int, ...] = (2, 3, 4, 6, 8, 12, 16)
    scales: tuple[float, ...] = (0.25, 0.5, 1.0)
    f: float = 0.25
    latent_dim: int = 8
    codebook_size: int = 256
    ae_channels: tuple[int, ...] = (32, 64)
    ae_res_blocks: int = 1
    learned_phi: bool = True
    # autoencoder training
    rqvae_steps: int = 1500
    rqvae_batch: int = 16
    rqvae_lr: float = 1e-3
    rqvae_weight_decay: float = 0.05
    drop_quant_prob: float = 0.5
    perceptual_weight: float = 5.0
    edge_norm: str = "l2"
    commitment_weight: float = 0.25
    vocab_finetune_steps: int = 0
    # transformer
    var_depth: int = 2
    var_heads: int = 2
    var_width: int = 64
    var_steps: int = 1000
    var_batch: int = 8
    var_lr: float = 1e-3
    var_weight_decay: float = 0.005
    var_betas: tuple[float, ...] = (0.9, 0.95)
    dpo_weight: float = 1.0
    dpo_beta: float = 1.0
    class_free_prob: float = 0.1
    cfg_weight: float = 0.0
    top_k: int = 0
    # data
    dataset_count: int = 256
    dataset_seed: int = 0
    blur_sigma: tuple[float, ...] = (0.2, 2.0)
    noise_sigma: tuple[float, ...] = (0.0, 0.05)
    bilinear_only_prob: float = 0.25
    # digest of the autoencoder checkpoint a transformer was trained against
    rqvae_digest: str = ""

    def __post_init__(self):
        self.schedule  # validates the level/scale partition

    @property
    def schedule(self) -> ScaleSchedule:
        return ScaleSchedule(tuple(self.resolutions), tuple(self.scales))

    def autoencoder(self) -> AutoencoderConfig:
        return AutoencoderConfig(f=self.f, latent_dim=self.latent_dim, channels=tuple(self.ae_channels),
                                 res_blocks=self.ae_res_blocks, codebook_size=self.codebook_size,
                                 learned_phi=self.learned_phi)

    def rqvae_training(self) -> RqvaeTrainConfig:
        return RqvaeTrainConfig(steps=self.rqvae_steps, batch_size=self.rqvae_batch, lr=self.rqvae_lr,
                                weight_decay=self.rqvae_weight_decay, drop_quant_prob=self.drop_quant_prob,
                                perceptual_weight=self.perceptual_weight, edge_norm=self.edge_norm,
                                commitment_weight=self.commitment_weight, seed=self.seed)

    def transformer(self) -> VarConfig:
        return VarConfig(depth=self.var_depth, heads=self.var_heads, width=self.var_width,
                         vocab_size=self.codebook_size, latent_dim=self.latent_dim,
                         resolutions=tuple(self.resolutions), scales=tuple(self.scales),
                         dpo_beta=self.dpo_beta, cfg_weight=self.cfg_weight)

    def var_training(self) -> VarTrainConfig:
        return VarTrainConfig(steps=self.var_steps, batch_size=self.var_batch, lr=self.var_lr,
                              betas=tuple(self.var_betas), weight_decay=self.var_weight_decay,
                              dpo_weight=self.dpo_weight, class_free_prob=self.class_free_prob,
                              seed=self.seed)

    def degradation(self) -> DegradationConfig:
        return DegradationConfig(blur_sigma=tuple(self.blur_sigma), noise_sigma=tuple(self.noise_sigma),
                                 factor=4, bilinear_only_prob=self.bilinear_only_prob, seed=self.seed)

    def dataset(self, count: int | None = None, seed: int | None = None) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(count=self.dataset_count if count is None else count,
                                    resolution=self.image_size,
                                    seed=self.dataset_seed if seed is None else seed)

    # text form -----------------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                v = ",".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def updated(self, **values) -> "RunConfig":
        return dataclasses.replace(self, **values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_value(key: str, raw: str):
    """Convert ``raw`` to the type of field ``key`` (tuples are comma separated)."""
    if key not in _FIELDS:
        raise KeyError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        return type(default)(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from None


PRESETS = {
    "desk": {},
    "paper": dict(
        preset="paper", image_size=512, resolutions=(4, 6, 8, 10, 14, 16, 20, 24, 28, 32),
        latent_dim=32, codebook_size=4096, ae_channels=(128, 256), ae_res_blocks=2,
        rqvae_steps=25000, rqvae_batch=384, rqvae_lr=2.5e-4, rqvae_weight_decay=0.05,
        var_depth=16, var_heads=16, var_width=1024, var_batch=384, var_lr=1e-3,
        var_weight_decay=0.005, dataset_count=0,
    ),
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(**PRESETS[name]) if PRESETS[name] else RunConfig()


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """``key = value`` lines; ``#`` starts a comment. A ``preset`` key selects the base."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        pairs.append((key, raw))
    cfg = base
    for key, raw in pairs:
        if key == "preset":
            cfg = preset(raw)
    cfg = cfg or RunConfig()
    values = {k: parse_value(k, raw) for k, raw in pairs if k != "preset"}
    return cfg.updated(**values)


def load_config(path: str | None = None, preset_name: str | None = None,
                overrides: dict[str, str] | None = None) -> RunConfig:
    """Preset, then file, then explicit ``key=value`` overrides."""
    cfg = preset(preset_name) if preset_name else None
    if path:
        with open(path) as fh:
            cfg = parse_config_text(fh.read(), cfg)
    cfg = cfg or RunConfig()
    if overrides:
        cfg = cfg.updated(**{k: parse_value(k, v) for k, v in overrides.items()})
    return cfg

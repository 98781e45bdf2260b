"""Masked autoencoder over multispectral patch tokens.

32x32 patches tokenized into a 4x4 grid (8 tokens per side by default),
uniform random masking, ViT encoder over the visible tokens, lightweight
transformer decoder reconstructing the masked tokens. Runs with one
acquisition per sample or three same-hour acquisitions.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encodings import (
    EncodingConfig,
    SpectralGroupTable,
    sincos_2d,
    temporal_encoding_batch,
)
from .nn import LayerNorm, Linear, Module, TransformerBlock, parameter, trunc_normal
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    token_size: int = 4
    bands: int = 11
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    decoder_dim: int = 512
    decoder_depth: int = 4
    decoder_heads: int = 8
    mask_ratio: float = 0.75
    timesteps: int = 1
    norm_pix: bool = True
    spectral_groups: int = 1
    mask_consistent_time: bool = False
    base_frequency: float = 10000.0
    reference_year: int = 2014

    def __post_init__(self):
        if self.image_size % self.token_size:
            raise ShapeError(
                f"image_size {self.image_size} not divisible by token_size {self.token_size}"
            )
        if self.embed_dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ShapeError("embedding dims must be divisible by head counts")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ShapeError("embedding dims must be divisible by 4 (spatial sin-cos halves)")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside (0, 1)")
        if self.timesteps not in (1, 3):
            raise ValueError(f"timesteps must be 1 or 3, got {self.timesteps}")
        if not 1 <= self.spectral_groups <= self.bands:
            raise ValueError("spectral_groups must be in [1, bands]")

    @property
    def grid(self):
        return self.image_size // self.token_size

    @property
    def tokens_per_frame(self):
        return self.grid * self.grid * self.spectral_groups

    @property
    def n_tokens(self):
        return self.timesteps * self.tokens_per_frame

    def band_groups(self):
        return [list(g) for g in np.array_split(np.arange(self.bands), self.spectral_groups)]

    def encoding_config(self, dim=None):
        return EncodingConfig(
            embed_dim=dim or self.embed_dim,
            base_frequency=self.base_frequency,
            spectral_groups=self.spectral_groups,
            reference_year=self.reference_year,
        )


@dataclass(frozen=True)
class MaskPlan:
    """Shuffle permutation with the visible prefix and its inverse."""

    n_tokens: int
    n_visible: int
    shuffle: np.ndarray
    keep_ids: np.ndarray = field(default=None)
    restore: np.ndarray = field(default=None)

    def __post_init__(self):
        shuffle = np.asarray(self.shuffle, dtype=np.int64)
        if sorted(shuffle.tolist()) != list(range(self.n_tokens)):
            raise ValueError("shuffle is not a permutation of the token ids")
        if not 0 < self.n_visible <= self.n_tokens:
            raise ValueError(f"n_visible {self.n_visible} outside (0, {self.n_tokens}]")
        object.__setattr__(self, "shuffle", shuffle)
        object.__setattr__(self, "keep_ids", shuffle[: self.n_visible].copy())
        object.__setattr__(self, "restore", np.argsort(shuffle))

    @property
    def masked_ids(self):
        return self.shuffle[self.n_visible :]


def n_visible_tokens(n_tokens, mask_ratio):
    return math.ceil((1.0 - mask_ratio) * n_tokens)


def random_mask(n_tokens, mask_ratio, rng):
    """Uniform shuffle; the first ceil((1-r)*n) positions stay visible."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio {mask_ratio} outside (0, 1)")
    shuffle = rng.permutation(n_tokens)
    return MaskPlan(n_tokens, n_visible_tokens(n_tokens, mask_ratio), shuffle)


def identity_plan(n_tokens):
    """All-visible plan (fine-tuning and the mask_ratio -> 0 limit)."""
    return MaskPlan(n_tokens, n_tokens, np.arange(n_tokens, dtype=np.int64))


def consistent_time_mask(tokens_per_frame, timesteps, mask_ratio, rng):
    """Same spatial mask at every timestep; n_visible = T * ceil((1-r)*L)."""
    base = random_mask(tokens_per_frame, mask_ratio, rng)
    keep = np.concatenate([t * tokens_per_frame + base.keep_ids for t in range(timesteps)])
    masked = np.concatenate([t * tokens_per_frame + base.masked_ids for t in range(timesteps)])
    shuffle = np.concatenate([keep, masked])
    return MaskPlan(timesteps * tokens_per_frame, keep.size, shuffle)


def patchify(x, token_size):
    """[C, H, W] -> [L, C*p*p]; row-major tokens, band-major rows."""
    c, h, w = x.shape
    p = token_size
    if h % p or w % p:
        raise ShapeError(f"spatial extents {(h, w)} not divisible by token size {p}")
    gh, gw = h // p, w // p
    return (
        x.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)
    )


def unpatchify(tokens, token_size, bands=None):
    """Exact inverse of patchify for square token grids."""
    n, row = tokens.shape
    p = token_size
    g = math.isqrt(n)
    if g * g != n:
        raise ShapeError(f"token count {n} is not a perfect square")
    if row % (p * p):
        raise ShapeError(f"row length {row} not a multiple of token area {p * p}")
    c = row // (p * p)
    if bands is not None and bands != c:
        raise ShapeError(f"row length {row} implies {c} bands, expected {bands}")
    return (
        tokens.reshape(g, g, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, g * p, g * p)
    )


@dataclass
class PretrainBatch:
    """patches [B, T, C, H, W] float32, timestamps [B][T], per-sample plans."""

    patches: np.ndarray
    timestamps: list
    plans: list

    def __post_init__(self):
        b, t = self.patches.shape[0], self.patches.shape[1]
        if len(self.timestamps) != b or any(len(ts) != t for ts in self.timestamps):
            raise ShapeError("timestamps do not match patches [B, T] layout")
        if len(self.plans) != b:
            raise ShapeError("one MaskPlan per sample required")
        if t == 3:
            for ts in self.timestamps:
                epochs = [x.epoch_seconds for x in ts]
                if epochs != sorted(epochs):
                    raise ValueError("multi-timestep samples must be time-sorted")
                if len({x.hour_bucket for x in ts}) != 1:
                    raise ValueError("multi-timestep samples must share a clock hour")


class Encoder(Module):
    """Patch embedding + token encodings + ViT blocks over visible tokens."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        p2 = cfg.token_size * cfg.token_size
        self.patch_embeds = [
            Linear(len(bands) * p2, cfg.embed_dim, rng) for bands in cfg.band_groups()
        ]
        self.cls_token = parameter(trunc_normal(rng, (1, 1, cfg.embed_dim)))
        self.spectral = (
            SpectralGroupTable(cfg.spectral_groups, cfg.embed_dim, rng)
            if cfg.spectral_groups > 1
            else None
        )
        self.blocks = [
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.depth)
        ]
        self.norm = LayerNorm(cfg.embed_dim)
        self._band_groups = cfg.band_groups()
        self._field_cache = OrderedDict()

    def group_tokens(self, patches):
        """[B, T, C, H, W] -> per-(t, g) raw token blocks [B, L, c_g*p*p]."""
        cfg = self.cfg
        B, Tn = patches.shape[0], patches.shape[1]
        p = cfg.token_size
        g = cfg.grid
        blocks = []
        for t in range(Tn):
            for bands in self._band_groups:
                x = patches[:, t, bands]  # [B, c_g, H, W]
                c = x.shape[1]
                tok = (
                    x.reshape(B, c, g, p, g, p)
                    .transpose(0, 2, 4, 1, 3, 5)
                    .reshape(B, g * g, c * p * p)
                )
                blocks.append(np.ascontiguousarray(tok, dtype=T.default_dtype()))
        return blocks

    def _sample_field(self, ts, d):
        """[N, d] spatial+temporal field for one sample's timestamp tuple."""
        cfg = self.cfg
        key = (tuple(t.epoch_seconds for t in ts), d, str(T.default_dtype()))
        cached = self._field_cache.get(key)
        if cached is not None:
            self._field_cache.move_to_end(key)
            return cached
        ecfg = cfg.encoding_config(d)
        cells = cfg.grid * cfg.grid
        spatial = np.tile(sincos_2d(cfg.grid, cfg.grid, d, ecfg.base_frequency),
                          (cfg.spectral_groups, 1))
        temporal = temporal_encoding_batch(list(ts), d, ecfg)
        field_arr = np.concatenate(
            [spatial + temporal[t] for t in range(len(ts))], axis=0
        )
        self._field_cache[key] = field_arr
        if len(self._field_cache) > 512:
            self._field_cache.popitem(last=False)
        return field_arr

    def token_encoding_field(self, timestamps, dim=None):
        """Constant [B, N, d] spatial+temporal field for a batch."""
        d = dim or self.cfg.embed_dim
        return np.stack([self._sample_field(ts, d) for ts in timestamps])

    def group_ids(self):
        cfg = self.cfg
        cells = cfg.grid * cfg.grid
        per_frame = np.repeat(np.arange(cfg.spectral_groups), cells)
        return np.tile(per_frame, cfg.timesteps)

    def __call__(self, patches, timestamps, plans=None):
        """Returns [B, 1 + V, d]; V = n_visible (or all tokens when plans is None)."""
        cfg = self.cfg
        B = patches.shape[0]
        blocks = self.group_tokens(patches)
        embedded = [
            self.patch_embeds[i % cfg.spectral_groups](Tensor(blk))
            for i, blk in enumerate(blocks)
        ]
        x = embedded[0] if len(embedded) == 1 else T.concat(embedded, axis=1)
        x = x + Tensor(self.token_encoding_field(timestamps))
        if self.spectral is not None:
            x = x + self.spectral.lookup(self.group_ids())
        if plans is not None:
            keep = np.stack([plan.keep_ids for plan in plans])
            x = T.gather_tokens(x, keep)
        cls = T.broadcast_to(self.cls_token, (B, 1, cfg.embed_dim))
        x = T.concat([cls, x], axis=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class Decoder(Module):
    """Re-inserts mask tokens, unshuffles, decodes to per-token pixel rows."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        dd = cfg.decoder_dim
        p2 = cfg.token_size * cfg.token_size
        self.embed = Linear(cfg.embed_dim, dd, rng)
        self.mask_token = parameter(trunc_normal(rng, (1, 1, dd)))
        self.spectral = (
            SpectralGroupTable(cfg.spectral_groups, dd, rng)
            if cfg.spectral_groups > 1
            else None
        )
        self.blocks = [
            TransformerBlock(dd, cfg.decoder_heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.decoder_depth)
        ]
        self.norm = LayerNorm(dd)
        self.heads = [
            Linear(dd, len(bands) * p2, rng) for bands in cfg.band_groups()
        ]

    def __call__(self, latent, timestamps, plans, encoder):
        """latent [B, 1+V, d] -> per-(t, g) prediction blocks [B, L, c_g*p*p]."""
        cfg = self.cfg
        B = latent.shape[0]
        n = plans[0].n_tokens
        v = plans[0].n_visible
        if latent.shape[1] != 1 + v:
            raise ShapeError(
                f"latent token count {latent.shape[1]} inconsistent with plan (1 + {v})"
            )
        x = self.embed(latent)
        cls, visible = x[:, :1, :], x[:, 1:, :]
        if v < n:
            fill = T.broadcast_to(self.mask_token, (B, n - v, cfg.decoder_dim))
            full = T.concat([visible, fill], axis=1)
        else:
            full = visible
        restore = np.stack([plan.restore for plan in plans])
        full = T.gather_tokens(full, restore)
        full = full + Tensor(encoder.token_encoding_field(timestamps, dim=cfg.decoder_dim))
        if self.spectral is not None:
            full = full + self.spectral.lookup(encoder.group_ids())
        x = T.concat([cls, full], axis=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        x = x[:, 1:, :]
        cells = cfg.grid * cfg.grid
        preds = []
        for t in range(cfg.timesteps):
            for g in range(cfg.spectral_groups):
                start = (t * cfg.spectral_groups + g) * cells
                preds.append(self.heads[g](x[:, start : start + cells, :]))
        return preds


def _standardize_tokens(target, eps=1e-6):
    mu = target.mean(axis=-1, keepdims=True)
    var = target.var(axis=-1, keepdims=True)
    return (target - mu) / np.sqrt(var + eps)


def recon_loss(pred, target_tokens, plan, norm_pix=True):
    """MSE averaged over masked tokens only (single shared plan)."""
    mask = np.zeros(plan.n_tokens, dtype=pred.dtype)
    mask[plan.masked_ids] = 1.0
    batch = np.broadcast_to(mask, (pred.shape[0], plan.n_tokens)).copy()
    return _masked_token_mse([pred], [np.asarray(target_tokens)], batch, norm_pix)


def _masked_token_mse(pred_blocks, target_blocks, mask, norm_pix):
    """pred/target blocks: aligned lists of [B, L_i, P_i]; mask [B, N]."""
    total_masked = float(mask.sum())
    if total_masked == 0:
        raise ValueError("reconstruction loss undefined: empty masked set")
    errs = []
    for pred, target in zip(pred_blocks, target_blocks):
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
        t = _standardize_tokens(target) if norm_pix else target
        diff = pred - Tensor(np.ascontiguousarray(t, dtype=pred.dtype))
        errs.append((diff * diff).mean(axis=-1))
    per_token = errs[0] if len(errs) == 1 else T.concat(errs, axis=1)
    weighted = per_token * Tensor(mask)
    return weighted.sum() * (1.0 / total_masked)


class MaskedAutoencoder(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def make_plans(self, batch_size, rng):
        cfg = self.cfg
        if cfg.mask_consistent_time and cfg.timesteps > 1:
            return [
                consistent_time_mask(cfg.tokens_per_frame, cfg.timesteps, cfg.mask_ratio, rng)
                for _ in range(batch_size)
            ]
        return [random_mask(cfg.n_tokens, cfg.mask_ratio, rng) for _ in range(batch_size)]

    def target_blocks(self, patches):
        """Per-(t, g) standardization targets matching decoder output order."""
        return self.encoder.group_tokens(patches)

    def loss(self, batch: PretrainBatch):
        latent = self.encoder(batch.patches, batch.timestamps, batch.plans)
        preds = self.decoder(latent, batch.timestamps, batch.plans, self.encoder)
        targets = self.target_blocks(batch.patches)
        mask = np.zeros((len(batch.plans), batch.plans[0].n_tokens), dtype=latent.dtype)
        for i, plan in enumerate(batch.plans):
            mask[i, plan.masked_ids] = 1.0
        return _masked_token_mse(preds, targets, mask, self.cfg.norm_pix)

    def reconstruct(self, patches, timestamps, plans):
        """Full-token reconstruction, mostly for inspection: [B, T, C, H, W]."""
        cfg = self.cfg
        with T.no_grad():
            latent = self.encoder(patches, timestamps, plans)
            preds = self.decoder(latent, timestamps, plans, self.encoder)
        B = patches.shape[0]
        out = np.zeros_like(patches)
        cells = cfg.grid * cfg.grid
        groups = cfg.band_groups()
        for t in range(cfg.timesteps):
            for g, bands in enumerate(groups):
                blk = preds[t * cfg.spectral_groups + g].data
                for b in range(B):
                    out[b, t, bands] = unpatchify(blk[b], cfg.token_size)
        return out


def count_encoder_parameters(model_or_encoder):
    enc = getattr(model_or_encoder, "encoder", model_or_encoder)
    return enc.param_count()


def pretrain_step(batch, model, optimizer, lr=None):
    """Forward, backward, optimizer update; returns the pre-update loss."""
    model.zero_grad()
    loss = model.loss(batch)
    loss.backward()
    optimizer.step(lr=lr)
    return loss.item()


def toy_config(**overrides):
    """Small config for gradient checks and fast tests."""
    base = dict(
        image_size=8,
        token_size=4,
        bands=3,
        embed_dim=16,
        depth=2,
        heads=2,
        mlp_ratio=2.0,
        decoder_dim=8,
        decoder_depth=1,
        decoder_heads=2,
        mask_ratio=0.75,
    )
    base.update(overrides)
    return ModelConfig(**base)

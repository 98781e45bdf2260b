"""Fine-tuning machinery: token-grid extraction, the transposed-convolution
residual decoder producing 32x32 two-class logits, and the two objectives
(weighted cross-entropy for recall, soft Dice for precision)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mae import Encoder, ModelConfig
from .nn import Conv2d, Module, TransposedConv2d
from .tensor import ShapeError, Tensor

LOSS_MONITORS = {"weighted_ce": "balanced_accuracy", "dice": "iou_pos"}


@dataclass(frozen=True)
class SegConfig:
    n_classes: int = 2
    decoder_channels: tuple = (256, 128)
    residual_blocks_per_stage: int = 1
    class_weights: tuple = (1.0, 1.0)
    dice_eps: float = 1.0
    loss_kind: str = "weighted_ce"
    monitor_metric: str = None

    def __post_init__(self):
        if self.n_classes != 2:
            raise ValueError("binary segmentation only")
        if self.loss_kind not in LOSS_MONITORS:
            raise ValueError(f"loss_kind must be one of {sorted(LOSS_MONITORS)}")
        if min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")
        expected = LOSS_MONITORS[self.loss_kind]
        if self.monitor_metric is None:
            object.__setattr__(self, "monitor_metric", expected)
        elif self.monitor_metric != expected:
            raise ValueError(
                f"loss {self.loss_kind} is monitored with {expected}, "
                f"not {self.monitor_metric}"
            )


def tokens_to_grid(encoder_out, cfg: ModelConfig):
    """[B, 1 + T*L, d] -> [B, d, g, g]: drop the class token, keep the most
    recent timestep, reshape row-major. With spectral groups > 1 the group
    tokens of each cell are averaged."""
    g = cfg.grid
    frame = cfg.tokens_per_frame
    expected = 1 + cfg.timesteps * frame
    if encoder_out.shape[1] != expected:
        raise ShapeError(
            f"encoder output has {encoder_out.shape[1]} tokens, expected {expected} "
            "(fine-tuning runs unmasked)"
        )
    B, _, d = encoder_out.shape
    last = encoder_out[:, 1 + (cfg.timesteps - 1) * frame :, :]
    if cfg.spectral_groups > 1:
        last = last.reshape((B, cfg.spectral_groups, g * g, d)).mean(axis=1)
    return last.transpose((0, 2, 1)).reshape((B, d, g, g))


class ResidualBlock(Module):
    """Two same-padding 3x3 convs with an additive skip."""

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def __call__(self, x):
        return x + self.conv2(T.gelu(self.conv1(x)))


class SegDecoder(Module):
    """1x1 stem into the widest stage, then per stage: k=2/s=2 transposed
    conv doubling the grid plus residual refinement; 1x1 conv to 2 logits."""

    def __init__(self, in_dim, cfg: SegConfig, rng):
        widths = list(cfg.decoder_channels)
        self.stem = Conv2d(in_dim, widths[0], 1, rng)
        stages = []
        prev = widths[0]
        for w in widths:
            stage = [TransposedConv2d(prev, w, 2, 2, rng)]
            stage += [ResidualBlock(w, rng) for _ in range(cfg.residual_blocks_per_stage)]
            stages.append(stage)
            prev = w
        self.stages = [layer for stage in stages for layer in stage]
        self.head = Conv2d(prev, cfg.n_classes, 1, rng)

    def __call__(self, grid):
        x = self.stem(grid)
        for layer in self.stages:
            x = layer(x)
        return self.head(x)


class SegmentationModel(Module):
    """Pretrained (or fresh) encoder plus the upsampling decoder."""

    def __init__(self, model_cfg: ModelConfig, seg_cfg: SegConfig, rng, encoder=None):
        self.cfg = model_cfg
        self.seg_cfg = seg_cfg
        self.encoder = encoder if encoder is not None else Encoder(model_cfg, rng)
        upsample = 2 ** len(seg_cfg.decoder_channels)
        if model_cfg.grid * upsample != model_cfg.image_size:
            raise ShapeError(
                f"decoder with {len(seg_cfg.decoder_channels)} stages maps grid "
                f"{model_cfg.grid} to {model_cfg.grid * upsample}, "
                f"not image size {model_cfg.image_size}"
            )
        self.decoder = SegDecoder(model_cfg.embed_dim, seg_cfg, rng)

    def __call__(self, patches, timestamps):
        latent = self.encoder(patches, timestamps, plans=None)
        return self.decoder(tokens_to_grid(latent, self.cfg))

    def loss(self, logits, targets):
        if self.seg_cfg.loss_kind == "dice":
            return dice_loss(logits, targets, self.seg_cfg.dice_eps)
        return weighted_ce(logits, targets, self.seg_cfg.class_weights)


def _check_binary_targets(target):
    target = np.asarray(target)
    vals = np.unique(target)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"target mask contains values outside {{0, 1}}: {vals[:5]}")
    return target.astype(np.int64)


def _class_last(logits):
    """[B, 2, H, W] -> [B*H*W, 2]."""
    B, C, H, W = logits.shape
    return logits.transpose((0, 2, 3, 1)).reshape((B * H * W, C))


def weighted_ce(logits, target, weights=(1.0, 1.0)):
    """Class-weighted mean of per-pixel cross-entropy:
    sum(w_t * nll) / sum(w_t)."""
    w0, w1 = weights
    if w0 <= 0 or w1 <= 0:
        raise ValueError("class weights must be positive")
    target = _check_binary_targets(target)
    flat = _class_last(logits)
    lsm = T.log_softmax_lastdim(flat)
    t = target.reshape(-1)
    pix_w = np.where(t == 1, float(w1), float(w0)).astype(lsm.dtype)
    onehot = np.zeros(flat.shape, dtype=lsm.dtype)
    onehot[np.arange(t.size), t] = 1.0
    total_w = float(pix_w.sum())
    weighted = lsm * Tensor(onehot * pix_w[:, None])
    return weighted.sum() * (-1.0 / total_w)


def dice_loss(logits, target, eps=1.0):
    """Foreground-only soft Dice: 1 - (2 sum(p t) + eps) / (sum p + sum t + eps)."""
    if eps <= 0:
        raise ValueError("dice eps must be positive")
    target = _check_binary_targets(target)
    probs = T.softmax_lastdim(_class_last(logits))
    p = probs[:, 1]
    t = target.reshape(-1).astype(probs.dtype)
    inter = (p * Tensor(t)).sum()
    num = inter * 2.0 + eps
    den = p.sum() + (float(t.sum()) + eps)
    return 1.0 - num / den


def predict_mask(logits):
    """Per-pixel argmax over the class axis; exact ties go to class 0."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1).astype(np.uint8)


def augment_sample(data, label, rng):
    """Label-preserving flips and 90-degree rotations, each with p=0.5,
    applied jointly to a [T, C, H, W] block and its [H, W] mask."""
    if rng.random() < 0.5:
        data = data[..., ::-1]
        label = label[..., ::-1] if label is not None else None
    if rng.random() < 0.5:
        data = data[..., ::-1, :]
        label = label[..., ::-1, :] if label is not None and label.ndim >= 2 else label
    if rng.random() < 0.5:
        k = int(rng.integers(1, 4))
        data = np.rot90(data, k, axes=(-2, -1))
        label = np.rot90(label, k, axes=(-2, -1)) if label is not None else None
    return np.ascontiguousarray(data), (
        np.ascontiguousarray(label) if label is not None else None
    )

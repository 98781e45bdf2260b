"""Spatial, temporal, and spectral token encodings.

Spatial and temporal encodings are fixed sin-cos constructions; the
temporal one keeps minute-of-day so tokens minutes apart stay
distinguishable. Only the per-group spectral embedding is learned.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

from . import tensor as T
from .nn import Module, parameter
from .tensor import ShapeError, Tensor

_UNIX_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class Timestamp:
    """Calendar decomposition of an acquisition time (UTC).

    Fields are derived from ``epoch_seconds``; construction with
    inconsistent fields raises.
    """

    year: int
    day_of_year: int
    minute_of_day: int
    epoch_seconds: int

    def __post_init__(self):
        ref = Timestamp.from_epoch(self.epoch_seconds)
        if (ref.year, ref.day_of_year, ref.minute_of_day) != (
            self.year,
            self.day_of_year,
            self.minute_of_day,
        ):
            raise ValueError(
                f"calendar fields {self.year}/{self.day_of_year}/{self.minute_of_day} "
                f"inconsistent with epoch_seconds={self.epoch_seconds}"
            )

    @classmethod
    def from_epoch(cls, epoch_seconds):
        epoch_seconds = int(epoch_seconds)
        dt = _UNIX_EPOCH + timedelta(seconds=epoch_seconds)
        obj = object.__new__(cls)
        object.__setattr__(obj, "year", dt.year)
        object.__setattr__(obj, "day_of_year", dt.timetuple().tm_yday)
        object.__setattr__(obj, "minute_of_day", dt.hour * 60 + dt.minute)
        object.__setattr__(obj, "epoch_seconds", epoch_seconds)
        return obj

    @classmethod
    def from_calendar(cls, year, day_of_year, minute_of_day, second=0):
        if not 1 <= day_of_year <= 366:
            raise ValueError(f"day_of_year {day_of_year} outside [1, 366]")
        if not 0 <= minute_of_day <= 1439:
            raise ValueError(f"minute_of_day {minute_of_day} outside [0, 1439]")
        dt = datetime(year, 1, 1, tzinfo=timezone.utc) + timedelta(
            days=day_of_year - 1, minutes=minute_of_day, seconds=second
        )
        return cls.from_epoch(int((dt - _UNIX_EPOCH).total_seconds()))

    @property
    def hour_bucket(self):
        return self.epoch_seconds // 3600

    def same_hour(self, other):
        return self.hour_bucket == other.hour_bucket


TEMPORAL_COMPONENTS = ("year_offset", "day_of_year", "minute_of_day")


@dataclass(frozen=True)
class EncodingConfig:
    embed_dim: int
    temporal_components: tuple = TEMPORAL_COMPONENTS
    base_frequency: float = 10000.0
    spectral_groups: int = 1
    reference_year: int = 2014

    def __post_init__(self):
        if self.embed_dim % 4:
            # need even halves for the 2-D spatial split; divisible by 6
            # additionally makes the temporal thirds tile without padding
            raise ShapeError(f"embed_dim {self.embed_dim} must be divisible by 4")
        if self.spectral_groups < 1:
            raise ValueError("spectral_groups must be >= 1")
        if self.temporal_components != TEMPORAL_COMPONENTS:
            raise ValueError(f"temporal components fixed to {TEMPORAL_COMPONENTS}")


def _sincos_matrix(positions, d, base):
    """Vectorized sin-cos rows: positions [n] -> [n, d] in float64."""
    k = np.arange(d // 2, dtype=np.float64)
    omega = base ** (-k / (d / 2))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_1d(pos, d, base=10000.0):
    """Fixed frequency ladder: concat(sin(pos*w_k), cos(pos*w_k))."""
    if d % 2:
        raise ShapeError(f"sincos_1d needs even d, got {d}")
    return _sincos_matrix([pos], d, base)[0].astype(T.default_dtype())


def sincos_2d(grid_h, grid_w, d, base=10000.0):
    """Row-major (y, x) grid encoding; y in the first half, x in the second."""
    if d % 2 or (d // 2) % 2:
        raise ShapeError(f"sincos_2d needs d divisible by 2 with even halves, got {d}")
    ys = np.repeat(np.arange(grid_h), grid_w)
    xs = np.tile(np.arange(grid_w), grid_h)
    half = d // 2
    out = np.concatenate(
        [_sincos_matrix(ys, half, base), _sincos_matrix(xs, half, base)], axis=1
    )
    return out.astype(T.default_dtype())


def _temporal_positions(ts, cfg):
    return (
        ts.year - cfg.reference_year,
        ts.day_of_year,
        ts.minute_of_day,
    )


def temporal_encoding(ts, d, cfg):
    """Equal thirds over (year offset, day-of-year, minute-of-day)."""
    if d % 3 or (d // 3) % 2:
        raise ShapeError(f"temporal_encoding needs d divisible by 3 with even thirds, got {d}")
    third = d // 3
    parts = [
        _sincos_matrix([pos], third, cfg.base_frequency)[0]
        for pos in _temporal_positions(ts, cfg)
    ]
    return np.concatenate(parts).astype(T.default_dtype())


def temporal_encoding_padded(ts, d, cfg):
    """Temporal encoding for dims not divisible by 6: equal even thirds
    of 2*floor(d/6) dims each, zero-filled remainder. Equals
    temporal_encoding when d % 6 == 0."""
    per = 2 * (d // 6)
    if per == 0:
        raise ShapeError(f"temporal encoding needs d >= 6, got {d}")
    out = np.zeros(d, dtype=T.default_dtype())
    for i, pos in enumerate(_temporal_positions(ts, cfg)):
        out[i * per : (i + 1) * per] = _sincos_matrix([pos], per, cfg.base_frequency)[0]
    return out


def temporal_encoding_batch(timestamps, d, cfg):
    """Vectorized padded temporal encoding for a flat list of Timestamps."""
    per = 2 * (d // 6)
    if per == 0:
        raise ShapeError(f"temporal encoding needs d >= 6, got {d}")
    n = len(timestamps)
    out = np.zeros((n, d), dtype=T.default_dtype())
    cols = list(zip(*(_temporal_positions(ts, cfg) for ts in timestamps)))
    for i, positions in enumerate(cols):
        out[:, i * per : (i + 1) * per] = _sincos_matrix(
            positions, per, cfg.base_frequency
        ).astype(T.default_dtype())
    return out


class SpectralGroupTable(Module):
    """Learned per-group embedding rows, init N(0, 0.02^2)."""

    def __init__(self, n_groups, d, rng):
        if n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        self.table = parameter(rng.normal(0.0, 0.02, size=(n_groups, d)))
        self.n_groups = n_groups

    def lookup_one(self, group):
        """Single-group vector (raw buffer, no graph)."""
        if not 0 <= group < self.n_groups:
            raise IndexError(f"group {group} out of range [0, {self.n_groups})")
        return self.table.data[group]

    def lookup(self, group_ids):
        """Differentiable lookup of per-token group rows."""
        ids = np.asarray(group_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_groups):
            raise IndexError(f"group ids outside [0, {self.n_groups})")
        return T.embedding(self.table, ids)


def encoding_field(grid, timestamps, d, cfg):
    """Constant (non-learned) part of the token encoding: spatial repeated
    across timesteps/groups plus per-timestep temporal rows.

    Token order is [t][g][y][x]; ``timestamps`` has one entry per token.
    Returns an [N, d] array.
    """
    gh, gw = grid
    cells = gh * gw
    n = len(timestamps)
    if n % cells:
        raise ShapeError(f"token count {n} not a multiple of grid cells {cells}")
    spatial_rows = sincos_2d(gh, gw, d, cfg.base_frequency)
    blocks = n // cells
    spatial = np.tile(spatial_rows, (blocks, 1))
    temporal = temporal_encoding_batch(timestamps, d, cfg)
    return spatial + temporal


def compose_token_embedding(tokens, grid, timestamps, groups=None, cfg=None, table=None):
    """tokens [N, d] plus spatial + temporal (+ spectral when groups > 1)."""
    if cfg is None:
        cfg = EncodingConfig(embed_dim=tokens.shape[-1])
    n, d = tokens.shape
    if d != cfg.embed_dim:
        raise ShapeError(f"token dim {d} != config embed_dim {cfg.embed_dim}")
    if len(timestamps) != n:
        raise ShapeError(f"{len(timestamps)} timestamps for {n} tokens")
    out = tokens + Tensor(encoding_field(grid, timestamps, d, cfg))
    if cfg.spectral_groups > 1:
        if table is None or groups is None:
            raise ValueError("spectral_groups > 1 requires a table and per-token groups")
        out = out + table.lookup(groups)
    return out

"""Dataset mechanics: scene tiling, patch filtering, timestamp collocation,
year-based splits, same-hour multi-timestep sampling, the fire-sample
training filter, the HFMP1 container format, and a synthetic scene
generator for desk-scale runs."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encodings import Timestamp
from .kernels import fnv1a64

PATCH = 32
BANDS = 11

CONTAINER_MAGIC = b"HFMP1"
CONTAINER_VERSION = 1
_FLAG_LABEL = 1


class ContainerError(ValueError):
    pass


class MagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncationError(ContainerError):
    pass


class DigestMismatchError(ContainerError):
    pass


class UnsortedInputError(ValueError):
    pass


class SampleUnavailableError(LookupError):
    """No same-hour bucket with enough acquisitions at this location."""


class YearCoverageError(KeyError):
    """A timestamp's year is not covered by the split rules."""


@dataclass
class Scene:
    """One acquisition of a region: radiances, land/cloud masks, identity."""

    data: np.ndarray  # [BANDS, H, W] float32
    timestamp: Timestamp
    land_mask: np.ndarray  # [H, W] uint8, 1 = land
    cloud_mask: np.ndarray = None  # optional [H, W] uint8
    scene_id: str = "scene"

    def __post_init__(self):
        h, w = self.data.shape[1], self.data.shape[2]
        if h < PATCH or w < PATCH:
            raise ValueError(f"scene extent {(h, w)} smaller than {PATCH}")
        if self.land_mask.shape != (h, w):
            raise ValueError("land mask does not match scene extent")
        if self.cloud_mask is not None and self.cloud_mask.shape != (h, w):
            raise ValueError("cloud mask does not match scene extent")


@dataclass
class PatchSample:
    """One training unit: [T, BANDS, 32, 32] block with timestamps."""

    data: np.ndarray
    timestamps: list
    label: np.ndarray = None  # optional [32, 32] {0,1}
    location: tuple = ("scene", 0, 0)

    def __post_init__(self):
        t = self.data.shape[0]
        if t not in (1, 3):
            raise ValueError(f"timesteps must be 1 or 3, got {t}")
        if len(self.timestamps) != t:
            raise ValueError("one timestamp per timestep required")
        if t == 3:
            epochs = [ts.epoch_seconds for ts in self.timestamps]
            if epochs != sorted(epochs) or len(set(epochs)) != 3:
                raise ValueError("multi-timestep samples must be strictly increasing")
            if len({ts.hour_bucket for ts in self.timestamps}) != 1:
                raise ValueError("multi-timestep samples must share a clock hour")
        if self.label is not None:
            vals = np.unique(self.label)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError("label mask must be binary")

    @property
    def year(self):
        return self.timestamps[-1].year


@dataclass
class Tile:
    """A tiled patch plus the sub-masks needed for keep/discard filtering."""

    sample: PatchSample
    land: np.ndarray
    cloud: np.ndarray = None


def tile_scene(scene, label=None):
    """Non-overlapping 32x32 tiles at offsets (32i, 32j), row-major; trailing
    partial strips are dropped. An optional scene-level label mask is cut
    along with the data."""
    h, w = scene.data.shape[1], scene.data.shape[2]
    tiles = []
    for i in range(h // PATCH):
        for j in range(w // PATCH):
            ys = slice(i * PATCH, (i + 1) * PATCH)
            xs = slice(j * PATCH, (j + 1) * PATCH)
            sample = PatchSample(
                data=np.ascontiguousarray(scene.data[None, :, ys, xs]),
                timestamps=[scene.timestamp],
                label=None if label is None else np.ascontiguousarray(label[ys, xs]),
                location=(scene.scene_id, i, j),
            )
            tiles.append(
                Tile(
                    sample=sample,
                    land=np.ascontiguousarray(scene.land_mask[ys, xs]),
                    cloud=None
                    if scene.cloud_mask is None
                    else np.ascontiguousarray(scene.cloud_mask[ys, xs]),
                )
            )
    return tiles


def filter_patch(patch, land_sub, cloud_sub=None):
    """Keep iff some land is present and the tile is not fully cloud-covered."""
    has_land = int(np.asarray(land_sub).sum()) > 0
    fully_cloudy = cloud_sub is not None and int(np.asarray(cloud_sub).min()) == 1
    return has_land and not fully_cloudy


def _epoch(ts):
    return ts.epoch_seconds if isinstance(ts, Timestamp) else int(ts)


def collocate_labels(images, labels, tolerance_s=600):
    """Match each image to the nearest label within tolerance; equal-distance
    ties go to the earlier label; unmatched images are dropped."""
    for name, seq in (("images", images), ("labels", labels)):
        epochs = [_epoch(t) for t, _ in seq]
        if epochs != sorted(epochs):
            raise UnsortedInputError(f"{name} must be sorted by timestamp")
    if not labels:
        return []
    label_epochs = [_epoch(t) for t, _ in labels]
    pairs = []
    for t, ref in images:
        e = _epoch(t)
        idx = int(np.searchsorted(label_epochs, e))
        best = None
        for j in (idx - 1, idx):
            if 0 <= j < len(labels):
                dt = abs(label_epochs[j] - e)
                # strict < keeps the earlier label on equal distance
                if dt <= tolerance_s and (best is None or dt < best[0]):
                    best = (dt, j)
        if best is not None:
            pairs.append((ref, labels[best[1]][1]))
    return pairs


def parse_year_rules(rules):
    """Normalize {split: years} where years is an iterable or 'A-B' range;
    rejects overlapping year sets."""
    table = {}
    for split, years in rules.items():
        if isinstance(years, str):
            lo, _, hi = years.partition("-")
            years = range(int(lo), int(hi or lo) + 1)
        elif isinstance(years, int):
            years = [years]
        for y in years:
            if y in table:
                raise ValueError(f"year {y} assigned to both {table[y]!r} and {split!r}")
            table[int(y)] = split
    return table


PRETRAIN_RULES = {"train": "2014-2018", "val": "2019"}
FINETUNE_RULES = {"train": "2020-2021", "val": "2022", "test": "2023-2024"}


def assign_split(ts, rules):
    """Pure year lookup; uncovered years raise instead of silently binning."""
    table = rules if all(isinstance(k, int) for k in rules) else parse_year_rules(rules)
    year = ts.year if isinstance(ts, Timestamp) else int(ts)
    if year not in table:
        raise YearCoverageError(f"year {year} not covered by split rules")
    return table[year]


def sample_multi_timestep(patches_at_location, rng):
    """Draw three distinct same-clock-hour acquisitions of one location,
    uniformly over qualifying hour buckets then 3-subsets; sorted ascending.
    The label, when present, is the most recent acquisition's mask."""
    epochs = [s.timestamps[0].epoch_seconds for s in patches_at_location]
    if epochs != sorted(epochs):
        raise UnsortedInputError("acquisitions must be time-sorted")
    buckets = {}
    for s in patches_at_location:
        buckets.setdefault(s.timestamps[0].hour_bucket, []).append(s)
    qualifying = sorted(k for k, v in buckets.items() if len(v) >= 3)
    if not qualifying:
        raise SampleUnavailableError("no clock hour holds 3 acquisitions at this location")
    bucket = buckets[qualifying[rng.integers(len(qualifying))]]
    chosen = sorted(
        (bucket[i] for i in rng.choice(len(bucket), size=3, replace=False)),
        key=lambda s: s.timestamps[0].epoch_seconds,
    )
    return PatchSample(
        data=np.concatenate([s.data for s in chosen], axis=0),
        timestamps=[s.timestamps[0] for s in chosen],
        label=chosen[-1].label,
        location=chosen[0].location,
    )


def build_multi_timestep_dataset(samples, rng):
    """Fixed MT triples, one per location that qualifies; deterministic under
    the build seed."""
    by_location = {}
    for s in samples:
        by_location.setdefault(s.location, []).append(s)
    out = []
    for loc in sorted(by_location):
        series = sorted(by_location[loc], key=lambda s: s.timestamps[0].epoch_seconds)
        try:
            out.append(sample_multi_timestep(series, rng))
        except SampleUnavailableError:
            continue
    return out


def fire_train_filter(samples, split):
    """Training keeps only samples with at least one positive pixel;
    validation and test pass through unchanged."""
    if split != "train":
        return list(samples)
    return [s for s in samples if s.label is not None and int(s.label.sum()) >= 1]


# synthetic scenes -------------------------------------------------------

_TAG_LAND, _TAG_BG, _TAG_BGT, _TAG_CLOUD, _TAG_FIRE, _TAG_WARM = range(6)


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def _smooth_field(rng, h, w, waves=6, max_freq=4.0):
    """Sum of random-frequency sinusoids, standardized."""
    ys = np.arange(h)[:, None] / h
    xs = np.arange(w)[None, :] / w
    out = np.zeros((h, w))
    for _ in range(waves):
        fy, fx = rng.uniform(0.5, max_freq, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        out += amp * np.sin(2 * np.pi * (fy * ys + fx * xs) + phase)
    return (out - out.mean()) / (out.std() + 1e-9)


@dataclass
class SynthAcquisition:
    scene: Scene
    fire_mask: np.ndarray

    def label_for(self, task):
        if task == "fire":
            return self.fire_mask
        if task == "cloud":
            return self.scene.cloud_mask
        raise ValueError(f"unknown task {task!r}")


@dataclass
class SynthConfig:
    seed: int = 0
    n_scenes: int = 40
    height: int = 64
    width: int = 64
    fire_density: float = 0.003
    cloud_density: float = 0.25
    years: tuple = (2020, 2021, 2022, 2023, 2024)
    start_day: int = 152  # June 1st in non-leap years
    noise: float = 0.5
    fire_bands: tuple = (8, 9, 10)
    cloud_bands: tuple = (0, 1, 2, 3)
    fire_gain: float = 2.0
    full_cloud_rate: float = 0.04

    def __post_init__(self):
        if self.height < PATCH or self.width < PATCH:
            raise ValueError(f"scene extents must be >= {PATCH}")


def synth_generate(cfg: SynthConfig):
    """Seeded synthetic acquisitions in same-hour blocks of four (15-minute
    cadence), blocks spread round-robin over the configured years. Labels
    derive from generation, so ground truth is exact."""
    h, w = cfg.height, cfg.width
    land_field = _smooth_field(_rng(cfg.seed, _TAG_LAND), h, w)
    land = (land_field > np.quantile(land_field, 0.4)).astype(np.uint8)
    base = np.stack(
        [_smooth_field(_rng(cfg.seed, _TAG_BG, b), h, w) for b in range(BANDS)]
    )
    warm = _smooth_field(_rng(cfg.seed, _TAG_WARM), h, w)
    out = []
    year_hours = {y: 0 for y in cfg.years}
    for i in range(cfg.n_scenes):
        block, slot = divmod(i, 4)
        year = cfg.years[block % len(cfg.years)]
        if slot == 0 and i:
            pass
        hour = year_hours[year]
        if slot == 3:
            year_hours[year] += 1
        day = cfg.start_day + (hour // 24) % 180
        ts = Timestamp.from_calendar(year, day, (hour % 24) * 60 + slot * 15)

        rng_t = _rng(cfg.seed, _TAG_BGT, i)
        data = (
            0.8 * base
            + 0.2
            * np.stack([_smooth_field(rng_t, h, w, waves=3) for _ in range(BANDS)])
            + cfg.noise * rng_t.standard_normal((BANDS, h, w))
        )
        # warm land patches mimic weak fire signatures in the hot bands
        for b in cfg.fire_bands:
            data[b] += 0.8 * np.clip(warm, 0.0, None) * land

        cloud = np.zeros((h, w), dtype=np.uint8)
        if cfg.cloud_density > 0:
            rng_c = _rng(cfg.seed, _TAG_CLOUD, i)
            cfield = _smooth_field(rng_c, h, w)
            density = 1.0 if rng_c.random() < cfg.full_cloud_rate else cfg.cloud_density
            if density >= 1.0:
                cloud[:] = 1
            else:
                cloud = (cfield > np.quantile(cfield, 1.0 - density)).astype(np.uint8)
            lift = cloud.astype(data.dtype)
            for b in cfg.cloud_bands:
                data[b] += 2.0 * lift

        fire = np.zeros((h, w), dtype=np.uint8)
        if cfg.fire_density > 0:
            rng_f = _rng(cfg.seed, _TAG_FIRE, i)
            n_clusters = rng_f.poisson(cfg.fire_density * h * w / 2.5)
            land_idx = np.flatnonzero(land.reshape(-1))
            for _ in range(n_clusters):
                if land_idx.size == 0:
                    break
                seed_flat = int(land_idx[rng_f.integers(land_idx.size)])
                cluster = {(seed_flat // w, seed_flat % w)}
                for _ in range(int(rng_f.integers(1, 5)) - 1):
                    cy, cx = list(cluster)[rng_f.integers(len(cluster))]
                    dy, dx = [(0, 1), (0, -1), (1, 0), (-1, 0)][rng_f.integers(4)]
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and land[ny, nx]:
                        cluster.add((ny, nx))
                for cy, cx in cluster:
                    fire[cy, cx] = 1
                    for b in cfg.fire_bands:
                        data[b, cy, cx] += rng_f.uniform(cfg.fire_gain, 2.0 * cfg.fire_gain)

        scene = Scene(
            data=data.astype(np.float32),
            timestamp=ts,
            land_mask=land.copy(),
            cloud_mask=cloud,
            scene_id=f"region{cfg.seed:03d}",
        )
        out.append(SynthAcquisition(scene=scene, fire_mask=fire))
    return out


# container format --------------------------------------------------------

_NAME_RE = re.compile(r"^(?P<scene>.+)__(?P<row>\d+)_(?P<col>\d+)__t(?P<epoch>-?\d+)$")


def container_name(sample):
    """Filename convention carrying the sample location (the payload format
    itself has no location fields)."""
    scene, row, col = sample.location
    return f"{scene}__{row}_{col}__t{sample.timestamps[0].epoch_seconds}.hfmp"


def write_container(path, sample):
    """Serialize one PatchSample; returns the trailing FNV-1a digest."""
    path = Path(path)
    t, c = sample.data.shape[0], sample.data.shape[1]
    h, w = sample.data.shape[2], sample.data.shape[3]
    flags = _FLAG_LABEL if sample.label is not None else 0
    payload = bytearray()
    payload += CONTAINER_MAGIC
    payload += struct.pack("<BBBBHH", CONTAINER_VERSION, flags, t, c, h, w)
    epochs = np.asarray([ts.epoch_seconds for ts in sample.timestamps], dtype="<i8")
    payload += epochs.tobytes()
    payload += np.ascontiguousarray(sample.data, dtype="<f4").tobytes()
    if sample.label is not None:
        payload += np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes()
    digest = fnv1a64(bytes(payload))
    payload += struct.pack("<Q", digest)
    path.write_bytes(bytes(payload))
    return digest


def read_container(path, expected_digest=None):
    """Read one PatchSample back; every malformation has a distinct error."""
    path = Path(path)
    raw = path.read_bytes()
    header = len(CONTAINER_MAGIC) + 6
    if len(raw) < header:
        raise TruncationError(f"container shorter than header: {len(raw)} bytes")
    if raw[: len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise MagicError(f"bad magic {raw[:5]!r}; expected {CONTAINER_MAGIC!r}")
    version, flags, t, c, h, w = struct.unpack_from("<BBBBHH", raw, len(CONTAINER_MAGIC))
    if version != CONTAINER_VERSION:
        raise VersionError(f"unsupported container version {version}")
    data_bytes = 4 * t * c * h * w
    label_bytes = h * w if flags & _FLAG_LABEL else 0
    expected = header + 8 * t + data_bytes + label_bytes + 8
    if len(raw) < expected:
        raise TruncationError(f"container truncated: {len(raw)} bytes, expected {expected}")
    if len(raw) != expected:
        raise ContainerError(f"trailing garbage: {len(raw)} bytes, expected {expected}")
    (stored,) = struct.unpack_from("<Q", raw, expected - 8)
    actual = fnv1a64(raw[:-8])
    if actual != stored:
        raise DigestMismatchError(f"container digest mismatch in {path.name}")
    if expected_digest is not None and actual != int(expected_digest):
        raise DigestMismatchError(f"manifest digest mismatch for {path.name}")
    off = header
    epochs = np.frombuffer(raw, dtype="<i8", count=t, offset=off)
    off += 8 * t
    data = (
        np.frombuffer(raw, dtype="<f4", count=t * c * h * w, offset=off)
        .reshape(t, c, h, w)
        .astype(np.float32, copy=True)
    )
    off += data_bytes
    label = None
    if flags & _FLAG_LABEL:
        label = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
    m = _NAME_RE.match(path.stem)
    location = (m["scene"], int(m["row"]), int(m["col"])) if m else (path.stem, 0, 0)
    return PatchSample(
        data=data,
        timestamps=[Timestamp.from_epoch(int(e)) for e in epochs],
        label=label,
        location=location,
    )


# manifests ----------------------------------------------------------------


@dataclass
class ManifestRecord:
    path: str
    digest: int
    year: int
    split: str = "unassigned"

    def line(self):
        return f"{self.path}\t{self.digest:016x}\t{self.year}\t{self.split}"


def write_manifest(records, path):
    Path(path).write_text("".join(r.line() + "\n" for r in records))


def read_manifest(path):
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        p, digest, year, split = line.split("\t")
        records.append(ManifestRecord(p, int(digest, 16), int(year), split))
    return records


def load_split(manifest_path, split, verify=True):
    """Read all samples of one split, verifying digests against the manifest."""
    base = Path(manifest_path).parent
    samples = []
    for rec in read_manifest(manifest_path):
        if rec.split != split:
            continue
        p = Path(rec.path)
        if not p.is_absolute():
            p = base / p
        samples.append(read_container(p, expected_digest=rec.digest if verify else None))
    return samples

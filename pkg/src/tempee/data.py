"""Echo sequences: synthetic generation, radar fusion, value-space conversion, and file formats.

Frames are kept as float32 dBZ in [0, 70]; pixel space [0, 255] is only
materialised at metric and export boundaries.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError, RangeError

DBZ_MAX = 70.0
PIXEL_MAX = 255
VALUE_SPACES = ("dbz", "pixel")
REGIMES = ("sparse-stationary", "dense-stationary", "sparse-nonstationary", "dense-nonstationary")


@dataclass
class EchoSequence:
    """Ordered stack of ``(T, H, W)`` echo frames tagged with their value space."""

    frames: np.ndarray
    value_space: str = "dbz"
    dt_minutes: int = 6
    regime: str | None = None
    seed: int = 0
    n_in: int | None = None
    # per-blob centre tracks (n_blobs, T, 2) in (row, col); NaN while a blob is absent
    tracks: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ContractError(f"frames must be (T, H, W), got {self.frames.shape}")
        if self.value_space not in VALUE_SPACES:
            raise ContractError(f"value_space must be one of {VALUE_SPACES}, got {self.value_space!r}")
        hi = DBZ_MAX if self.value_space == "dbz" else PIXEL_MAX
        if self.frames.size and (not np.isfinite(self.frames).all() or self.frames.min() < 0 or self.frames.max() > hi):
            raise RangeError(f"{self.value_space} frames must lie in [0, {hi}]")
        if self.n_in is not None and not 0 <= self.n_in <= len(self.frames):
            raise ContractError(f"n_in={self.n_in} outside 0..{len(self.frames)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def observed(self) -> np.ndarray:
        return self.frames[: self._split()]

    @property
    def future(self) -> np.ndarray:
        return self.frames[self._split() :]

    def _split(self) -> int:
        if self.n_in is None:
            raise ContractError("sequence has no observed/future split (n_in unset)")
        return self.n_in

    def to_pixel(self) -> "EchoSequence":
        if self.value_space == "pixel":
            return self
        return EchoSequence(
            dbz_to_pixel(self.frames).astype(np.float32), "pixel", self.dt_minutes, self.regime, self.seed, self.n_in, self.tracks
        )


# ---------------------------------------------------------------- value conversion


def fuse_radars(a, b, c) -> np.ndarray:
    """Pointwise maximum of three co-registered dBZ frames."""
    a, b, c = (np.asarray(v) for v in (a, b, c))
    if not a.shape == b.shape == c.shape:
        raise ContractError(f"radar frames differ in shape: {a.shape}, {b.shape}, {c.shape}")
    return np.maximum(np.maximum(a, b), c)


def dbz_to_pixel(v):
    """``floor(255 * v / 70 + 0.5)`` for reflectivity in [0, 70] dBZ."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.size and (not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > DBZ_MAX):
        raise RangeError(f"dBZ values must lie in [0, {DBZ_MAX:g}]")
    out = np.floor(PIXEL_MAX * arr / DBZ_MAX + 0.5)
    return int(out) if out.ndim == 0 else out.astype(np.uint8)


def pixel_to_dbz(p):
    """``70 * p / 255`` for pixel values in [0, 255]."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.size and (not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > PIXEL_MAX):
        raise RangeError(f"pixel values must lie in [0, {PIXEL_MAX}]")
    out = DBZ_MAX * arr / PIXEL_MAX
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- synthetic generator


@dataclass
class BlobSpec:
    center: tuple[float, float]
    velocity: tuple[float, float]
    peak_dbz: float
    radius: float
    turn_rate: float = 0.0  # radians per frame
    radius_rate: float = 0.0  # px per frame
    intensity_rate: float = 0.0  # dBZ per frame
    birth: int = 0
    death: int | None = None

    def __post_init__(self):
        if not 0.0 < self.peak_dbz <= DBZ_MAX:
            raise ConfigError(f"peak_dbz must be in (0, {DBZ_MAX:g}], got {self.peak_dbz}")
        if self.radius <= 0:
            raise ConfigError(f"radius must be positive, got {self.radius}")


def normalize_regime(regime: str) -> str:
    key = regime.strip().lower().replace("_", "-")
    if key not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    return key


def _stationary_blobs(rng, count: int, frames: int, h: int, w: int, scale: float) -> list[BlobSpec]:
    radii = rng.uniform(3.0, 7.0, count) * scale
    margin = 3.0 * radii.max() + 1.0
    span_y, span_x = h - 2 * margin, w - 2 * margin
    angle = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(0.3, 1.2) * scale
    vy, vx = speed * math.sin(angle), speed * math.cos(angle)
    steps = max(frames - 1, 1)
    # shrink the shared motion until every track fits inside the margins
    shrink = min(1.0, 0.9 * span_y / (abs(vy) * steps + 1e-12), 0.9 * span_x / (abs(vx) * steps + 1e-12))
    vy, vx = vy * max(shrink, 0.0), vx * max(shrink, 0.0)
    dy, dx = vy * steps, vx * steps
    blobs = []
    for r in radii:
        cy = rng.uniform(margin - min(dy, 0), h - margin - max(dy, 0))
        cx = rng.uniform(margin - min(dx, 0), w - margin - max(dx, 0))
        blobs.append(BlobSpec((cy, cx), (vy, vx), float(rng.uniform(25.0, 65.0)), float(r)))
    return blobs


def _nonstationary_blobs(rng, count: int, frames: int, h: int, w: int, scale: float) -> list[BlobSpec]:
    blobs = []
    for _ in range(count):
        angle = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(0.3, 1.5) * scale
        turn = math.radians(rng.uniform(2.0, 8.0)) * rng.choice([-1.0, 1.0])
        birth = int(rng.integers(1, max(frames // 2, 2))) if rng.random() < 0.3 else 0
        death = int(rng.integers(frames // 2 + 1, frames)) if rng.random() < 0.3 and frames > 3 else None
        blobs.append(
            BlobSpec(
                center=(float(rng.uniform(0.15 * h, 0.85 * h)), float(rng.uniform(0.15 * w, 0.85 * w))),
                velocity=(speed * math.sin(angle), speed * math.cos(angle)),
                peak_dbz=float(rng.uniform(25.0, 65.0)),
                radius=float(rng.uniform(3.0, 7.0) * scale),
                turn_rate=turn,
                radius_rate=float(rng.uniform(-0.05, 0.08) * scale),
                intensity_rate=float(rng.uniform(-1.0, 1.0)),
                birth=birth,
                death=death,
            )
        )
    return blobs


def render_blobs(blobs: Sequence[BlobSpec], frames: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise blob trajectories; overlapping blobs combine by maximum, like radar fusion."""
    out = np.zeros((frames, h, w), dtype=np.float64)
    tracks = np.full((len(blobs), frames, 2), np.nan)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for bi, b in enumerate(blobs):
        cy, cx = b.center
        vy, vx = b.velocity
        cos_t, sin_t = math.cos(b.turn_rate), math.sin(b.turn_rate)
        for t in range(frames):
            age = t - b.birth
            alive = age >= 0 and (b.death is None or t < b.death)
            if alive:
                radius = max(b.radius + b.radius_rate * age, 1.0)
                peak = float(np.clip(b.peak_dbz + b.intensity_rate * age, 0.0, DBZ_MAX))
                tracks[bi, t] = (cy, cx)
                if peak > 0:
                    field_ = peak * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius * radius))
                    np.maximum(out[t], field_, out=out[t])
            cy, cx = cy + vy, cx + vx
            vy, vx = cos_t * vy - sin_t * vx, sin_t * vy + cos_t * vx
    return np.clip(out, 0.0, DBZ_MAX).astype(np.float32), tracks


def gen_synthetic(regime: str, n: int, k: int, h: int, w: int, seed: int) -> EchoSequence:
    """Gaussian-blob echo sequence of ``n + k`` frames in one of four motion regimes.

    Stationary regimes translate every blob with one shared constant velocity
    and keep all tracks inside the frame. Nonstationary regimes give each blob
    its own turning velocity, growth or decay, and optional mid-sequence
    appearance or disappearance. Sparse draws 1-3 blobs, dense 8-16.
    """
    regime = normalize_regime(regime)
    if h < 32 or w < 32:
        raise ConfigError(f"frames must be at least 32x32, got {h}x{w}")
    if n < 0 or k < 0 or n + k < 1:
        raise ConfigError(f"need n, k >= 0 and n + k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    density, motion = regime.split("-")
    count = int(rng.integers(1, 4)) if density == "sparse" else int(rng.integers(8, 17))
    frames = n + k
    scale = min(h, w) / 96.0
    if motion == "stationary":
        blobs = _stationary_blobs(rng, count, frames, h, w, scale)
    else:
        blobs = _nonstationary_blobs(rng, count, frames, h, w, scale)
    data, tracks = render_blobs(blobs, frames, h, w)
    return EchoSequence(data, "dbz", 6, regime, seed, n, tracks)


def intensity_centroid(frame: np.ndarray) -> tuple[float, float]:
    total = float(frame.sum(dtype=np.float64))
    if total <= 0:
        return (math.nan, math.nan)
    yy, xx = np.mgrid[0 : frame.shape[0], 0 : frame.shape[1]]
    return (float((yy * frame).sum(dtype=np.float64) / total), float((xx * frame).sum(dtype=np.float64) / total))


def persistence_forecast(observed: np.ndarray, k: int) -> np.ndarray:
    """Repeat the last observed frame ``k`` times."""
    return np.repeat(np.asarray(observed)[-1:], k, axis=0)


# ---------------------------------------------------------------- splits and manifests


@dataclass
class SeedSplit:
    train: list[int]
    val: list[int]
    test: list[int]


def split_dataset(seeds: Iterable[int], ratios: Sequence[float] = (0.9, 0.1), test_seeds: Iterable[int] = ()) -> SeedSplit:
    """Partition ``seeds`` into train/val by ``ratios``; test seeds come from a separate range.

    The split keeps input order, so it is stable across re-runs.
    """
    seeds = [int(s) for s in seeds]
    test = [int(s) for s in test_seeds]
    if len(ratios) != 2 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"ratios must be two non-negative numbers summing to 1, got {tuple(ratios)}")
    if len(set(seeds)) != len(seeds) or len(set(test)) != len(test):
        raise ContractError("seed lists contain duplicates")
    overlap = set(seeds) & set(test)
    if overlap:
        raise ContractError(f"test seeds overlap train/val seeds: {sorted(overlap)[:5]}")
    n_train = int(math.floor(ratios[0] * len(seeds) + 0.5))
    return SeedSplit(seeds[:n_train], seeds[n_train:], test)


def write_manifest(path: str | Path, split: SeedSplit) -> None:
    chunks = []
    for name in ("train", "val", "test"):
        chunks.append(f"[{name}]")
        chunks.extend(str(s) for s in getattr(split, name))
    Path(path).write_text("\n".join(chunks) + "\n")


def read_manifest(path: str | Path) -> SeedSplit:
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("["):
            current = line.strip("[]")
            if current not in parts:
                raise FormatError(f"manifest line {lineno}: unknown section {line}")
            continue
        if current is None:
            raise FormatError(f"manifest line {lineno}: seed outside any section")
        try:
            parts[current].append(int(line))
        except ValueError:
            raise FormatError(f"manifest line {lineno}: bad seed {line!r}") from None
    split = SeedSplit(**parts)
    all_seeds = split.train + split.val + split.test
    if len(set(all_seeds)) != len(all_seeds):
        raise FormatError("manifest partitions overlap")
    return split


# ---------------------------------------------------------------- .est container

EST_MAGIC = b"EST1"
EST_VERSION = 1
_EST_HEADER = struct.Struct("<4sHIIIBHQ")


def write_est(path: str | Path, seq: EchoSequence) -> None:
    t, h, w = seq.frames.shape
    header = _EST_HEADER.pack(
        EST_MAGIC, EST_VERSION, t, h, w, VALUE_SPACES.index(seq.value_space), seq.dt_minutes, seq.seed
    )
    Path(path).write_bytes(header + np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def read_est(path: str | Path) -> EchoSequence:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"truncated .est header: {len(buf)} bytes", len(buf))
    if buf[:4] != EST_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {EST_MAGIC!r}", 0)
    if len(buf) < _EST_HEADER.size:
        raise FormatError(f"truncated .est header: {len(buf)} of {_EST_HEADER.size} bytes", len(buf))
    _, version, t, h, w, space, dt, seed = _EST_HEADER.unpack_from(buf)
    if version != EST_VERSION:
        raise FormatError(f"unsupported .est version {version}", 4)
    if space >= len(VALUE_SPACES):
        raise FormatError(f"unknown value-space code {space}", 18)
    need = _EST_HEADER.size + 4 * t * h * w
    if len(buf) != need:
        what = "truncated" if len(buf) < need else "oversized"
        raise FormatError(f"{what} .est payload: {len(buf)} bytes, expected {need}", min(len(buf), need))
    frames = np.frombuffer(buf, dtype="<f4", offset=_EST_HEADER.size).reshape(t, h, w).astype(np.float32)
    hi = DBZ_MAX if VALUE_SPACES[space] == "dbz" else PIXEL_MAX
    bad = np.flatnonzero(~np.isfinite(frames) | (frames < 0) | (frames > hi))
    if bad.size:
        raise FormatError(f"value out of {VALUE_SPACES[space]} range", _EST_HEADER.size + 4 * int(bad[0]))
    return EchoSequence(frames, VALUE_SPACES[space], dt, None, seed)


# ---------------------------------------------------------------- PGM export


def write_pgm(path: str | Path, frame: np.ndarray, value_space: str = "pixel") -> None:
    """Binary PGM (P5, maxval 255). dBZ frames are converted first."""
    arr = np.asarray(frame)
    if value_space == "dbz":
        arr = dbz_to_pixel(arr)
    if arr.ndim != 2:
        raise ContractError(f"PGM export needs a 2-d frame, got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > PIXEL_MAX or not np.array_equal(arr, np.round(arr))):
        raise RangeError("PGM frames must hold integer pixel values in [0, 255]")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"bad PGM magic {tokens[0]!r}, expected b'P5'", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", pos)
    pos += 1
    if len(buf) - pos != w * h:
        raise FormatError(f"PGM payload has {len(buf) - pos} bytes, expected {w * h}", pos)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w).copy()

"""Synthetic moving-shape videos, the SAVT tensor container, and config files.

Videos are float64 arrays shaped ``(T, H, W, C)`` with values in ``[0, 1]``.

SAVT layout (all little-endian)::

    b"SAVT" | u32 version | u32 rank | rank x u32 extents | f64 payload (row-major)
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"SAVT"
VERSION = 1
MAX_RANK = 8


class ContainerError(ValueError):
    """A SAVT file is malformed."""


def encode_tensor(data) -> bytes:
    arr = np.asarray(getattr(data, "data", data), dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ContainerError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    header = MAGIC + struct.pack(f"<II{arr.ndim}I", VERSION, arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr).astype("<f8").tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 12:
        raise ContainerError(f"{source}: truncated header at offset {len(buf)} (need 12 bytes)")
    if buf[:4] != MAGIC:
        raise ContainerError(f"{source}: bad magic {buf[:4]!r} at offset 0")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported version {version} at offset 4")
    if rank > MAX_RANK:
        raise ContainerError(f"{source}: rank {rank} exceeds {MAX_RANK} at offset 8")
    end = 12 + 4 * rank
    if len(buf) < end:
        raise ContainerError(f"{source}: truncated extents at offset {len(buf)} (need {end})")
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    count = math.prod(shape)
    need = end + 8 * count
    if len(buf) != need:
        kind = "truncated payload" if len(buf) < need else "trailing bytes"
        raise ContainerError(f"{source}: {kind} at offset {min(len(buf), need)} (expected {need} bytes)")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=end).astype(np.float64).reshape(shape)


def write_tensor(path, data) -> None:
    Path(path).write_bytes(encode_tensor(data))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class VideoRecord:
    video: np.ndarray
    label: int
    id: str


@dataclass(frozen=True)
class SynthConfig:
    num_videos: int = 200
    T: int = 16
    W: int = 16
    H: int = 16
    C: int = 3
    num_classes: int = 4
    shape_size: int = 4
    noise_level: float = 0.1
    informative_frames: tuple[int, ...] | None = None
    seed: int = 7

    def validate(self) -> None:
        if self.shape_size > min(self.H, self.W):
            raise ValueError(f"shape_size {self.shape_size} larger than frame {self.H}x{self.W}")
        if self.shape_size < 1 or self.T < 1 or self.num_classes < 1 or self.num_videos < 0:
            raise ValueError("T, num_classes, shape_size must be positive; num_videos >= 0")
        if not 0 <= self.noise_level <= 1:
            raise ValueError(f"noise_level must lie in [0, 1], got {self.noise_level}")
        for t in self.informative_frames or ():
            if not 0 <= t < self.T:
                raise ValueError(f"informative frame {t} outside [0, {self.T})")


def _coverage(start: float, size: int, extent: int) -> np.ndarray:
    """Fraction of each unit pixel covered by the interval ``[start, start + size]``."""
    lo = np.arange(extent, dtype=np.float64)
    return np.clip(np.minimum(start + size, lo + 1) - np.maximum(start, lo), 0.0, 1.0)


def render_video(label: int, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """One video of a square moving outward from near the centre in direction ``label``.

    Random draws do not depend on ``label``, so two renders from identically
    seeded generators differ only where the shape is drawn.
    """
    T, H, W, C, s = cfg.T, cfg.H, cfg.W, cfg.C, cfg.shape_size
    video = rng.uniform(0.0, cfg.noise_level, size=(T, H, W, C))
    color = rng.uniform(0.6, 1.0, size=C)
    jitter = rng.uniform(-0.5, 0.5, size=2)
    theta = 2 * math.pi * label / cfg.num_classes
    d_row, d_col = math.sin(theta), math.cos(theta)
    reach_r = max((H - s) / 2 - 0.5, 0.0)
    reach_c = max((W - s) / 2 - 0.5, 0.0)
    frames = range(T) if cfg.informative_frames is None else cfg.informative_frames
    for t in frames:
        phase = -0.5 + 1.5 * t / (T - 1) if T > 1 else 1.0
        r = (H - s) / 2 + jitter[0] * (reach_r > 0) + d_row * reach_r * phase
        c = (W - s) / 2 + jitter[1] * (reach_c > 0) + d_col * reach_c * phase
        m = np.outer(_coverage(r, s, H), _coverage(c, s, W))[..., None]
        video[t] = video[t] * (1 - m) + color * m
    return video


def generate_synthetic_dataset(cfg: SynthConfig) -> list[VideoRecord]:
    cfg.validate()
    records = []
    for i in range(cfg.num_videos):
        label = i % cfg.num_classes
        rng = np.random.default_rng([cfg.seed, i])
        records.append(VideoRecord(render_video(label, rng, cfg), label, f"v{i:04d}"))
    return records


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(records: Iterable[VideoRecord], root, split: str = "test") -> Path:
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        write_tensor(out / f"{rec.id}.savt", rec.video)
        rows.append(f"{rec.id}\t{rec.label}\n")
    (out / "labels.tsv").write_text("".join(rows))
    return out


def load_dataset(root, split: str = "test") -> list[VideoRecord]:
    d = Path(root) / split
    labels = d / "labels.tsv"
    if not labels.is_file():
        raise FileNotFoundError(f"missing dataset labels: {labels}")
    records = []
    with labels.open() as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row:
                continue
            vid, label = row[0], int(row[1])
            records.append(VideoRecord(read_tensor(d / f"{vid}.savt"), label, vid))
    return records


def export_pnm(records: Iterable[VideoRecord], root) -> None:
    """Write every frame as binary PGM (1 channel) or PPM (3 channels) for eyeballing."""
    for rec in records:
        d = Path(root) / rec.id
        d.mkdir(parents=True, exist_ok=True)
        T, H, W, C = rec.video.shape
        if C not in (1, 3):
            raise ValueError(f"PNM export needs 1 or 3 channels, got {C}")
        magic, ext = (b"P5", "pgm") if C == 1 else (b"P6", "ppm")
        pixels = np.round(np.clip(rec.video, 0, 1) * 255).astype(np.uint8)
        for t in range(T):
            header = magic + f"\n{W} {H}\n255\n".encode()
            (d / f"frame_{t:03d}.{ext}").write_bytes(header + pixels[t].tobytes())


# ---------------------------------------------------------------------------
# run configuration


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys use ``_`` or ``-``."""
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{n}: empty key")
        values[key.replace("-", "_")] = value
    return values


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_config_text(path.read_text(), str(path))


def parse_int_list(text: str | Sequence[int] | None) -> tuple[int, ...] | None:
    if text is None or text == "":
        return None
    if isinstance(text, str):
        return tuple(int(p) for p in text.split(",") if p.strip())
    return tuple(int(p) for p in text)

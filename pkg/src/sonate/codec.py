"""Fixed orthonormal toy codec between waveforms and latent frames.

A waveform is cut into non-overlapping windows and every window is mapped
to one latent frame by a seeded matrix with orthonormal rows. Decoding is the
transpose map, so ``decode`` lands on the span of the projection and
``encode(decode(z)) == z`` for any latent ``z``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from sonate._num import as_fraction

WAVE_MAGIC = b"SNWV"
LATENT_MAGIC = b"SNLT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@lru_cache(maxsize=32)
def _projection(window: int, latent_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((window, latent_dim)))
    # fix the sign ambiguity of QR so the map is a pure function of the seed
    q = q * np.sign(np.diag(r))
    p = np.ascontiguousarray(q.T)
    p.setflags(write=False)
    return p


@dataclass(frozen=True)
class CodecConfig:
    sample_rate: int = 44100
    window: int = 64
    latent_dim: int = 16
    projection_seed: int = 0

    def __post_init__(self):
        if self.sample_rate < 1:
            raise ValueError(f"sample_rate must be >= 1, got {self.sample_rate}")
        if not self.window >= self.latent_dim >= 1:
            raise ValueError(
                f"need window >= latent_dim >= 1, got window={self.window}, "
                f"latent_dim={self.latent_dim}"
            )

    @property
    def frame_rate(self) -> Fraction:
        return Fraction(self.sample_rate, self.window)

    @property
    def projection(self) -> np.ndarray:
        """(latent_dim, window) matrix with orthonormal rows."""
        return _projection(self.window, self.latent_dim, self.projection_seed)


@dataclass(eq=False)
class LatentSequence:
    data: np.ndarray
    frame_rate: Fraction = field(default=Fraction(44100, 64))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"latent data must be 2-D (frames, channels), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise ValueError(f"non-finite latent value at frame {bad[0]}, channel {bad[1]}")
        self.frame_rate = Fraction(self.frame_rate)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> Fraction:
        return self.frames / self.frame_rate

    def __eq__(self, other):
        if not isinstance(other, LatentSequence):
            return NotImplemented
        return self.frame_rate == other.frame_rate and np.array_equal(self.data, other.data)


def pad_to_window(waveform, cfg: CodecConfig) -> np.ndarray:
    """Zero-pad ``waveform`` at the end up to the next multiple of the window."""
    x = np.asarray(waveform, dtype=np.float64).ravel()
    extra = (-len(x)) % cfg.window
    return np.concatenate([x, np.zeros(extra)]) if extra else x


def encode(waveform, cfg: CodecConfig) -> LatentSequence:
    x = np.asarray(waveform, dtype=np.float64).ravel()
    if len(x) % cfg.window:
        raise ValueError(
            f"waveform length {len(x)} is not a multiple of window {cfg.window}; "
            "use pad_to_window first"
        )
    finite = np.isfinite(x)
    if not finite.all():
        idx = int(np.argmin(finite))
        raise ValueError(f"non-finite sample at index {idx}: {x[idx]}")
    frames = x.reshape(-1, cfg.window) @ cfg.projection.T
    return LatentSequence(frames, cfg.frame_rate)


def decode(latents: LatentSequence, cfg: CodecConfig) -> np.ndarray:
    if latents.channels != cfg.latent_dim:
        raise ValueError(
            f"latent has {latents.channels} channels, codec expects {cfg.latent_dim}"
        )
    return (latents.data @ cfg.projection).ravel()


def frame_count(duration_seconds, cfg: CodecConfig) -> int:
    """Number of whole latent frames in ``duration_seconds``.

    Floats are read as the decimal they print as, so ``frame_count(2.0)`` at
    43 Hz is 86 with no rounding slop.
    """
    d = as_fraction(duration_seconds)
    if d < 0:
        raise ValueError(f"duration must be >= 0, got {duration_seconds}")
    return math.floor(d * cfg.frame_rate)


def write_waveform(path, waveform, sample_rate: int) -> None:
    x = np.asarray(waveform, dtype="<f4").ravel()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(WAVE_MAGIC, FORMAT_VERSION, sample_rate, len(x)))
        f.write(x.tobytes())


def read_waveform(path) -> tuple[np.ndarray, int]:
    """Returns ``(samples, sample_rate)``."""
    raw = Path(path).read_bytes()
    magic, version, sample_rate, length = _read_header(raw, WAVE_MAGIC, path)
    x = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if len(x) != length:
        raise ValueError(f"{path}: header says {length} samples, file holds {len(x)}")
    return x.astype(np.float64), sample_rate


def write_latents(path, latents: LatentSequence) -> None:
    z = np.asarray(latents.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(LATENT_MAGIC, FORMAT_VERSION, z.shape[0], z.shape[1]))
        f.write(z.tobytes())


def read_latents(path, frame_rate=Fraction(44100, 64)) -> LatentSequence:
    raw = Path(path).read_bytes()
    magic, version, frames, channels = _read_header(raw, LATENT_MAGIC, path)
    z = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if z.size != frames * channels:
        raise ValueError(f"{path}: header says {frames}x{channels}, file holds {z.size} values")
    return LatentSequence(z.reshape(frames, channels).astype(np.float64), frame_rate)


def _read_header(raw: bytes, magic: bytes, path):
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    fields = _HEADER.unpack_from(raw)
    if fields[0] != magic:
        raise ValueError(f"{path}: bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {fields[1]}")
    return fields

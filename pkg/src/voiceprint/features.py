"""Mel-spectrogram features at the three supported image geometries.

Pipeline: STFT power -> triangular mel filterbank -> dB compression ->
bilinear resize -> per-image mean/variance normalization -> replication
across three channels. A small binary cache format stores the result one
file per utterance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .errors import ConfigError, FormatError, VoiceprintError

DB_FLOOR = 1e-10
NORM_SD_FLOOR = 1e-8

FEATURE_MAGIC = b"VPFT"
FEATURE_VERSION = 1


class TooShortError(VoiceprintError):
    """Clip shorter than one analysis window."""


class NormalizationError(VoiceprintError):
    """Zero variance inside a speaker group."""


@dataclass(frozen=True)
class StftConfig:
    window_ms: int = 25
    hop_ms: int = 10
    fft_size: int = 512

    def __post_init__(self):
        if not self.window_ms >= self.hop_ms > 0:
            raise ValueError("require window_ms >= hop_ms > 0")
        if self.fft_size < 1:
            raise ValueError("fft_size must be positive")

    def window_samples(self, sample_rate: int) -> int:
        return self.window_ms * sample_rate // 1000

    def hop_samples(self, sample_rate: int) -> int:
        return self.hop_ms * sample_rate // 1000


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float | None = None  # None -> sample_rate / 2

    def __post_init__(self):
        if self.n_mels < 2:
            raise ValueError("n_mels must be at least 2")
        if self.f_min < 0:
            raise ValueError("f_min must be nonnegative")


@dataclass(frozen=True)
class Geometry:
    name: str
    width: int
    height: int


GEOMETRIES = {
    "224x224": Geometry("224x224", 224, 224),
    "448x448": Geometry("448x448", 448, 448),
    "432x288": Geometry("432x288", 432, 288),  # 432 wide, 288 tall
}


def get_geometry(name: str | Geometry) -> Geometry:
    if isinstance(name, Geometry):
        return name
    try:
        return GEOMETRIES[name]
    except KeyError:
        raise ConfigError(
            f"unknown geometry {name!r}; expected one of {sorted(GEOMETRIES)}"
        ) from None


@dataclass
class FeatureTensor:
    """Normalized mel-spectrogram image, replicated across 3 channels."""

    data: np.ndarray  # (height, width, 3) float32
    geometry: Geometry

    def __post_init__(self):
        expected = (self.geometry.height, self.geometry.width, 3)
        if self.data.shape != expected:
            raise ValueError(f"data shape {self.data.shape} != {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature tensor contains non-finite values")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann_window(n: int) -> np.ndarray:
    # periodic form, standard for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(clip: AudioClip, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Windowed DFT power per frame, shape [frames, fft_size//2 + 1]."""
    win = cfg.window_samples(clip.sample_rate)
    hop = cfg.hop_samples(clip.sample_rate)
    if cfg.fft_size < win:
        raise ConfigError(f"fft_size {cfg.fft_size} < window of {win} samples")
    x = clip.samples
    if x.size < win:
        raise TooShortError(f"clip of {x.size} samples < window of {win}")
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * hann_window(win)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def mel_filterbank(cfg: MelConfig, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular filters with peaks equally spaced on the mel axis.

    Returns [n_mels, fft_size//2 + 1]. Adjacent filters share band edges,
    so interior bins between the first and last peak partition to 1.
    """
    f_max = sample_rate / 2 if cfg.f_max is None else cfg.f_max
    if not cfg.f_min < f_max <= sample_rate / 2:
        raise ConfigError(f"require 0 <= f_min < f_max <= {sample_rate / 2}")
    n_bins = fft_size // 2 + 1
    freqs = np.arange(n_bins) * (sample_rate / fft_size)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max),
                                  cfg.n_mels + 2))
    lo, peak, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (peak - lo)
    falling = (hi - freqs[None, :]) / (hi - peak)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.sum(axis=1) <= 0):
        raise ConfigError(
            f"n_mels={cfg.n_mels} too dense for fft_size={fft_size}: "
            "some filter covers no FFT bin"
        )
    return fb


def mel_spectrogram(clip: AudioClip, stft: StftConfig = StftConfig(),
                    mel: MelConfig = MelConfig()) -> np.ndarray:
    """Log-compressed mel energies, shape [n_mels, frames], in dB."""
    power = stft_power(clip, stft)
    fb = mel_filterbank(mel, stft.fft_size, clip.sample_rate)
    energy = fb @ power.T
    return 10.0 * np.log10(np.maximum(energy, DB_FLOOR))


def bilinear_resize(mat: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the pixel-center convention (no corner align)."""
    src = np.asarray(mat, dtype=np.float64)
    in_h, in_w = src.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bottom = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def to_feature_tensor(spec: np.ndarray, geometry: str | Geometry) -> FeatureTensor:
    """Resize a mel matrix to a geometry, normalize, replicate to 3 channels."""
    geom = get_geometry(geometry)
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2 or spec.size == 0:
        raise ValueError("spec must be a non-empty 2-d matrix")
    img = bilinear_resize(spec, geom.height, geom.width)
    img = (img - img.mean()) / max(float(img.std()), NORM_SD_FLOOR)
    data = np.repeat(img.astype(np.float32)[:, :, None], 3, axis=2)
    return FeatureTensor(data=data, geometry=geom)


def normalize_per_speaker(groups: dict[str, list[FeatureTensor]]) -> dict[str, list[FeatureTensor]]:
    """Subtract each speaker's scalar mean and divide by their scalar sd.

    Training-side analysis mode; the default pipeline normalizes per image
    inside to_feature_tensor instead (speaker identity is unknown at
    inference time). Mutates the tensors in place.
    """
    for speaker, tensors in groups.items():
        if not tensors:
            raise ValueError(f"speaker {speaker!r} has no tensors")
        stacked = np.concatenate([t.data.ravel() for t in tensors])
        sd = float(stacked.std())
        if sd == 0.0:
            raise NormalizationError(f"zero variance for speaker {speaker!r}")
        mean = float(stacked.mean())
        for t in tensors:
            t.data = ((t.data - mean) / sd).astype(np.float32)
    return groups


def feature_to_bytes(data: np.ndarray) -> bytes:
    """Cache encoding: magic, version u16, h/w/c u32, f32 LE row-major."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError("feature array must be h x w x c")
    h, w, c = arr.shape
    return FEATURE_MAGIC + struct.pack("<HIII", FEATURE_VERSION, h, w, c) + arr.tobytes()


def feature_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError("bad feature cache magic")
    version, h, w, c = struct.unpack_from("<HIII", blob, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature cache version {version}")
    expected = h * w * c * 4
    payload = blob[4 + 14:]
    if len(payload) != expected:
        raise FormatError(f"feature payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()


def save_feature(path, data: np.ndarray | FeatureTensor) -> None:
    arr = data.data if isinstance(data, FeatureTensor) else data
    with open(path, "wb") as fh:
        fh.write(feature_to_bytes(arr))


def load_feature(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return feature_from_bytes(fh.read())

"""WAV decoding, silence trimming, and loop-extension to a fixed duration.

All operations are pure: they return new clips and never mutate their
inputs. Only 16 kHz mono pipelines are supported downstream, but decoding
accepts any rate and channel count (channels are averaged to mono).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, VoiceprintError

CANONICAL_SAMPLE_RATE = 16000

# int16 full scale; +32767 maps to ~0.99997 and -32768 to exactly -1.0,
# keeping every decoded sample inside [-1, 1].
_INT16_SCALE = 32768.0


class WavFormatError(FormatError):
    """RIFF/WAVE container is malformed."""


class UnsupportedWavError(FormatError):
    """WAV codec other than 16-bit PCM or 32-bit float."""


class EmptyAudioError(FormatError):
    """WAV data chunk holds zero samples."""


class AllSilentError(VoiceprintError):
    """No frame rises above the silence threshold."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("clip must hold at least one sample")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("clip contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class TrimPolicy:
    """Energy-threshold silence trimming, relative to the loudest frame."""

    frame_ms: int = 25
    hop_ms: int = 10
    threshold_db: float = -40.0
    min_voiced_frames: int = 3

    def __post_init__(self):
        if not self.frame_ms >= self.hop_ms > 0:
            raise ValueError("require frame_ms >= hop_ms > 0")
        if self.threshold_db >= 0:
            raise ValueError("threshold_db must be negative")


def decode_wav(data: bytes) -> AudioClip:
    """Parse a RIFF/WAVE byte string into a mono AudioClip.

    Accepts 16-bit PCM and 32-bit IEEE float, any channel count; channels
    are averaged. Raises WavFormatError on a bad container,
    UnsupportedWavError on other codecs, EmptyAudioError on empty data.
    """
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE container")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"truncated chunk {cid!r}")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise WavFormatError("missing fmt or data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels < 1 or sample_rate <= 0:
        raise WavFormatError("invalid channel count or sample rate")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2")
        samples = raw.astype(np.float64) / _INT16_SCALE
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedWavError(
            f"unsupported codec: format={audio_format} bits={bits}"
        )
    if samples.size == 0:
        raise EmptyAudioError("data chunk holds no samples")
    if samples.size % channels:
        raise WavFormatError("data size not a multiple of the frame size")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples=samples, sample_rate=sample_rate)


def encode_wav(clip: AudioClip) -> bytes:
    """Serialize a clip as mono 16-bit PCM WAV bytes.

    Inverse of decode_wav for 16-bit sources: quantization is exact on
    any sample of the form k / 32768.
    """
    ints = np.rint(clip.samples * _INT16_SCALE)
    ints = np.clip(ints, -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def load_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        clip = decode_wav(fh.read())
    return replace(clip, source_id=str(path))


def save_wav(path, clip: AudioClip) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_wav(clip))


def _frame_rms(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if x.size < frame:
        return np.sqrt(np.array([np.mean(x * x)]))
    n_frames = 1 + (x.size - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.sqrt(np.mean(x[idx] * x[idx], axis=1))


def trim_silence(clip: AudioClip, policy: TrimPolicy = TrimPolicy()) -> AudioClip:
    """Cut leading and trailing silence; interior pauses are kept.

    A frame is voiced when its RMS exceeds the loudest frame's RMS plus
    threshold_db. Raises AllSilentError when fewer than min_voiced_frames
    frames qualify.
    """
    frame = max(1, policy.frame_ms * clip.sample_rate // 1000)
    hop = max(1, policy.hop_ms * clip.sample_rate // 1000)
    rms = _frame_rms(clip.samples, frame, hop)
    gate = rms.max() * 10.0 ** (policy.threshold_db / 20.0)
    voiced = np.flatnonzero(rms > gate)
    if voiced.size == 0 or voiced.size < min(policy.min_voiced_frames, rms.size):
        raise AllSilentError(
            f"no voiced frames above {policy.threshold_db} dB in {clip.source_id or 'clip'}"
        )
    start = int(voiced[0]) * hop
    end = min(int(voiced[-1]) * hop + frame, clip.samples.size)
    return replace(clip, samples=clip.samples[start:end].copy())


def loop_to_duration(clip: AudioClip, target_s: float,
                     crop_rng: np.random.Generator | None = None) -> AudioClip:
    """Extend or crop a clip to exactly round(target_s * sample_rate) samples.

    Short clips repeat end-to-end with the final repetition truncated; long
    clips keep the leading segment (or a seeded random offset when crop_rng
    is given).
    """
    if target_s <= 0:
        raise ValueError("target_s must be positive")
    target = int(np.floor(target_s * clip.sample_rate + 0.5))  # round half up
    if target < 1:
        raise ValueError("target duration is below one sample")
    n = clip.samples.size
    if n >= target:
        offset = 0
        if crop_rng is not None and n > target:
            offset = int(crop_rng.integers(0, n - target + 1))
        out = clip.samples[offset:offset + target].copy()
    else:
        out = clip.samples[np.arange(target) % n]
    return replace(clip, samples=out)

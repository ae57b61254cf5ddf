"""End-to-end preprocessing: WAV -> trimmed, looped clip -> feature cache.

The cache directory mirrors the corpus layout with one .vpft file per
utterance plus an index.tsv of (utterance path, cache file, content hash).
The hash covers the source bytes and the feature parameters, so reruns
with an unchanged corpus and config are no-ops.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AllSilentError, TrimPolicy, decode_wav, loop_to_duration, trim_silence
from .errors import ConfigError, FormatError
from .features import (FeatureTensor, MelConfig, StftConfig, get_geometry,
                       load_feature, mel_spectrogram, save_feature, to_feature_tensor)

log = logging.getLogger(__name__)

INDEX_NAME = "index.tsv"


@dataclass(frozen=True)
class FeatureParams:
    geometry: str = "224x224"
    duration_s: float = 10.0
    stft: StftConfig = StftConfig()
    mel: MelConfig = MelConfig()
    trim: TrimPolicy = TrimPolicy()

    def __post_init__(self):
        get_geometry(self.geometry)
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")

    def fingerprint(self) -> str:
        return (f"{self.geometry}|{self.duration_s!r}|{self.stft}|{self.mel}|"
                f"{self.trim}")


def clip_to_feature(clip, params: FeatureParams) -> FeatureTensor:
    """trim -> loop to target duration -> mel spectrogram -> feature tensor."""
    clip = trim_silence(clip, params.trim)
    clip = loop_to_duration(clip, params.duration_s)
    spec = mel_spectrogram(clip, params.stft, params.mel)
    return to_feature_tensor(spec, params.geometry)


def wav_bytes_to_feature(data: bytes, params: FeatureParams,
                         expect_sample_rate: int = 16000) -> FeatureTensor:
    clip = decode_wav(data)
    if clip.sample_rate != expect_sample_rate:
        raise ConfigError(
            f"expected {expect_sample_rate} Hz input, got {clip.sample_rate} Hz "
            "(resampling is out of scope)")
    return clip_to_feature(clip, params)


def _entry_hash(data: bytes, params: FeatureParams) -> str:
    digest = hashlib.sha256()
    digest.update(params.fingerprint().encode())
    digest.update(data)
    return digest.hexdigest()


def _read_index(cache_dir: Path) -> dict[str, tuple[str, str]]:
    index_path = cache_dir / INDEX_NAME
    index: dict[str, tuple[str, str]] = {}
    if index_path.exists():
        for line in index_path.read_text(encoding="utf-8").splitlines():
            if line:
                path, cache_rel, digest = line.split("\t")
                index[path] = (cache_rel, digest)
    return index


def _write_index(cache_dir: Path, index: dict[str, tuple[str, str]]) -> None:
    lines = [f"{path}\t{rel}\t{digest}" for path, (rel, digest) in sorted(index.items())]
    (cache_dir / INDEX_NAME).write_text("\n".join(lines) + "\n",
                                        encoding="utf-8", newline="\n")


@dataclass
class PreprocessResult:
    cached: int
    reused: int
    skipped: list[str]

    @property
    def skip_fraction(self) -> float:
        total = self.cached + self.reused + len(self.skipped)
        return len(self.skipped) / total if total else 0.0


def preprocess_manifest(manifest, corpus_root, cache_dir, params: FeatureParams) -> PreprocessResult:
    """Build (or refresh) the feature cache for every manifest utterance.

    All-silent or unreadable utterances are logged and skipped; callers
    decide whether the skip fraction is acceptable.
    """
    root = Path(corpus_root)
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    index = _read_index(cache)
    cached = reused = 0
    skipped: list[str] = []
    for entry in manifest.entries:
        src = root / entry.path
        try:
            data = src.read_bytes()
        except OSError as exc:
            log.warning("unreadable audio %s: %s", src, exc)
            skipped.append(entry.path)
            continue
        digest = _entry_hash(data, params)
        rel = entry.path + ".vpft"
        out_path = cache / rel
        known = index.get(entry.path)
        if known == (rel, digest) and out_path.exists():
            reused += 1
            continue
        try:
            tensor = wav_bytes_to_feature(data, params)
        except (AllSilentError, FormatError, ConfigError) as exc:
            log.warning("skipping %s: %s", entry.path, exc)
            skipped.append(entry.path)
            index.pop(entry.path, None)
            continue
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_feature(out_path, tensor)
        index[entry.path] = (rel, digest)
        cached += 1
    _write_index(cache, index)
    return PreprocessResult(cached=cached, reused=reused, skipped=skipped)


class FeatureStore:
    """Lazy utterance-path -> feature-array mapping over a cache directory."""

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self.index = {path: rel for path, (rel, _) in _read_index(self.cache_dir).items()}
        if not self.index:
            raise ConfigError(
                f"no feature cache index in {self.cache_dir}; run preprocess first")
        self._loaded: dict[str, np.ndarray] = {}

    def __contains__(self, path: str) -> bool:
        return path in self.index

    def __getitem__(self, path: str) -> np.ndarray:
        arr = self._loaded.get(path)
        if arr is None:
            if path not in self.index:
                raise ConfigError(f"utterance {path!r} missing from feature cache; "
                                  "re-run preprocess")
            arr = load_feature(self.cache_dir / self.index[path])
            self._loaded[path] = arr
        return arr

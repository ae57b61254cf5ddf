"""Manifest management and a seeded synthetic-speaker corpus generator.

Each synthetic speaker is a fixed harmonic profile: a fundamental drawn
without replacement from a quantized grid, eight harmonics shaped by a
speaker-specific rolloff and a formant-like spectral bump. Utterances of
one speaker share that profile exactly and differ only by seeded
amplitude jitter (global and per-harmonic slow modulation), white noise
at a fixed SNR, random phases, and a random duration. Identity is
therefore knowable from the spectrum, which keeps desk-scale training
runs meaningful.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, CANONICAL_SAMPLE_RATE, save_wav
from .errors import ConfigError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.70, 0.15, 0.15)

F0_GRID_HZ = np.arange(90.0, 260.0 + 1e-9, 8.0)
N_HARMONICS = 8
NOISE_SNR_DB = 20.0


@dataclass(frozen=True)
class ManifestEntry:
    speaker_id: str
    path: str  # relative to the corpus root / manifest location
    split: str
    duration_s: float

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


@dataclass
class Manifest:
    entries: list[ManifestEntry]

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("utterance paths must be unique")
        in_train = {e.speaker_id for e in self.entries if e.split == "train"}
        missing = {e.speaker_id for e in self.entries} - in_train
        if missing:
            raise ValueError(f"speakers with no train entry: {sorted(missing)}")

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def manifest_to_text(manifest: Manifest) -> str:
    lines = [f"{e.speaker_id}\t{e.path}\t{e.split}\t{e.duration_s!r}"
             for e in manifest.entries]
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str) -> Manifest:
    entries = []
    for line in text.splitlines():
        if not line:
            continue
        speaker, path, split, duration = line.split("\t")
        entries.append(ManifestEntry(speaker, path, split, float(duration)))
    return Manifest(entries)


def write_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(manifest_to_text(manifest), encoding="utf-8", newline="\n")


def read_manifest(path) -> Manifest:
    return manifest_from_text(Path(path).read_text(encoding="utf-8"))


def _split_counts(n: int, ratios) -> tuple[int, int, int]:
    # floor val/test; train absorbs the remainder so it is never empty
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    return n - n_val - n_test, n_val, n_test


def _assign_splits(n: int, ratios, rng: np.random.Generator) -> list[str]:
    n_train, n_val, n_test = _split_counts(n, ratios)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    order = rng.permutation(n)
    out = [""] * n
    for slot, pos in enumerate(order):
        out[pos] = labels[slot]
    return out


def build_manifest(root_dir, ratios=DEFAULT_RATIOS, seed: int = 0) -> Manifest:
    """Scan root/speaker_id/*.wav into a stratified, seeded 3-way split."""
    from .audio import load_wav

    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    root = Path(root_dir)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(spk_dir.glob("*.wav"))
        if not files:
            log.warning("speaker %s has no wav files; skipped", spk_dir.name)
            continue
        splits = _assign_splits(len(files), ratios, rng)
        for f, split in zip(files, splits):
            clip = load_wav(f)
            entries.append(ManifestEntry(
                speaker_id=spk_dir.name,
                path=str(f.relative_to(root)),
                split=split,
                duration_s=clip.duration_s))
    if not entries:
        raise ConfigError(f"no speaker data under {root}")
    return Manifest(entries)


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int = 8
    utterances_per_speaker: int = 40
    duration_range_s: tuple[float, float] = (1.5, 6.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.num_speakers > F0_GRID_HZ.size:
            raise ValueError(f"at most {F0_GRID_HZ.size} speakers (fundamental grid)")
        if self.utterances_per_speaker < 1:
            raise ValueError("need at least 1 utterance per speaker")
        lo, hi = self.duration_range_s
        if not 0 < lo <= hi:
            raise ValueError("duration range must satisfy 0 < min <= max")


@dataclass(frozen=True)
class _SpeakerProfile:
    f0: float
    harmonic_amps: np.ndarray  # rolloff * formant bump * per-harmonic wobble

    @staticmethod
    def sample(rng: np.random.Generator, f0: float) -> "_SpeakerProfile":
        h = np.arange(1, N_HARMONICS + 1)
        rolloff = rng.uniform(0.3, 1.7)
        formant_hz = rng.uniform(400.0, 2200.0)
        formant_bw = rng.uniform(150.0, 400.0)
        formant_gain = rng.uniform(1.5, 4.0)
        wobble = rng.uniform(0.6, 1.4, N_HARMONICS)
        freqs = h * f0
        bump = 1.0 + formant_gain * np.exp(-0.5 * ((freqs - formant_hz) / formant_bw) ** 2)
        return _SpeakerProfile(f0=f0, harmonic_amps=(h ** -rolloff) * bump * wobble)


def _render_utterance(rng: np.random.Generator, profile: _SpeakerProfile,
                      duration_s: float, sample_rate: int) -> np.ndarray:
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    h = np.arange(1, N_HARMONICS + 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, N_HARMONICS)
    # slow per-harmonic amplitude jitter: the short-time spectral envelope
    # wanders, so a leading crop is a noisier sample of the identity than
    # the full (looped) utterance
    am_rate = rng.uniform(0.2, 0.9, N_HARMONICS)
    am_depth = rng.uniform(0.1, 0.35, N_HARMONICS)
    am_phase = rng.uniform(0.0, 2.0 * np.pi, N_HARMONICS)
    env = 1.0 + am_depth[:, None] * np.sin(
        2.0 * np.pi * am_rate[:, None] * t[None, :] + am_phase[:, None])
    waves = np.sin(2.0 * np.pi * profile.f0 * h[:, None] * t[None, :] + phases[:, None])
    signal = (profile.harmonic_amps[:, None] * env * waves).sum(axis=0)

    global_depth = rng.uniform(0.05, 0.25)
    global_rate = rng.uniform(0.3, 1.2)
    global_phase = rng.uniform(0.0, 2.0 * np.pi)
    signal *= 1.0 + global_depth * np.sin(2.0 * np.pi * global_rate * t + global_phase)

    rms = float(np.sqrt(np.mean(signal ** 2)))
    noise = rng.standard_normal(n) * (rms / 10.0 ** (NOISE_SNR_DB / 20.0))
    x = signal + noise
    peak = rng.uniform(0.55, 0.9)
    return x * (peak / np.max(np.abs(x)))


def generate_synthetic(spec: SynthSpec, out_dir) -> Manifest:
    """Write a seeded synthetic corpus of 16 kHz 16-bit WAVs under out_dir.

    Fully deterministic for a fixed spec: regenerating produces
    byte-identical files and an identical manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    f0s = rng.choice(F0_GRID_HZ, size=spec.num_speakers, replace=False)
    split_rng = np.random.default_rng([spec.seed, 0x5])
    entries: list[ManifestEntry] = []
    for s in range(spec.num_speakers):
        speaker_id = f"spk{s:02d}"
        profile = _SpeakerProfile.sample(rng, float(f0s[s]))
        spk_dir = out / speaker_id
        spk_dir.mkdir(exist_ok=True)
        splits = _assign_splits(spec.utterances_per_speaker, DEFAULT_RATIOS, split_rng)
        for u in range(spec.utterances_per_speaker):
            duration = rng.uniform(*spec.duration_range_s)
            samples = _render_utterance(rng, profile, duration, CANONICAL_SAMPLE_RATE)
            rel = f"{speaker_id}/utt{u:03d}.wav"
            clip = AudioClip(samples=samples, sample_rate=CANONICAL_SAMPLE_RATE,
                             source_id=rel)
            save_wav(out / rel, clip)
            entries.append(ManifestEntry(
                speaker_id=speaker_id, path=rel, split=splits[u],
                duration_s=samples.size / CANONICAL_SAMPLE_RATE))
    return Manifest(entries)

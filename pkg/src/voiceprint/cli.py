"""Command-line entry point: synth, preprocess, train, eval, identify.

Exit codes: 0 on success, 1 on I/O or runtime failure, 2 on configuration
or validation errors. Every command is deterministic given its flags and
seeds.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset, identification
from .audio import load_wav
from .errors import ConfigError, FormatError, VoiceprintError
from .features import GEOMETRIES, MelConfig, StftConfig
from .losses import FAMILIES, LossConfig
from .network import (EmbeddingNetwork, NetworkConfig, PRESETS,
                      load_checkpoint, save_checkpoint)
from .pipeline import FeatureParams, FeatureStore, preprocess_manifest, wav_bytes_to_feature
from .training import TrainConfig, TrainingDivergedError, train


@dataclass(frozen=True)
class RunConfig:
    geometry: str = "224x224"
    duration_s: float = 10.0
    loss: str = "cosface"
    net_preset: str = "vgg16m"
    scale: float = 22.0
    margin: float = 0.2
    seed: int = 0
    train: TrainConfig = TrainConfig()
    stft: StftConfig = StftConfig()
    mel: MelConfig = MelConfig()

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {sorted(GEOMETRIES)}")
        if self.loss not in FAMILIES:
            raise ValueError(f"loss must be one of {FAMILIES}")
        if self.net_preset not in PRESETS:
            raise ValueError(f"net_preset must be one of {sorted(PRESETS)}")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")

    def feature_params(self) -> FeatureParams:
        return FeatureParams(geometry=self.geometry, duration_s=self.duration_s,
                             stft=self.stft, mel=self.mel)

    def loss_config(self, num_classes: int) -> LossConfig:
        return LossConfig(family=self.loss, num_classes=num_classes,
                          s=self.scale, m=self.margin)

    def network_config(self, num_classes: int) -> NetworkConfig:
        return NetworkConfig.preset(self.net_preset, num_classes=num_classes)


def runconfig_to_pairs(cfg: RunConfig) -> list[tuple[str, str]]:
    t, f, m = cfg.train, cfg.stft, cfg.mel
    return [
        ("geometry", cfg.geometry),
        ("duration_s", repr(cfg.duration_s)),
        ("loss", cfg.loss),
        ("net_preset", cfg.net_preset),
        ("scale", repr(cfg.scale)),
        ("margin", repr(cfg.margin)),
        ("seed", str(cfg.seed)),
        ("train.lr0", repr(t.lr0)),
        ("train.momentum", repr(t.momentum)),
        ("train.weight_decay", repr(t.weight_decay)),
        ("train.plateau_factor", repr(t.plateau_factor)),
        ("train.plateau_patience", str(t.plateau_patience)),
        ("train.plateau_threshold", repr(t.plateau_threshold)),
        ("train.early_stop_patience", str(t.early_stop_patience)),
        ("train.min_epochs", str(t.min_epochs)),
        ("train.max_epochs", str(t.max_epochs)),
        ("train.batch_size", str(t.batch_size)),
        ("train.seed", str(t.seed)),
        ("stft.window_ms", str(f.window_ms)),
        ("stft.hop_ms", str(f.hop_ms)),
        ("stft.fft_size", str(f.fft_size)),
        ("mel.n_mels", str(m.n_mels)),
        ("mel.f_min", repr(m.f_min)),
        ("mel.f_max", "" if m.f_max is None else repr(m.f_max)),
    ]


def runconfig_to_text(cfg: RunConfig) -> str:
    return "\n".join(f"{k}={v}" for k, v in runconfig_to_pairs(cfg)) + "\n"


def runconfig_from_pairs(pairs: dict[str, str]) -> RunConfig:
    defaults = dict(runconfig_to_pairs(RunConfig()))
    unknown = set(pairs) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    p = {**defaults, **pairs}
    try:
        return RunConfig(
            geometry=p["geometry"],
            duration_s=float(p["duration_s"]),
            loss=p["loss"],
            net_preset=p["net_preset"],
            scale=float(p["scale"]),
            margin=float(p["margin"]),
            seed=int(p["seed"]),
            train=TrainConfig(
                lr0=float(p["train.lr0"]),
                momentum=float(p["train.momentum"]),
                weight_decay=float(p["train.weight_decay"]),
                plateau_factor=float(p["train.plateau_factor"]),
                plateau_patience=int(p["train.plateau_patience"]),
                plateau_threshold=float(p["train.plateau_threshold"]),
                early_stop_patience=int(p["train.early_stop_patience"]),
                min_epochs=int(p["train.min_epochs"]),
                max_epochs=int(p["train.max_epochs"]),
                batch_size=int(p["train.batch_size"]),
                seed=int(p["train.seed"]),
            ),
            stft=StftConfig(
                window_ms=int(p["stft.window_ms"]),
                hop_ms=int(p["stft.hop_ms"]),
                fft_size=int(p["stft.fft_size"]),
            ),
            mel=MelConfig(
                n_mels=int(p["mel.n_mels"]),
                f_min=float(p["mel.f_min"]),
                f_max=None if p["mel.f_max"] == "" else float(p["mel.f_max"]),
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def runconfig_from_text(text: str) -> RunConfig:
    pairs = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            pairs[key] = value
    return runconfig_from_pairs(pairs)


_CONFIG_FLAGS = [
    # (flag, config key, type)
    ("--geometry", "geometry", str),
    ("--duration", "duration_s", float),
    ("--loss", "loss", str),
    ("--net-preset", "net_preset", str),
    ("--scale", "scale", float),
    ("--margin", "margin", float),
    ("--seed", "seed", int),
    ("--lr", "train.lr0", float),
    ("--momentum", "train.momentum", float),
    ("--weight-decay", "train.weight_decay", float),
    ("--batch-size", "train.batch_size", int),
    ("--min-epochs", "train.min_epochs", int),
    ("--max-epochs", "train.max_epochs", int),
    ("--early-stop-patience", "train.early_stop_patience", int),
    ("--plateau-patience", "train.plateau_patience", int),
    ("--train-seed", "train.seed", int),
    ("--window-ms", "stft.window_ms", int),
    ("--hop-ms", "stft.hop_ms", int),
    ("--fft-size", "stft.fft_size", int),
    ("--n-mels", "mel.n_mels", int),
]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="key=value config file; flags override it")
    for flag, key, typ in _CONFIG_FLAGS:
        parser.add_argument(flag, dest=f"cfg:{key}", type=typ, default=None)


def resolve_runconfig(args: argparse.Namespace) -> RunConfig:
    pairs: dict[str, str] = {}
    if getattr(args, "config", None):
        for line in Path(args.config).read_text(encoding="utf-8").splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                pairs[key] = value
    for _, key, _typ in _CONFIG_FLAGS:
        value = getattr(args, f"cfg:{key}")
        if value is not None:
            pairs[key] = str(value)
    return runconfig_from_pairs(pairs)


def cmd_synth(args) -> int:
    spec = dataset.SynthSpec(
        num_speakers=args.speakers,
        utterances_per_speaker=args.utts,
        duration_range_s=(args.dur_min, args.dur_max),
        seed=args.seed)
    manifest = dataset.generate_synthetic(spec, args.out)
    manifest_path = Path(args.out) / "manifest.tsv"
    dataset.write_manifest(manifest_path, manifest)
    print(f"wrote {len(manifest.entries)} utterances; manifest at {manifest_path}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = resolve_runconfig(args)
    manifest = dataset.read_manifest(args.manifest)
    root = Path(args.manifest).parent
    result = preprocess_manifest(manifest, root, args.out, cfg.feature_params())
    print(f"cached {result.cached}, reused {result.reused}, "
          f"skipped {len(result.skipped)} of {len(manifest.entries)}")
    if result.skip_fraction > 0.10:
        print("error: more than 10% of utterances were skipped", file=sys.stderr)
        return 1
    return 0


ENROLLMENT_NAME = "enrollment.tsv"
CHECKPOINT_NAME = "checkpoint.vpck"


def cmd_train(args) -> int:
    cfg = resolve_runconfig(args)
    manifest = dataset.read_manifest(args.manifest)
    store = FeatureStore(args.cache)
    missing = [e.path for e in manifest.entries if e.path not in store]
    if missing:
        raise ConfigError(
            f"{len(missing)} utterances missing from cache (e.g. {missing[0]!r}); "
            "run `voiceprint preprocess` with the same config first")
    speakers = manifest.speakers()
    net = EmbeddingNetwork(cfg.network_config(len(speakers)), seed=cfg.seed)
    loss_cfg = cfg.loss_config(len(speakers))

    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(runconfig_to_text(cfg),
                                        encoding="utf-8", newline="\n")
    result = train(manifest, store, net, loss_cfg, cfg.train,
                   log_path=run_dir / "log.tsv")

    best = result.best_net
    extra = dict(runconfig_to_pairs(cfg))
    extra["speakers"] = ",".join(result.label_order)
    extra["best_epoch"] = str(result.best_epoch)
    save_checkpoint(run_dir / CHECKPOINT_NAME, best, extra)

    train_entries = manifest.by_split("train")
    emb = identification.compute_embeddings(best, train_entries, store)
    groups: dict[str, list[np.ndarray]] = {}
    for e, vec in zip(train_entries, emb):
        groups.setdefault(e.speaker_id, []).append(vec)
    db = identification.build_enrollment({sp: np.stack(v) for sp, v in groups.items()})
    lines = [sp + "\t" + "\t".join(repr(float(x)) for x in db.centroids[sp])
             for sp in db.speaker_ids()]
    (run_dir / ENROLLMENT_NAME).write_text("\n".join(lines) + "\n",
                                           encoding="utf-8", newline="\n")
    last = result.records[-1]
    print(f"trained {len(result.records)} epochs; best epoch {result.best_epoch}; "
          f"final val_top1 {last.val_top1:.4f}; run dir {run_dir}")
    return 0


def _load_run(checkpoint_path: Path):
    net, extra = load_checkpoint(checkpoint_path)
    speakers = extra.get("speakers", "").split(",")
    if not speakers or speakers == [""]:
        raise FormatError("checkpoint has no speaker table")
    cfg = runconfig_from_pairs(
        {k: v for k, v in extra.items() if k not in ("speakers", "best_epoch")})
    return net, speakers, cfg


def cmd_eval(args) -> int:
    net, speakers, cfg = _load_run(Path(args.checkpoint))
    manifest = dataset.read_manifest(args.manifest)
    if manifest.speakers() != speakers:
        raise ConfigError("manifest speakers differ from the trained speaker table")
    store = FeatureStore(args.cache)
    report = identification.evaluate(net, manifest, store,
                                     cfg.loss_config(len(speakers)),
                                     geometry=cfg.geometry, duration_s=cfg.duration_s)
    text = identification.report_to_text([report])
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    print(text, end="")
    return 0


def _read_enrollment(path: Path) -> identification.EnrollmentDB:
    centroids = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line:
            fields = line.split("\t")
            centroids[fields[0]] = np.array([float(x) for x in fields[1:]])
    return identification.EnrollmentDB(centroids)


def cmd_identify(args) -> int:
    checkpoint_path = Path(args.checkpoint)
    net, _, cfg = _load_run(checkpoint_path)
    db = _read_enrollment(checkpoint_path.parent / ENROLLMENT_NAME)
    data = Path(args.wav).read_bytes()
    tensor = wav_bytes_to_feature(data, cfg.feature_params())
    batch = tensor.data.transpose(2, 0, 1)[None].astype(net.dtype)
    emb, _ = net.forward_embed(batch)
    speaker, score = identification.identify_cosine(db, emb[0].astype(np.float64))
    print(f"{speaker}\t{score:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voiceprint",
        description="Desk-scale speaker identification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus")
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--utts", type=int, default=40)
    p.add_argument("--dur-min", type=float, default=1.5)
    p.add_argument("--dur-max", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="build the feature cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a network on cached features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--run-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("identify", help="identify the speaker of one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.set_defaults(func=cmd_identify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, VoiceprintError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Desk-scale loss x duration comparison on the synthetic corpus.

Mirrors the full-scale experiment directionally: train the tiny preset for
every loss family at 3 s and 10 s target durations, several seeds each,
then compare test top-1 and embedding compactness. Runs are independent
and execute in parallel worker processes; per-run seeds make the outcome
invariant to scheduling, so two experiments with the same configuration
produce byte-identical logs and reports.
"""

from __future__ import annotations

import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .cli import RunConfig, runconfig_to_text
from .dataset import Manifest, SynthSpec, generate_synthetic, read_manifest, write_manifest
from .identification import EvalReport, evaluate, report_to_text
from .losses import LossConfig
from .network import EmbeddingNetwork, NetworkConfig
from .pipeline import FeatureParams, FeatureStore, preprocess_manifest
from .training import TrainConfig, train

# Short-horizon recipe for the tiny preset on the synthetic corpus; the
# paper-style defaults (lr 1e-3, 30-epoch floor) are far slower than this
# corpus needs.
AXIS_TRAIN = TrainConfig(
    lr0=0.02, momentum=0.9, weight_decay=1e-4,
    plateau_factor=0.1, plateau_patience=3, plateau_threshold=1e-4,
    early_stop_patience=5, min_epochs=6, max_epochs=16, batch_size=32)


@dataclass(frozen=True)
class AxisConfig:
    num_speakers: int = 8
    utterances_per_speaker: int = 40
    duration_range_s: tuple[float, float] = (1.5, 6.0)
    corpus_seed: int = 7
    losses: tuple[str, ...] = ("softmax", "cosface", "arcface")
    durations_s: tuple[float, ...] = (3.0, 10.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    geometry: str = "224x224"
    net_preset: str = "tiny"
    train: TrainConfig = AXIS_TRAIN

    def run_specs(self) -> list[tuple[str, float, int]]:
        return [(loss, dur, seed) for loss in self.losses
                for dur in self.durations_s for seed in self.seeds]


@dataclass(frozen=True)
class AxisRunResult:
    loss: str
    duration_s: float
    seed: int
    epochs: int
    best_epoch: int
    report: EvalReport
    train_wall_s: float

    @property
    def run_name(self) -> str:
        return f"{self.loss}_{self.duration_s:g}s_seed{self.seed}"


@dataclass
class AxisResult:
    config: AxisConfig
    runs: list[AxisRunResult]
    workdir: Path
    wall_s: float
    workers: int

    def select(self, loss: str | None = None, duration_s: float | None = None):
        return [r for r in self.runs
                if (loss is None or r.loss == loss)
                and (duration_s is None or r.duration_s == duration_s)]

    def mean_top1(self, loss: str, duration_s: float | None = None) -> float:
        runs = self.select(loss, duration_s)
        return float(np.mean([r.report.top1_classifier for r in runs]))

    def mean_intra(self, loss: str) -> float:
        return float(np.mean([r.report.intra_cos for r in self.select(loss)]))


def _duration_cache_dir(workdir: Path, duration_s: float) -> Path:
    return workdir / "features" / f"dur{duration_s:g}s"


def _run_config(cfg: AxisConfig, loss: str, duration_s: float, seed: int) -> RunConfig:
    return RunConfig(geometry=cfg.geometry, duration_s=duration_s, loss=loss,
                     net_preset=cfg.net_preset, seed=seed,
                     train=replace(cfg.train, seed=seed))


def _execute_run(workdir_s: str, cfg: AxisConfig, loss: str,
                 duration_s: float, seed: int) -> AxisRunResult:
    workdir = Path(workdir_s)
    manifest = read_manifest(workdir / "data" / "manifest.tsv")
    store = FeatureStore(_duration_cache_dir(workdir, duration_s))
    run_cfg = _run_config(cfg, loss, duration_s, seed)
    speakers = manifest.speakers()
    net = EmbeddingNetwork(NetworkConfig.preset(cfg.net_preset, len(speakers)),
                           seed=seed)
    loss_cfg = run_cfg.loss_config(len(speakers))

    run_dir = workdir / "runs" / f"{loss}_{duration_s:g}s_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(runconfig_to_text(run_cfg),
                                        encoding="utf-8", newline="\n")
    t0 = time.perf_counter()
    result = train(manifest, store, net, loss_cfg, run_cfg.train,
                   log_path=run_dir / "log.tsv")
    wall = time.perf_counter() - t0
    report = evaluate(result.best_net, manifest, store, loss_cfg,
                      geometry=cfg.geometry, duration_s=duration_s)
    (run_dir / "report.tsv").write_text(report_to_text([report]),
                                        encoding="utf-8", newline="\n")
    return AxisRunResult(loss=loss, duration_s=duration_s, seed=seed,
                         epochs=len(result.records), best_epoch=result.best_epoch,
                         report=report, train_wall_s=wall)


def prepare_corpus(workdir: Path, cfg: AxisConfig) -> Manifest:
    data_dir = workdir / "data"
    manifest_path = data_dir / "manifest.tsv"
    spec = SynthSpec(num_speakers=cfg.num_speakers,
                     utterances_per_speaker=cfg.utterances_per_speaker,
                     duration_range_s=cfg.duration_range_s,
                     seed=cfg.corpus_seed)
    manifest = generate_synthetic(spec, data_dir)
    write_manifest(manifest_path, manifest)
    for duration_s in cfg.durations_s:
        params = FeatureParams(geometry=cfg.geometry, duration_s=duration_s)
        preprocess_manifest(manifest, data_dir, _duration_cache_dir(workdir, duration_s),
                            params)
    return manifest


def run_axis_experiment(workdir, cfg: AxisConfig = AxisConfig(),
                        workers: int | None = None) -> AxisResult:
    """Generate the corpus, train every (loss, duration, seed) run, and
    write an aggregate report.tsv plus per-run logs under workdir/runs/."""
    t_start = time.perf_counter()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    prepare_corpus(workdir, cfg)

    specs = cfg.run_specs()
    if workers is None:
        workers = max(1, min(8, os.cpu_count() or 1, len(specs)))
    if workers == 1:
        runs = [_execute_run(str(workdir), cfg, *spec) for spec in specs]
    else:
        # single-threaded BLAS inside workers: reproducible and no
        # oversubscription of the worker pool
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = [pool.submit(_execute_run, str(workdir), cfg, *spec)
                       for spec in specs]
            runs = [f.result() for f in futures]

    report_path = workdir / "report.tsv"
    report_path.write_text(report_to_text([r.report for r in runs]),
                           encoding="utf-8", newline="\n")
    return AxisResult(config=cfg, runs=runs, workdir=workdir,
                      wall_s=time.perf_counter() - t_start, workers=workers)


def summarize(result: AxisResult) -> str:
    lines = ["loss      duration  mean_top1  min_top1  mean_intra"]
    for loss in result.config.losses:
        for dur in result.config.durations_s:
            runs = result.select(loss, dur)
            top1s = [r.report.top1_classifier for r in runs]
            intras = [r.report.intra_cos for r in runs]
            lines.append(f"{loss:<9} {dur:>6.0f}s  {np.mean(top1s):>8.4f}  "
                         f"{min(top1s):>8.4f}  {np.mean(intras):>9.4f}")
    lines.append(f"total wall {result.wall_s:.1f}s with {result.workers} workers")
    return "\n".join(lines)

"""Closed-set speaker identification and evaluation metrics.

Two retrieval views are reported side by side: the classifier head's
top-1, and cosine matching against per-speaker centroid embeddings
enrolled from the training split. Tie-breaks are deterministic: lowest
class index for argmax, lexicographically smallest speaker id for
centroid matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import VoiceprintError
from .layers import DegenerateEmbeddingError
from .losses import LossConfig, inference_scores
from .network import EmbeddingNetwork, stack_features


class ClosedSetViolationError(VoiceprintError):
    """Probe speaker not present in the enrolled/training set."""


class EmptyDatabaseError(VoiceprintError):
    """Enrollment database has no usable speakers."""


@dataclass
class EnrollmentDB:
    """speaker id -> unit-norm centroid of that speaker's train embeddings."""

    centroids: dict[str, np.ndarray]

    def __post_init__(self):
        if len(self.centroids) < 2:
            raise EmptyDatabaseError("enrollment needs at least 2 speakers")
        for sp, c in self.centroids.items():
            if not np.isclose(np.linalg.norm(c), 1.0, atol=1e-6):
                raise ValueError(f"centroid for {sp!r} is not unit norm")

    def speaker_ids(self) -> list[str]:
        return sorted(self.centroids)


def build_enrollment(embeddings_by_speaker: dict[str, np.ndarray]) -> EnrollmentDB:
    centroids = {}
    for sp, emb in embeddings_by_speaker.items():
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        centroid = emb.mean(axis=0)
        norm = np.linalg.norm(centroid)
        if norm <= 1e-12:
            raise DegenerateEmbeddingError(f"centroid for {sp!r} has ~zero norm")
        centroids[sp] = centroid / norm
    return EnrollmentDB(centroids)


def top1_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) hits the label."""
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ValueError("scores must be a non-empty [N, K] matrix")
    return float((scores.argmax(axis=1) == np.asarray(labels)).mean())


def identify_cosine(db: EnrollmentDB, probe: np.ndarray) -> tuple[str, float]:
    """Best-matching speaker by dot product against unit centroids."""
    probe = np.asarray(probe, dtype=np.float64)
    best_id, best_score = None, -np.inf
    for sp in db.speaker_ids():
        score = float(db.centroids[sp] @ probe)
        if score > best_score:  # ties keep the lexicographically smaller id
            best_id, best_score = sp, score
    return best_id, best_score


def embedding_geometry(groups: dict[str, np.ndarray]) -> tuple[float, float]:
    """(mean within-speaker pairwise cosine, mean across-speaker cosine)."""
    if len(groups) < 2:
        raise ValueError("need at least 2 speakers")
    mats = {sp: np.atleast_2d(np.asarray(e, dtype=np.float64))
            for sp, e in groups.items()}
    if not any(m.shape[0] >= 2 for m in mats.values()):
        raise ValueError("need at least one speaker with 2+ embeddings")
    order = sorted(mats)
    stacked = np.concatenate([mats[sp] for sp in order])
    owner = np.concatenate([np.full(mats[sp].shape[0], i) for i, sp in enumerate(order)])
    gram = stacked @ stacked.T
    iu, ju = np.triu_indices(len(owner), k=1)
    same = owner[iu] == owner[ju]
    intra = float(gram[iu[same], ju[same]].mean()) if same.any() else float("nan")
    inter = float(gram[iu[~same], ju[~same]].mean())
    return intra, inter


@dataclass
class EvalReport:
    loss_family: str
    geometry: str
    duration_s: float
    top1_classifier: float
    top1_cosine: float
    intra_cos: float
    inter_cos: float
    confusion: dict[tuple[str, str], int] = field(default_factory=dict)


REPORT_HEADER = "loss\tgeometry\tduration_s\ttop1_classifier\ttop1_cosine\tintra_cos\tinter_cos"


def report_to_text(reports: list[EvalReport]) -> str:
    lines = [REPORT_HEADER]
    for r in reports:
        lines.append(
            f"{r.loss_family}\t{r.geometry}\t{r.duration_s!r}\t{r.top1_classifier!r}"
            f"\t{r.top1_cosine!r}\t{r.intra_cos!r}\t{r.inter_cos!r}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> list[EvalReport]:
    lines = text.splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise ValueError("missing report header")
    reports = []
    for line in lines[1:]:
        if not line:
            continue
        loss, geometry, dur, t1c, t1k, intra, inter = line.split("\t")
        reports.append(EvalReport(loss, geometry, float(dur), float(t1c),
                                  float(t1k), float(intra), float(inter)))
    return reports


def compute_embeddings(net: EmbeddingNetwork, entries, features,
                       batch_size: int = 32) -> np.ndarray:
    """Eval-mode embeddings for manifest entries, in order, as float64."""
    out = []
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        xb = stack_features([features[e.path] for e in chunk]).astype(net.dtype, copy=False)
        emb, _ = net.forward_embed(xb, train=False)
        out.append(emb.astype(np.float64))
    return np.concatenate(out)


def evaluate(net: EmbeddingNetwork, manifest, features, loss_cfg: LossConfig,
             geometry: str, duration_s: float, batch_size: int = 32) -> EvalReport:
    """Score the manifest's test split against its train-split enrollment."""
    label_order = manifest.speakers()
    train_entries = manifest.by_split("train")
    test_entries = manifest.by_split("test")
    if not test_entries:
        raise ValueError("test split is empty")
    unseen = {e.speaker_id for e in test_entries} - {e.speaker_id for e in train_entries}
    if unseen:
        raise ClosedSetViolationError(f"test speakers missing from train: {sorted(unseen)}")

    index = {sp: i for i, sp in enumerate(label_order)}
    test_emb = compute_embeddings(net, test_entries, features, batch_size)
    test_labels = np.array([index[e.speaker_id] for e in test_entries])

    scores = inference_scores(loss_cfg, test_emb, net.head_weight.data.astype(np.float64))
    t1_classifier = top1_accuracy(scores, test_labels)

    train_emb = compute_embeddings(net, train_entries, features, batch_size)
    by_speaker: dict[str, list[np.ndarray]] = {}
    for e, emb in zip(train_entries, train_emb):
        by_speaker.setdefault(e.speaker_id, []).append(emb)
    db = build_enrollment({sp: np.stack(v) for sp, v in by_speaker.items()})

    confusion: dict[tuple[str, str], int] = {}
    cosine_hits = 0
    for e, emb in zip(test_entries, test_emb):
        pred, _ = identify_cosine(db, emb)
        cosine_hits += pred == e.speaker_id
        key = (e.speaker_id, pred)
        confusion[key] = confusion.get(key, 0) + 1

    test_groups: dict[str, list[np.ndarray]] = {}
    for e, emb in zip(test_entries, test_emb):
        test_groups.setdefault(e.speaker_id, []).append(emb)
    intra, inter = embedding_geometry({sp: np.stack(v) for sp, v in test_groups.items()})

    return EvalReport(
        loss_family=loss_cfg.family, geometry=geometry, duration_s=duration_s,
        top1_classifier=t1_classifier, top1_cosine=cosine_hits / len(test_entries),
        intra_cos=intra, inter_cos=inter, confusion=confusion)

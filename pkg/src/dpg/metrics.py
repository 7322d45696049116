"""Ranking metrics (AUC, AP, EER), video pooling, and report files.

All three metrics are rank statistics: strictly increasing transforms of the
scores leave them unchanged. Ties are handled explicitly: AUC counts tied
pairs as one half, AP breaks ties by ascending sample id, and EER sweeps every
distinct score as a threshold (predict fake when score >= threshold),
returning (FPR + FNR) / 2 at the sweep point minimizing |FPR - FNR| (the
smallest such midpoint on ties).
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingSet, Label
from .errors import DataError, MetricError
from .model import ModelState, predict_batch
from .numerics import RNG_ALGORITHM


@dataclass
class ScoredSample:
    id: str
    video_id: str
    dataset_tag: str
    label: int        # 0 real, 1 fake
    score: float      # probability of fake


def _split_scores(samples) -> tuple[np.ndarray, np.ndarray]:
    fakes = np.array([s.score for s in samples if s.label == 1], dtype=np.float64)
    reals = np.array([s.score for s in samples if s.label == 0], dtype=np.float64)
    return fakes, reals


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """Average 1-based ranks with ties sharing their group mean."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    n = s.size
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = s[1:] != s[:-1]
    starts = np.nonzero(new_group)[0]
    ends = np.append(starts[1:], n)
    group_rank = (starts + ends - 1) / 2.0 + 1.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_rank[np.cumsum(new_group) - 1]
    return ranks


def auc_from_scores(fakes: np.ndarray, reals: np.ndarray) -> float:
    """Mann-Whitney AUC from raw class score arrays."""
    if fakes.size == 0 or reals.size == 0:
        raise MetricError("AUC needs at least one sample of each class")
    ranks = _average_ranks(np.concatenate([fakes, reals]))
    u = float(ranks[:fakes.size].sum()) - fakes.size * (fakes.size + 1) / 2.0
    return u / (fakes.size * reals.size)


def auc(samples) -> float:
    """Probability that a random fake outscores a random real; ties count half."""
    fakes, reals = _split_scores(samples)
    return auc_from_scores(fakes, reals)


def ap(samples) -> float:
    """Average precision of the fake-positive ranking (ties by ascending id)."""
    if not any(s.label == 1 for s in samples):
        raise MetricError("AP needs at least one fake sample")
    ordered = sorted(samples, key=lambda s: (-s.score, s.id))
    hits = 0
    precision_sum = 0.0
    for rank, s in enumerate(ordered, start=1):
        if s.label == 1:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / hits


def eer(samples) -> float:
    """Equal error rate via an exhaustive sweep over the distinct scores.

    A sample is called fake when its score >= the threshold; ties between
    sweep points with equal |FPR - FNR| resolve to the smaller midpoint.
    """
    fakes, reals = _split_scores(samples)
    if fakes.size == 0 or reals.size == 0:
        raise MetricError("EER needs at least one sample of each class")
    thresholds = np.unique(np.concatenate([fakes, reals]))
    reals_sorted = np.sort(reals)
    fakes_sorted = np.sort(fakes)
    fpr = (reals.size - np.searchsorted(reals_sorted, thresholds, side="left")) / reals.size
    fnr = np.searchsorted(fakes_sorted, thresholds, side="left") / fakes.size
    mid = (fpr + fnr) / 2.0
    best = np.lexsort((mid, np.abs(fpr - fnr)))[0]
    return float(mid[best])


def video_pool(samples) -> list[ScoredSample]:
    """One sample per video: mean frame score; labels must agree within a video."""
    groups: dict[str, list[ScoredSample]] = {}
    order: list[str] = []
    for s in samples:
        if s.video_id not in groups:
            groups[s.video_id] = []
            order.append(s.video_id)
        groups[s.video_id].append(s)
    pooled = []
    for vid in order:
        frames = groups[vid]
        labels = {f.label for f in frames}
        if len(labels) != 1:
            raise DataError(f"video {vid!r} mixes real and fake frames")
        pooled.append(ScoredSample(
            id=vid, video_id=vid, dataset_tag=frames[0].dataset_tag,
            label=frames[0].label,
            score=float(np.mean([f.score for f in frames]))))
    return pooled


def score_set(state: ModelState, eset: EmbeddingSet) -> list[ScoredSample]:
    """Score every record of a labeled set with the model's fake probability."""
    if any(r.label == Label.UNKNOWN for r in eset.records):
        bad = next(r.id for r in eset.records if r.label == Label.UNKNOWN)
        raise DataError(f"cannot evaluate unlabeled record {bad!r}")
    _, _, fake_scores = predict_batch(state, eset.features, ids=eset.ids)
    return [ScoredSample(id=r.id, video_id=r.video_id, dataset_tag=r.dataset_tag,
                         label=int(r.label), score=float(fake_scores[i]))
            for i, r in enumerate(eset.records)]


@dataclass
class TagMetrics:
    frame_auc: float
    video_auc: float
    ap: float
    eer: float

    def to_dict(self) -> dict:
        return {"frame_auc": self.frame_auc, "video_auc": self.video_auc,
                "ap": self.ap, "eer": self.eer}


@dataclass
class MetricsReport:
    per_tag: dict[str, TagMetrics]
    overall: TagMetrics
    mean_frame_auc: float
    config_hash: str
    seed: int
    rng_algorithm: str = RNG_ALGORITHM

    def to_dict(self) -> dict:
        return {
            "rng_algorithm": self.rng_algorithm,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "mean_frame_auc": self.mean_frame_auc,
            "overall": self.overall.to_dict(),
            "per_tag": {tag: m.to_dict() for tag, m in sorted(self.per_tag.items())},
        }


def _tag_metrics(samples) -> TagMetrics:
    return TagMetrics(frame_auc=auc(samples), video_auc=auc(video_pool(samples)),
                      ap=ap(samples), eer=eer(samples))


def compute_report(samples, config_hash: str, seed: int) -> MetricsReport:
    """Per-tag and pooled metrics. Untagged samples count toward overall only."""
    if not samples:
        raise MetricError("no samples to evaluate")
    tags = sorted({s.dataset_tag for s in samples if s.dataset_tag})
    per_tag = {tag: _tag_metrics([s for s in samples if s.dataset_tag == tag]) for tag in tags}
    overall = _tag_metrics(samples)
    mean_frame = (float(np.mean([per_tag[t].frame_auc for t in tags]))
                  if tags else overall.frame_auc)
    return MetricsReport(per_tag=per_tag, overall=overall, mean_frame_auc=mean_frame,
                         config_hash=config_hash, seed=seed)


def frame_auc_by_tag(state: ModelState, eval_sets) -> dict[str, float]:
    """Quick per-epoch snapshot: frame AUC per dataset tag plus the macro mean."""
    by_tag: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    pooled: list[tuple[np.ndarray, np.ndarray]] = []
    for eset in eval_sets:
        labels = eset.labels
        if np.any(labels == int(Label.UNKNOWN)):
            bad = eset.records[int(np.argmax(labels == int(Label.UNKNOWN)))].id
            raise DataError(f"cannot evaluate unlabeled record {bad!r}")
        _, _, scores = predict_batch(state, eset.features, ids=eset.ids)
        tags = np.array([r.dataset_tag for r in eset.records])
        for tag in np.unique(tags):
            rows = tags == tag
            pair = (scores[rows & (labels == 1)], scores[rows & (labels == 0)])
            if tag:
                by_tag.setdefault(str(tag), []).append(pair)
            pooled.append(pair)
    out = {}
    for tag, pairs in sorted(by_tag.items()):
        out[tag] = auc_from_scores(np.concatenate([p[0] for p in pairs]),
                                   np.concatenate([p[1] for p in pairs]))
    if out:
        out["mean"] = float(np.mean([out[t] for t in sorted(out)]))
    else:
        out["mean"] = auc_from_scores(np.concatenate([p[0] for p in pooled]),
                                      np.concatenate([p[1] for p in pooled]))
    return out


def report_json_bytes(report: MetricsReport) -> bytes:
    return (json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n").encode("utf-8")


def report_csv_bytes(report: MetricsReport) -> bytes:
    """CSV summary, one row per tag plus overall; EER is formatted in percent."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "frame_auc", "video_auc", "ap", "eer_pct"])
    rows = [(tag, m) for tag, m in sorted(report.per_tag.items())]
    rows.append(("overall", report.overall))
    for name, m in rows:
        writer.writerow([name, f"{m.frame_auc:.6f}", f"{m.video_auc:.6f}",
                         f"{m.ap:.6f}", f"{m.eer * 100.0:.4f}"])
    return buf.getvalue().encode("utf-8")


def emit_report(report: MetricsReport, out_dir) -> tuple[str, str]:
    """Write metrics.json (full precision) and metrics.csv (summary)."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "metrics.json")
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(json_path, "wb") as fh:
        fh.write(report_json_bytes(report))
    with open(csv_path, "wb") as fh:
        fh.write(report_csv_bytes(report))
    return json_path, csv_path

"""Two-phase training: source pretraining, then joint adaptation.

Phase 1 optimizes the weighted source cross-entropy plus the anchor alignment
term and never touches target data. Each phase-2 epoch rebuilds the feature
bank with the current model, fixes the curriculum threshold, generates pseudo
decisions for the whole target pool, and then walks joint batches where
accepted targets contribute the pseudo composite and source/target pairs feed
the mixup distillation term.

Every stochastic choice flows through one seeded stream, which is saved in
checkpoints, so an interrupted run resumed from its checkpoint finishes
bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import EmbeddingSet, make_batches
from .errors import ConfigError, DataError, NumericError
from .losses import LossBreakdown, StepBatch, grad_all
from .metrics import MetricsReport, compute_report, emit_report, frame_auc_by_tag, score_set
from .model import (PHASE_JOINT, PHASE_PRETRAIN, PARAM_NAMES, ModelState, init_model,
                    load_anchor_file, load_checkpoint, renormalize_anchors, save_checkpoint)
from .numerics import RngStream, adam_step
from .pseudo import (BANK_RULES, THRESHOLD_RULES, CurriculumSchedule, build_bank,
                     generate_pseudo_labels, threshold_at)

logger = logging.getLogger("dpg.trainer")

CHECKPOINT_NAME = "checkpoint.dpgc"
FINAL_MODEL_NAME = "model.dpgc"
TRAIN_LOG_NAME = "train_log.jsonl"


@dataclass
class TrainConfig:
    epochs_phase1: int = 160
    epochs_phase2: int = 160
    batch_source: int = 32
    batch_target: int = 10
    lr: float = 8e-5
    weight_decay: float = 5e-4
    align_weight: float = 0.8          # alignment coefficient during pretraining
    source_cls_weight: float = 0.4     # source CE coefficient during adaptation
    source_align_weight: float = 0.5   # source alignment coefficient during adaptation
    distill_weight: float = 0.1
    bank_threshold: float = 0.9
    curriculum_start: float = 0.85
    curriculum_end: float = 0.70
    tau: float = 0.07
    real_weight: float = 2.0
    seed: int = 42
    use_text_alignment: bool = True    # the TCA component toggle
    use_pseudo_labels: bool = True     # the CPG component toggle
    use_distill: bool = True           # the CD component toggle
    threshold_rule: str = "ge"
    bank_rule: str = "paper"
    anchor_file: str | None = None

    def validate(self) -> None:
        positives = ("epochs_phase1", "batch_source", "lr", "tau", "real_weight",
                     "bank_threshold", "curriculum_start", "curriculum_end")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs_phase2", "batch_target", "weight_decay", "align_weight",
                     "source_cls_weight", "source_align_weight", "distill_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.curriculum_end > self.curriculum_start:
            raise ConfigError("curriculum_end must not exceed curriculum_start")
        if self.threshold_rule not in THRESHOLD_RULES:
            raise ConfigError(f"threshold_rule must be one of {THRESHOLD_RULES}")
        if self.bank_rule not in BANK_RULES:
            raise ConfigError(f"bank_rule must be one of {BANK_RULES}")
        if self.epochs_phase2 > 0 and self.batch_target < 1:
            raise ConfigError("batch_target must be >= 1 when adaptation epochs are configured")

    def resolved_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        canonical = json.dumps(self.resolved_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def term_weights(cfg: TrainConfig, phase: str) -> dict[str, float]:
    """Active loss terms and their coefficients for one phase.

    A term toggled off or weighted zero is absent, so a batch with no active
    terms takes no optimizer step at all.
    """
    w: dict[str, float] = {}
    tca = cfg.use_text_alignment
    if phase == PHASE_PRETRAIN:
        w["cls_source"] = 1.0
        if tca and cfg.align_weight != 0.0:
            w["align_source"] = cfg.align_weight
        return w
    if cfg.source_cls_weight != 0.0:
        w["cls_source"] = cfg.source_cls_weight
    if tca and cfg.source_align_weight != 0.0:
        w["align_source"] = cfg.source_align_weight
    if cfg.use_pseudo_labels:
        w["cls_target"] = 1.0
        if tca:
            w["align_target"] = 1.0
            w["con_target"] = 1.0
    if cfg.use_distill and cfg.distill_weight != 0.0:
        w["distill"] = cfg.distill_weight
    return w


@dataclass
class EpochLog:
    epoch: int
    phase: str
    lambda_lt: float | None = None
    bank_real: int | None = None
    bank_fake: int | None = None
    accepted_real: int | None = None
    accepted_fake: int | None = None
    mean_terms: dict = field(default_factory=dict)
    mean_total: float = 0.0
    counts: dict = field(default_factory=dict)
    eval_auc: dict | None = None
    steps: list[LossBreakdown] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"kind": "epoch", "epoch": self.epoch, "phase": self.phase,
               "lambda_lt": self.lambda_lt, "bank_real": self.bank_real,
               "bank_fake": self.bank_fake, "accepted_real": self.accepted_real,
               "accepted_fake": self.accepted_fake, "mean_terms": self.mean_terms,
               "mean_total": self.mean_total, "counts": self.counts,
               "eval_auc": self.eval_auc}
        return out


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)

    def phase_epochs(self, phase: str) -> list[EpochLog]:
        return [e for e in self.epochs if e.phase == phase]


@dataclass
class TrainResult:
    state: ModelState
    log: TrainLog
    report: MetricsReport | None


class _LogWriter:
    def __init__(self, out_dir):
        self.fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.fh = open(os.path.join(out_dir, TRAIN_LOG_NAME), "w", encoding="utf-8")

    def write(self, obj: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(obj, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def _apply_grads(state: ModelState, grads: dict) -> None:
    for name in PARAM_NAMES:
        updated = adam_step(state.adam[name], getattr(state, name), grads[name])
        state.set_param(name, updated)
    renormalize_anchors(state)


def _check_anchor_norms(state: ModelState, epoch: int) -> None:
    for name in ("anchor_real", "anchor_fake"):
        norm = float(np.linalg.norm(getattr(state, name)))
        if abs(norm - 1.0) > 1e-9:
            raise NumericError(f"{name} norm {norm} drifted from 1 at epoch {epoch}")


def _summarize(epoch_log: EpochLog) -> None:
    steps = epoch_log.steps
    if not steps:
        return
    term_sums: dict[str, float] = {}
    count_sums: dict[str, int] = {}
    total = 0.0
    for bd in steps:
        total += bd.total
        for name, value in bd.to_dict().items():
            if name in ("total", "counts", "weights"):
                continue
            term_sums[name] = term_sums.get(name, 0.0) + value
        for name, c in bd.counts.items():
            count_sums[name] = count_sums.get(name, 0) + c
    n = len(steps)
    epoch_log.mean_terms = {k: v / n for k, v in sorted(term_sums.items())}
    epoch_log.mean_total = total / n
    epoch_log.counts = dict(sorted(count_sums.items()))


def _phase1_epoch(state: ModelState, cfg: TrainConfig, source: EmbeddingSet,
                  stream: RngStream, epoch: int) -> EpochLog:
    weights = term_weights(cfg, PHASE_PRETRAIN)
    batches = make_batches(source, None, stream, cfg.batch_source, 0)
    feats, labels = source.features, source.labels
    log = EpochLog(epoch=epoch, phase=PHASE_PRETRAIN)
    for b in batches:
        sb = StepBatch(x_source=feats[b.source_indices], y_source=labels[b.source_indices])
        bd, grads = grad_all(state, sb, weights, real_weight=cfg.real_weight)
        if grads is not None:
            _apply_grads(state, grads)
        log.steps.append(bd)
    _summarize(log)
    return log


def _phase2_epoch(state: ModelState, cfg: TrainConfig, source: EmbeddingSet,
                  target: EmbeddingSet, schedule: CurriculumSchedule, t: int,
                  stream: RngStream, epoch: int) -> EpochLog:
    log = EpochLog(epoch=epoch, phase=PHASE_JOINT)
    accepted_by_row = np.full(len(target), -1, dtype=np.int64)
    if cfg.use_pseudo_labels:
        bank = build_bank(state, target, cfg.bank_threshold, epoch=epoch)
        lam = threshold_at(schedule, min(t, schedule.total_epochs))
        decisions = generate_pseudo_labels(state, target, bank, lam,
                                           threshold_rule=cfg.threshold_rule,
                                           bank_rule=cfg.bank_rule)
        for row, d in enumerate(decisions):
            if d.accepted:
                accepted_by_row[row] = int(d.clip_label)
        log.lambda_lt = lam
        log.bank_real = len(bank.real_entries)
        log.bank_fake = len(bank.fake_entries)
        log.accepted_real = int(np.count_nonzero(accepted_by_row == 0))
        log.accepted_fake = int(np.count_nonzero(accepted_by_row == 1))
        if log.accepted_real + log.accepted_fake == 0:
            logger.warning("epoch %d: no pseudo labels accepted (threshold %.4f)", epoch, lam)

    weights = term_weights(cfg, PHASE_JOINT)
    batches = make_batches(source, target, stream, cfg.batch_source, cfg.batch_target)
    s_feats, s_labels = source.features, source.labels
    t_feats = target.features
    for b in batches:
        rows = b.target_indices
        row_labels = accepted_by_row[rows]
        acc_pos = np.nonzero(row_labels >= 0)[0]
        sb = StepBatch(x_source=s_feats[b.source_indices],
                       y_source=s_labels[b.source_indices],
                       x_target=t_feats[rows],
                       accepted_pos=acc_pos,
                       y_pseudo=row_labels[acc_pos])
        bd, grads = grad_all(state, sb, weights, real_weight=cfg.real_weight,
                             distill_stream=stream)
        if grads is not None:
            _apply_grads(state, grads)
        log.steps.append(bd)
    _summarize(log)
    return log


def run_phase1(cfg: TrainConfig, source: EmbeddingSet,
               stream: RngStream | None = None,
               state: ModelState | None = None) -> tuple[ModelState, TrainLog]:
    """Source-only pretraining for the configured number of epochs."""
    cfg.validate()
    if len(source) == 0:
        raise DataError("source set is empty")
    if stream is None:
        stream = RngStream.from_seed(cfg.seed, "train")
    if state is None:
        state = _fresh_state(cfg, source.dim)
    log = TrainLog()
    for epoch in range(cfg.epochs_phase1):
        log.epochs.append(_phase1_epoch(state, cfg, source, stream, epoch))
        state.epoch = epoch + 1
        _check_anchor_norms(state, epoch)
    state.phase = PHASE_JOINT if cfg.epochs_phase2 > 0 else PHASE_PRETRAIN
    return state, log


def run_phase2_epoch(state: ModelState, cfg: TrainConfig, source: EmbeddingSet,
                     target: EmbeddingSet, t: int,
                     stream: RngStream) -> tuple[ModelState, EpochLog]:
    """One adaptation epoch at curriculum position t (0-based)."""
    schedule = _schedule(cfg)
    epoch = cfg.epochs_phase1 + t
    elog = _phase2_epoch(state, cfg, source, target, schedule, t, stream, epoch)
    state.epoch = epoch + 1
    return state, elog


def _schedule(cfg: TrainConfig) -> CurriculumSchedule:
    # The last adaptation epoch sits exactly at the curriculum endpoint.
    return CurriculumSchedule(start=cfg.curriculum_start, end=cfg.curriculum_end,
                              total_epochs=max(cfg.epochs_phase2 - 1, 1))


def _fresh_state(cfg: TrainConfig, dim: int) -> ModelState:
    init_stream = RngStream.from_seed(cfg.seed, "model-init")
    anchors = None
    if cfg.anchor_file:
        anchors = load_anchor_file(cfg.anchor_file, dim)
    return init_model(dim, init_stream, tau=cfg.tau, lr=cfg.lr,
                      weight_decay=cfg.weight_decay, anchors=anchors)


def train(cfg: TrainConfig, source: EmbeddingSet, target: EmbeddingSet | None,
          evals: list[EmbeddingSet] | None = None, out_dir=None,
          resume_from=None, stop_after_epoch: int | None = None) -> TrainResult:
    """Full two-phase run with per-epoch evaluation snapshots and checkpoints."""
    cfg.validate()
    evals = evals or []
    if len(source) == 0:
        raise DataError("source set is empty")
    if cfg.epochs_phase2 > 0 and (target is None or len(target) == 0):
        raise DataError("adaptation epochs configured but the target set is empty")
    for eset in evals:
        if eset.dim != source.dim:
            raise DataError("evaluation set dimension does not match the source set")
    if target is not None and len(target) > 0 and target.dim != source.dim:
        raise DataError("target set dimension does not match the source set")

    config_hash = cfg.hash()
    total_epochs = cfg.epochs_phase1 + cfg.epochs_phase2
    if resume_from is not None:
        state, saved_hash, stream = load_checkpoint(resume_from)
        if saved_hash != config_hash:
            raise ConfigError("checkpoint was written with a different configuration")
        start_epoch = state.epoch
    else:
        state = _fresh_state(cfg, source.dim)
        stream = RngStream.from_seed(cfg.seed, "train")
        start_epoch = 0

    schedule = _schedule(cfg) if cfg.epochs_phase2 > 0 else None
    writer = _LogWriter(out_dir)
    writer.write({"kind": "meta", "config_hash": config_hash, "seed": cfg.seed,
                  "rng_algorithm": stream.algorithm, "dim": source.dim,
                  "n_source": len(source), "n_target": 0 if target is None else len(target),
                  "total_epochs": total_epochs})
    log = TrainLog()
    interrupted = False
    try:
        for epoch in range(start_epoch, total_epochs):
            if epoch < cfg.epochs_phase1:
                state.phase = PHASE_PRETRAIN
                elog = _phase1_epoch(state, cfg, source, stream, epoch)
            else:
                state.phase = PHASE_JOINT
                t = epoch - cfg.epochs_phase1
                elog = _phase2_epoch(state, cfg, source, target, schedule, t, stream, epoch)
            state.epoch = epoch + 1
            _check_anchor_norms(state, epoch)
            if evals:
                elog.eval_auc = frame_auc_by_tag(state, evals)
            for i, bd in enumerate(elog.steps):
                line = bd.to_dict()
                line.update({"kind": "step", "epoch": epoch, "step": i})
                writer.write(line)
            writer.write(elog.to_dict())
            log.epochs.append(elog)
            if out_dir is not None:
                save_checkpoint(state, os.path.join(out_dir, CHECKPOINT_NAME),
                                config_hash, stream)
            if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
                interrupted = state.epoch < total_epochs
                break
    finally:
        writer.close()

    report = None
    if not interrupted:
        if evals:
            samples = []
            for eset in evals:
                samples.extend(score_set(state, eset))
            report = compute_report(samples, config_hash, cfg.seed)
        if out_dir is not None:
            save_checkpoint(state, os.path.join(out_dir, FINAL_MODEL_NAME),
                            config_hash, stream)
            if report is not None:
                emit_report(report, out_dir)
    return TrainResult(state=state, log=log, report=report)

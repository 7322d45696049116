"""Deterministic domain-adaptation training engine for embedding vectors."""

__version__ = "0.1.0"

from .data import (DomainKind, EmbeddingRecord, EmbeddingSet, Label, SynthConfig,
                   SynthResult, make_batches, read_embeddings, synth_generate,
                   write_embeddings)
from .errors import (ConfigError, DataError, EngineError, FormatError, MetricError,
                     NumericError, VersionError)
from .metrics import MetricsReport, ScoredSample, ap, auc, compute_report, eer, emit_report, video_pool
from .model import (ModelState, Prediction, adapter_forward, anchor_similarities,
                    head_forward, init_model, load_checkpoint, predict, save_checkpoint)
from .numerics import AdamState, RngStream, adam_step, cosine_sim, softmax
from .pseudo import (CurriculumSchedule, FeatureBank, PseudoDecision, bank_label,
                     build_bank, generate_pseudo_labels, threshold_at)
from .trainer import TrainConfig, TrainLog, TrainResult, run_phase1, run_phase2_epoch, train

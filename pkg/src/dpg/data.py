"""Embedding datasets, the DPGE binary format, and the synthetic benchmark.

DPGE file layout (all integers little-endian):

    magic  "DPGE" (4 bytes)
    u32    format version (currently 1)
    u32    embedding dimension d
    u64    record count
    per record:
        u32  id byte length, then UTF-8 id
        u32  video_id byte length, then UTF-8 video_id
        u8   domain kind (0 source / 1 target_unlabeled / 2 eval)
        u8   dataset tag byte length, then UTF-8 tag
        i8   label (-1 unknown / 0 real / 1 fake)
        d x f32  feature values

Stored features may be pre-normalization; the reader promotes them to 64-bit
and L2-normalizes, so every in-memory feature is unit norm.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .numerics import RngStream

MAGIC = b"DPGE"
FORMAT_VERSION = 1

_MAX_TAG_BYTES = 255


class DomainKind(IntEnum):
    SOURCE = 0
    TARGET_UNLABELED = 1
    EVAL = 2


class Label(IntEnum):
    UNKNOWN = -1
    REAL = 0
    FAKE = 1


@dataclass
class EmbeddingRecord:
    id: str
    video_id: str
    domain_kind: DomainKind
    dataset_tag: str
    label: Label
    feature: np.ndarray  # float64, unit norm after load-time preprocessing


class EmbeddingSet:
    """An ordered, immutable-by-convention collection of embedding records."""

    def __init__(self, dim: int, records: list[EmbeddingRecord], provenance: str = ""):
        self.dim = int(dim)
        self.records = list(records)
        self.provenance = provenance
        self._features: np.ndarray | None = None
        self._labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def features(self) -> np.ndarray:
        """All features stacked as an (n, d) float64 matrix (cached)."""
        if self._features is None:
            if self.records:
                self._features = np.stack([r.feature for r in self.records])
            else:
                self._features = np.zeros((0, self.dim), dtype=np.float64)
        return self._features

    @property
    def labels(self) -> np.ndarray:
        if self._labels is None:
            self._labels = np.array([int(r.label) for r in self.records], dtype=np.int64)
        return self._labels

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def validate(self) -> None:
        """Check the set invariants; raises DataError on the first violation."""
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DataError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.feature.shape != (self.dim,):
                raise DataError(f"record {rec.id!r} has dim {rec.feature.shape}, expected ({self.dim},)")
            if not np.all(np.isfinite(rec.feature)):
                raise DataError(f"record {rec.id!r} has non-finite feature values")
            if rec.domain_kind == DomainKind.SOURCE and rec.label == Label.UNKNOWN:
                raise DataError(f"source record {rec.id!r} must carry a label")


def write_embeddings(eset: EmbeddingSet, path) -> None:
    """Write a set in DPGE format. Refuses sets that violate invariants."""
    eset.validate()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, eset.dim),
              struct.pack("<Q", len(eset.records))]
    for rec in eset.records:
        rid = rec.id.encode("utf-8")
        vid = rec.video_id.encode("utf-8")
        tag = rec.dataset_tag.encode("utf-8")
        if len(tag) > _MAX_TAG_BYTES:
            raise DataError(f"dataset tag of record {rec.id!r} exceeds {_MAX_TAG_BYTES} bytes")
        chunks.append(struct.pack("<I", len(rid)))
        chunks.append(rid)
        chunks.append(struct.pack("<I", len(vid)))
        chunks.append(vid)
        chunks.append(struct.pack("<BB", int(rec.domain_kind), len(tag)))
        chunks.append(tag)
        chunks.append(struct.pack("<b", int(rec.label)))
        chunks.append(np.asarray(rec.feature, dtype="<f4").tobytes())
    data = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_embeddings(path) -> EmbeddingSet:
    """Read a DPGE file, promote features to float64, and L2-normalize them."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a DPGE file")
    (version, dim) = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported DPGE version {version}")
    if dim == 0:
        raise FormatError(f"{path}: dimension must be positive")
    (count,) = r.unpack("<Q")
    records: list[EmbeddingRecord] = []
    seen: set[str] = set()
    for _ in range(count):
        (id_len,) = r.unpack("<I")
        rid = r.take(id_len).decode("utf-8")
        (vid_len,) = r.unpack("<I")
        vid = r.take(vid_len).decode("utf-8")
        (kind, tag_len) = r.unpack("<BB")
        if kind not in (0, 1, 2):
            raise FormatError(f"{path}: record {rid!r} has invalid domain kind {kind}")
        tag = r.take(tag_len).decode("utf-8")
        (label,) = r.unpack("<b")
        if label not in (-1, 0, 1):
            raise FormatError(f"{path}: record {rid!r} has invalid label {label}")
        raw = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(raw)):
            raise DataError(f"{path}: record {rid!r} has non-finite feature values")
        norm = float(np.linalg.norm(raw))
        if norm == 0.0:
            raise DataError(f"{path}: record {rid!r} has a zero-norm feature")
        if rid in seen:
            raise DataError(f"{path}: duplicate record id {rid!r}")
        seen.add(rid)
        records.append(EmbeddingRecord(
            id=rid, video_id=vid, domain_kind=DomainKind(kind),
            dataset_tag=tag, label=Label(label), feature=raw / norm))
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after last record")
    eset = EmbeddingSet(dim=dim, records=records, provenance=str(path))
    eset.validate()
    return eset


@dataclass
class SynthConfig:
    """Parameters of the synthetic domain-shift benchmark.

    Defaults are the desk-scale benchmark: a labeled source pool plus three
    unlabeled target domains whose cluster means are rotated away from the
    source means, with a fraction of boundary-adjacent hard fakes.
    """

    dim: int = 64
    n_source_per_class: int = 512
    n_target_per_class: int = 256
    n_eval_per_class: int = 512
    n_domains: int = 3
    class_separation: float = 1.2
    domain_shift: tuple[float, ...] = (2.2, 2.6, 3.0)
    noise: float = 0.22
    hard_fake_fraction: float = 0.2
    seed: int = 42

    def validate(self) -> None:
        if self.dim < 2 * self.n_domains + 2:
            raise ConfigError("dim must be at least 2 * n_domains + 2 for orthogonal shifts")
        for name in ("n_source_per_class", "n_target_per_class", "n_eval_per_class", "n_domains"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.class_separation <= 2.0:
            raise ConfigError("class_separation must lie in (0, 2] (chord of unit directions)")
        if self.noise <= 0.0:
            raise ConfigError("noise must be positive")
        if not 0.0 <= self.hard_fake_fraction < 1.0:
            raise ConfigError("hard_fake_fraction must lie in [0, 1)")
        shifts = self.shifts()
        if len(shifts) != self.n_domains:
            raise ConfigError("domain_shift must provide one value per domain")
        if any(s < 0.0 for s in shifts):
            raise ConfigError("domain_shift values must be >= 0")

    def shifts(self) -> tuple[float, ...]:
        if isinstance(self.domain_shift, (int, float)):
            return (float(self.domain_shift),) * self.n_domains
        return tuple(float(s) for s in self.domain_shift)


@dataclass
class SynthResult:
    source: EmbeddingSet
    targets: list[EmbeddingSet]
    evals: list[EmbeddingSet]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orthonormal_to(stream: RngStream, dim: int, basis: list[np.ndarray]) -> np.ndarray:
    """Seeded unit vector orthogonal to every vector in ``basis``."""
    v = stream.gaussians(dim)
    for b in basis:
        v = v - np.dot(v, b) * b
    norm = float(np.linalg.norm(v))
    if norm < 1e-9:  # astronomically unlikely for gaussian draws
        raise DataError("degenerate direction draw")
    return v / norm


def _sample_cluster(stream: RngStream, mean: np.ndarray, sigma: float, count: int) -> np.ndarray:
    out = np.empty((count, mean.size), dtype=np.float64)
    for i in range(count):
        x = mean + sigma * stream.gaussians(mean.size)
        norm = float(np.linalg.norm(x))
        if norm == 0.0:  # measure-zero event
            x = mean.copy()
            norm = float(np.linalg.norm(x))
        out[i] = x / norm
    return out


def _domain_records(stream: RngStream, prefix: str, tag: str, kind: DomainKind,
                    mean_real: np.ndarray, mean_fake: np.ndarray,
                    sigma: float, per_class: int, hard_fraction: float,
                    labeled: bool) -> list[EmbeddingRecord]:
    """One domain's records: reals, then plain fakes, then hard fakes.

    Hard fakes are sampled around the midpoint of the two class means, which
    puts them next to the decision boundary.
    """
    n_hard = int(round(hard_fraction * per_class))
    n_plain = per_class - n_hard
    midpoint = (mean_real + mean_fake) / 2.0
    blocks = [
        ("real", Label.REAL, _sample_cluster(stream, mean_real, sigma, per_class)),
        ("fake", Label.FAKE, _sample_cluster(stream, mean_fake, sigma, n_plain)),
        ("hardfake", Label.FAKE, _sample_cluster(stream, midpoint, sigma, n_hard)),
    ]
    records = []
    for block_name, label, feats in blocks:
        for i in range(feats.shape[0]):
            rid = f"{prefix}-{block_name}-{i:05d}"
            records.append(EmbeddingRecord(
                id=rid, video_id=rid, domain_kind=kind, dataset_tag=tag,
                label=label if labeled else Label.UNKNOWN, feature=feats[i]))
    return records


@dataclass
class DomainMeans:
    """Cluster means of the benchmark: source pair plus one pair per domain."""

    source_real: np.ndarray
    source_fake: np.ndarray
    target_real: list[np.ndarray]
    target_fake: list[np.ndarray]


def domain_means(cfg: SynthConfig) -> DomainMeans:
    """Deterministic cluster means for a benchmark configuration.

    The source means are two unit directions whose chord is exactly
    ``class_separation``. Target domain k perturbs each class mean by
    ``domain_shift[k]`` along its own direction orthogonal to the source class
    geometry (and to every other perturbation), then renormalizes; a zero
    shift reproduces the source means exactly. Per-class directions rotate the
    class axis per domain, the way an unseen generator leaves artifacts in
    directions the labeled pool never showed.
    """
    cfg.validate()
    shifts = cfg.shifts()
    directions = RngStream.from_seed(cfg.seed, "synth-directions")
    mean_real = _unit(directions.gaussians(cfg.dim))
    chord = _orthonormal_to(directions, cfg.dim, [mean_real])
    theta = 2.0 * np.arcsin(cfg.class_separation / 2.0)
    mean_fake = np.cos(theta) * mean_real + np.sin(theta) * chord
    basis = [mean_real, chord]
    target_real, target_fake = [], []
    for k in range(cfg.n_domains):
        v_real = _orthonormal_to(directions, cfg.dim, basis)
        basis.append(v_real)
        v_fake = _orthonormal_to(directions, cfg.dim, basis)
        basis.append(v_fake)
        delta = shifts[k]
        if delta == 0.0:
            target_real.append(mean_real)
            target_fake.append(mean_fake)
        else:
            target_real.append(_unit(mean_real + delta * v_real))
            target_fake.append(_unit(mean_fake + delta * v_fake))
    return DomainMeans(source_real=mean_real, source_fake=mean_fake,
                       target_real=target_real, target_fake=target_fake)


def synth_generate(cfg: SynthConfig) -> SynthResult:
    """Generate the synthetic benchmark: source, unlabeled targets, eval splits.

    Cluster means come from :func:`domain_means`. Eval splits are fresh
    labeled draws from each target domain's distribution, so the eval data
    stays fixed while the unlabeled pool size varies.
    """
    cfg.validate()
    means = domain_means(cfg)

    source_stream = RngStream.from_seed(cfg.seed, "synth-source")
    source = EmbeddingSet(cfg.dim, _domain_records(
        source_stream, "src", "source", DomainKind.SOURCE,
        means.source_real, means.source_fake, cfg.noise, cfg.n_source_per_class,
        cfg.hard_fake_fraction, labeled=True),
        provenance=f"synthetic source seed={cfg.seed}")

    targets: list[EmbeddingSet] = []
    evals: list[EmbeddingSet] = []
    for k in range(cfg.n_domains):
        m_r = means.target_real[k]
        m_f = means.target_fake[k]
        tag = f"domain{k}"
        t_stream = RngStream.from_seed(cfg.seed, f"synth-target-{k}")
        targets.append(EmbeddingSet(cfg.dim, _domain_records(
            t_stream, f"tgt{k}", tag, DomainKind.TARGET_UNLABELED,
            m_r, m_f, cfg.noise, cfg.n_target_per_class,
            cfg.hard_fake_fraction, labeled=False),
            provenance=f"synthetic target {tag} seed={cfg.seed}"))
        e_stream = RngStream.from_seed(cfg.seed, f"synth-eval-{k}")
        evals.append(EmbeddingSet(cfg.dim, _domain_records(
            e_stream, f"ev{k}", tag, DomainKind.EVAL,
            m_r, m_f, cfg.noise, cfg.n_eval_per_class,
            cfg.hard_fake_fraction, labeled=True),
            provenance=f"synthetic eval {tag} seed={cfg.seed}"))
    return SynthResult(source=source, targets=targets, evals=evals)


def concat_sets(sets: list[EmbeddingSet]) -> EmbeddingSet:
    """Pool several sets (same dim) into one, preserving order."""
    if not sets:
        raise DataError("cannot concatenate zero sets")
    dim = sets[0].dim
    records = []
    for s in sets:
        if s.dim != dim:
            raise DataError(f"dimension mismatch while pooling sets: {s.dim} != {dim}")
        records.extend(s.records)
    pooled = EmbeddingSet(dim, records, provenance="+".join(s.provenance for s in sets))
    pooled.validate()
    return pooled


@dataclass
class JointBatch:
    source_indices: np.ndarray
    target_indices: np.ndarray  # empty in phase 1


def make_batches(source: EmbeddingSet, target: EmbeddingSet | None,
                 stream: RngStream, batch_source: int, batch_target: int) -> list[JointBatch]:
    """One epoch of joint batches.

    Source records are shuffled (seeded) and each appears exactly once; target
    records are shuffled once and cycle with wraparound when exhausted.
    """
    if batch_source < 1:
        raise ConfigError("batch_source must be >= 1")
    if batch_target < 0:
        raise ConfigError("batch_target must be >= 0")
    n_s = len(source) if source is not None else 0
    if n_s == 0:
        raise DataError("source set is empty")
    perm_s = stream.permutation(n_s)
    empty = np.array([], dtype=np.int64)
    if batch_target > 0:
        if target is None or len(target) == 0:
            raise DataError("target set is empty but batch_target > 0")
        perm_t = stream.permutation(len(target))
    batches = []
    cursor = 0
    for start in range(0, n_s, batch_source):
        src = perm_s[start:start + batch_source]
        if batch_target > 0:
            picks = [perm_t[(cursor + j) % len(perm_t)] for j in range(batch_target)]
            cursor = (cursor + batch_target) % len(perm_t)
            tgt = np.array(picks, dtype=np.int64)
        else:
            tgt = empty
        batches.append(JointBatch(source_indices=src, target_indices=tgt))
    return batches

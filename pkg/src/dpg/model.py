"""Trainable state: affine adapter, linear head, two concept anchors.

The adapter is a single affine map initialized to the identity; its output is
L2-normalized and that normalized vector is what every loss, bank, and metric
consumes. The two anchors are learnable unit vectors standing for the "real"
and "fake" concepts. Checkpoints use the DPGC binary format:

    magic "DPGC" | u32 schema version | u64 payload length | payload

with a fixed-order canonical payload, so a load reproduces the saved state
bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import Label
from .errors import DataError, FormatError, NumericError, VersionError
from .numerics import AdamState, RngStream, softmax

CHECKPOINT_MAGIC = b"DPGC"
CHECKPOINT_VERSION = 1

PHASE_PRETRAIN = "pretrain"
PHASE_JOINT = "joint"

#: Canonical parameter order; everything that iterates parameters uses it.
PARAM_NAMES = ("adapter_w", "adapter_b", "head_w", "head_b", "anchor_real", "anchor_fake")


@dataclass
class ModelState:
    dim: int
    adapter_w: np.ndarray   # (d, d)
    adapter_b: np.ndarray   # (d,)
    head_w: np.ndarray      # (2, d)
    head_b: np.ndarray      # (2,)
    anchor_real: np.ndarray # (d,), kept unit norm
    anchor_fake: np.ndarray # (d,), kept unit norm
    tau: float
    adam: dict[str, AdamState]
    phase: str = PHASE_PRETRAIN
    epoch: int = 0

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def set_param(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)


def init_model(dim: int, stream: RngStream, tau: float = 0.07,
               lr: float = 8e-5, weight_decay: float = 5e-4,
               anchors: tuple[np.ndarray, np.ndarray] | None = None) -> ModelState:
    """Fresh state: identity adapter, zero head, seeded orthonormal anchors.

    The anchor group runs with weight decay 0: anchors are renormalized after
    every step, so decay would only inject rounding noise.
    """
    if anchors is None:
        a_r = _stable_unit(stream.gaussians(dim))
        raw = stream.gaussians(dim)
        raw = raw - np.dot(raw, a_r) * a_r
        a_f = _stable_unit(raw)
    else:
        a_r = _stable_unit(np.asarray(anchors[0], dtype=np.float64))
        a_f = _stable_unit(np.asarray(anchors[1], dtype=np.float64))
        if a_r.shape != (dim,) or a_f.shape != (dim,):
            raise DataError("anchor initialization vectors do not match the model dimension")
    params = {
        "adapter_w": np.eye(dim, dtype=np.float64),
        "adapter_b": np.zeros(dim, dtype=np.float64),
        "head_w": np.zeros((2, dim), dtype=np.float64),
        "head_b": np.zeros(2, dtype=np.float64),
        "anchor_real": a_r,
        "anchor_fake": a_f,
    }
    adam = {}
    for name, p in params.items():
        wd = 0.0 if name.startswith("anchor") else weight_decay
        adam[name] = AdamState.zeros_like(p, lr=lr, weight_decay=wd)
    return ModelState(dim=dim, tau=float(tau), adam=adam, **params)


def _stable_unit(v: np.ndarray) -> np.ndarray:
    """Normalize, skipping the division when the norm is already 1 to 1e-12.

    The skip makes renormalization a bitwise no-op for parameters that did not
    change, which keeps zero-gradient steps exactly identity.
    """
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise NumericError("cannot normalize a zero vector")
    if abs(norm - 1.0) < 1e-12:
        return v
    return v / norm


def renormalize_anchors(state: ModelState) -> None:
    state.anchor_real = _stable_unit(state.anchor_real)
    state.anchor_fake = _stable_unit(state.anchor_fake)


def adapter_forward_batch(state: ModelState, x: np.ndarray, ids=None) -> np.ndarray:
    """Normalized adapter outputs for an (n, d) batch."""
    u = x @ state.adapter_w.T + state.adapter_b
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0.0):
        idx = int(np.argmax(norms == 0.0))
        name = ids[idx] if ids is not None else f"row {idx}"
        raise NumericError(f"adapter produced a zero vector before normalization for {name}")
    return u / norms[:, None]


def adapter_forward(state: ModelState, feature: np.ndarray) -> np.ndarray:
    return adapter_forward_batch(state, np.asarray(feature, dtype=np.float64)[None, :])[0]


def head_forward(state: ModelState, z: np.ndarray) -> tuple[float, float]:
    """(p_real, p_fake) from the linear head."""
    logits = state.head_w @ z + state.head_b
    p = softmax(logits)
    return float(p[0]), float(p[1])


def anchor_similarities(state: ModelState, z: np.ndarray) -> tuple[float, float]:
    """Cosine similarity of z to the real and fake anchors."""
    a_r = _stable_unit(state.anchor_real)
    a_f = _stable_unit(state.anchor_fake)
    zn = float(np.linalg.norm(z))
    if zn == 0.0:
        raise NumericError("cannot compare a zero vector to the anchors")
    return float(z @ a_r / zn), float(z @ a_f / zn)


@dataclass
class Prediction:
    label: Label
    confidence: float
    fake_score: float


def predict_batch(state: ModelState, x: np.ndarray, ids=None):
    """Vectorized prediction: (labels, confidences, fake_scores) arrays.

    An exact probability tie is resolved as fake.
    """
    z = adapter_forward_batch(state, x, ids=ids)
    logits = z @ state.head_w.T + state.head_b
    probs = softmax(logits)
    labels = np.where(probs[:, 1] >= probs[:, 0], int(Label.FAKE), int(Label.REAL))
    return labels, probs.max(axis=1), probs[:, 1]


def predict(state: ModelState, feature: np.ndarray) -> Prediction:
    labels, conf, fake = predict_batch(state, np.asarray(feature, dtype=np.float64)[None, :])
    return Prediction(label=Label(int(labels[0])), confidence=float(conf[0]),
                      fake_score=float(fake[0]))


def load_anchor_file(path, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Read an anchor-initialization DPGE file.

    The file must hold exactly two records tagged ``anchor_real`` and
    ``anchor_fake`` with the model's dimension.
    """
    from .data import read_embeddings

    eset = read_embeddings(path)
    if eset.dim != dim:
        raise DataError(f"anchor file dimension {eset.dim} does not match model dimension {dim}")
    by_tag = {rec.dataset_tag: rec for rec in eset.records}
    if len(eset.records) != 2 or set(by_tag) != {"anchor_real", "anchor_fake"}:
        raise DataError("anchor file must hold exactly two records tagged anchor_real/anchor_fake")
    return by_tag["anchor_real"].feature, by_tag["anchor_fake"].feature


# --- checkpoint serialization -------------------------------------------------

def _pack_array(chunks: list[bytes], arr: np.ndarray) -> None:
    chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _pack_str(chunks: list[bytes], text: str) -> None:
    raw = text.encode("utf-8")
    chunks.append(struct.pack("<I", len(raw)))
    chunks.append(raw)


def save_checkpoint(state: ModelState, path, config_hash: str, rng: RngStream) -> None:
    """Atomically write state + optimizer moments + RNG state."""
    chunks: list[bytes] = []
    chunks.append(struct.pack("<I", state.dim))
    chunks.append(struct.pack("<d", state.tau))
    chunks.append(struct.pack("<B", 0 if state.phase == PHASE_PRETRAIN else 1))
    chunks.append(struct.pack("<Q", state.epoch))
    _pack_str(chunks, config_hash)
    _pack_str(chunks, rng.algorithm)
    chunks.append(struct.pack("<4Q", *rng.state()))
    chunks.append(struct.pack("<Q", rng.draws))
    for name in PARAM_NAMES:
        _pack_array(chunks, getattr(state, name))
    for name in PARAM_NAMES:
        adam = state.adam[name]
        _pack_array(chunks, adam.m)
        _pack_array(chunks, adam.v)
        chunks.append(struct.pack("<Q", adam.t))
        chunks.append(struct.pack("<5d", adam.lr, adam.weight_decay,
                                  adam.beta1, adam.beta2, adam.eps))
    payload = b"".join(chunks)
    blob = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)) + payload
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    import os
    os.replace(tmp, path)


_PARAM_SHAPES = {
    "adapter_w": lambda d: (d, d),
    "adapter_b": lambda d: (d,),
    "head_w": lambda d: (2, d),
    "head_b": lambda d: (2,),
    "anchor_real": lambda d: (d,),
    "anchor_fake": lambda d: (d,),
}


def load_checkpoint(path) -> tuple[ModelState, str, RngStream]:
    """Read a DPGC checkpoint; returns (state, config_hash, rng stream)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a DPGC checkpoint")
    (version, payload_len) = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    payload = data[16:]
    if len(payload) != payload_len:
        raise FormatError(f"{path}: payload length mismatch")
    r = _Cursor(payload, path)
    dim = r.unpack("<I")[0]
    tau = r.unpack("<d")[0]
    phase = PHASE_PRETRAIN if r.unpack("<B")[0] == 0 else PHASE_JOINT
    epoch = r.unpack("<Q")[0]
    config_hash = r.take_str()
    algorithm = r.take_str()
    if algorithm != RngStream.algorithm:
        raise VersionError(f"{path}: checkpoint uses RNG {algorithm!r}, engine uses {RngStream.algorithm!r}")
    rng_state = r.unpack("<4Q")
    draws = r.unpack("<Q")[0]
    params = {}
    for name in PARAM_NAMES:
        shape = _PARAM_SHAPES[name](dim)
        params[name] = r.take_array(shape)
    adam = {}
    for name in PARAM_NAMES:
        shape = _PARAM_SHAPES[name](dim)
        m = r.take_array(shape)
        v = r.take_array(shape)
        t = r.unpack("<Q")[0]
        lr, wd, b1, b2, eps = r.unpack("<5d")
        adam[name] = AdamState(m=m, v=v, t=t, lr=lr, weight_decay=wd,
                               beta1=b1, beta2=b2, eps=eps)
    if r.pos != len(payload):
        raise FormatError(f"{path}: trailing bytes in checkpoint payload")
    state = ModelState(dim=dim, tau=tau, adam=adam, phase=phase, epoch=epoch, **params)
    return state, config_hash, RngStream(rng_state, draws)


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def take_str(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def take_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        raw = np.frombuffer(self.take(8 * count), dtype="<f8")
        return raw.reshape(shape).copy()

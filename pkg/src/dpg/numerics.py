"""Deterministic vector math, seeded randomness, and the Adam optimizer.

Everything here computes in 64-bit floats. All stochastic choices made by the
engine flow through :class:`RngStream`, so a run is fully replayable from its
seed on any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1

#: Name of the generator, recorded in checkpoints and metric reports.
RNG_ALGORITHM = "xoshiro256++"

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns (output, next state)."""
    state = (state + _SPLITMIX_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)), state


def _fnv1a64(text: str) -> int:
    acc = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        acc = ((acc ^ byte) * 0x100000001B3) & MASK64
    return acc


def _rotl64(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class RngStream:
    """xoshiro256++ generator with an explicit draw counter.

    The 256-bit state is filled by iterating SplitMix64 over
    ``seed ^ fnv1a64(tag)``, so independent streams are derived by tag rather
    than by splitting an existing stream. Draw accounting:

    * ``next_u64`` / ``uniform`` / ``next_below``: one 64-bit draw each
      (``next_below`` may reject and redraw; rejections are counted).
    * ``gaussian``: exactly two 64-bit draws (Box-Muller; the second output
      of the pair is discarded so the cost per call is fixed).
    """

    __slots__ = ("_s", "draws")

    algorithm = RNG_ALGORITHM

    def __init__(self, state: tuple[int, int, int, int], draws: int = 0):
        state = tuple(int(w) & MASK64 for w in state)
        if len(state) != 4 or not any(state):
            raise ValueError("xoshiro256++ state must be four words, not all zero")
        self._s = list(state)
        self.draws = int(draws)

    @classmethod
    def from_seed(cls, seed: int, tag: str = "") -> "RngStream":
        base = (int(seed) ^ _fnv1a64(tag)) & MASK64
        words = []
        for _ in range(4):
            out, base = _splitmix64(base)
            words.append(out)
        if not any(words):  # unreachable for SplitMix64, kept as a guard
            words[0] = 1
        return cls(tuple(words))

    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def clone(self) -> "RngStream":
        return RngStream(tuple(self._s), self.draws)

    def next_u64(self) -> int:
        s = self._s
        x = (s[0] + s[3]) & MASK64
        result = (((x << 23) | (x >> 41)) + s[0]) & MASK64  # rotl(s0 + s3, 23) + s0
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        x = s[3]
        s[3] = ((x << 45) | (x >> 19)) & MASK64  # rotl(s3, 45)
        self.draws += 1
        return result

    def uniform(self) -> float:
        """Uniform draw in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * 2.0**-53

    def gaussian(self) -> float:
        """Standard normal deviate via Box-Muller; consumes two draws."""
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53  # in (0, 1], log stays finite
        u2 = (self.next_u64() >> 11) * 2.0**-53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def gaussians(self, n: int) -> np.ndarray:
        return np.array([self.gaussian() for _ in range(n)], dtype=np.float64)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n); masked rejection avoids modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        mask = (1 << (n - 1).bit_length()) - 1
        while True:
            v = self.next_u64() & mask
            if v < n:
                return v

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]
        return np.array(items, dtype=np.int64)


def softmax(logits) -> np.ndarray:
    """Probabilities from logits along the last axis; shift-invariant."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax requires nonempty logits")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax requires finite logits")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors; rejects zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


@dataclass
class AdamState:
    """Adam moments plus the hyperparameters of one parameter group."""

    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, lr: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param, dtype=np.float64),
                   v=np.zeros_like(param, dtype=np.float64),
                   t=0, lr=lr, weight_decay=weight_decay,
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update followed by decoupled weight decay.

    Returns the updated parameters; ``state`` is mutated in place.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    out = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay != 0.0:
        out = out - state.lr * state.weight_decay * out
    return out

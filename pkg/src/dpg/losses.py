"""Loss terms and their analytic gradients.

Every gradient here is hand-derived and checked against central finite
differences by the test suite. Batched forward/backward passes share one code
path (:func:`grad_all`); the per-sample functions expose the same math on
single inputs.

Gradient notes (unit-norm conventions):

* adapter output ``z = u / |u|`` with ``u = W x + b``; the backward pass is
  ``du = (dz - (dz . z) z) / |u|``.
* anchors are parameterized as free vectors and normalized in the forward
  pass, so their gradients are projected onto the tangent of the unit sphere.
* the distillation target ``z_d`` is a frozen value (stop-gradient); only the
  source feature receives a gradient from that term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelState
from .numerics import RngStream

TERM_NAMES = ("cls_source", "align_source", "cls_target",
              "align_target", "con_target", "distill")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass
class LossBreakdown:
    """Per-term values for one step; ``None`` marks a term that is inactive.

    ``total`` is the weighted sum of the active terms and must reconstruct
    from ``values`` and ``weights`` to 1e-12.
    """

    cls_source: float | None = None
    align_source: float | None = None
    cls_target: float | None = None
    align_target: float | None = None
    con_target: float | None = None
    distill: float | None = None
    total: float = 0.0
    counts: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in TERM_NAMES if getattr(self, name) is not None}
        out["total"] = self.total
        out["counts"] = dict(self.counts)
        out["weights"] = dict(self.weights)
        return out


def cls_loss(probs, label: int, weight: float) -> tuple[float, np.ndarray]:
    """Weighted cross-entropy of one (p_real, p_fake) pair.

    Returns the loss and its gradient with respect to the two logits.
    """
    p = np.asarray(probs, dtype=np.float64)
    label = int(label)
    loss = -weight * float(np.log(p[label]))
    onehot = np.zeros(2)
    onehot[label] = 1.0
    return loss, weight * (p - onehot)


def align_loss(s_correct: float, s_incorrect: float, tau: float) -> tuple[float, tuple[float, float]]:
    """Two-way anchor alignment loss with log-sum-exp stabilization."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = (s_incorrect - s_correct) / tau
    loss = float(np.logaddexp(0.0, x))
    g = float(_sigmoid(x)) / tau
    return loss, (-g, g)


def contrast_loss(s_correct: float, s_opposite: float) -> tuple[float, tuple[float, float]]:
    """Linear separation term: low similarity to the wrong anchor, high to the right one."""
    return float(s_opposite - s_correct), (-1.0, 1.0)


@dataclass
class DistillPlan:
    """Frozen mixup pairing: target row, interpolation weight, mixed target."""

    target_pos: np.ndarray  # (Bs,) indices into the canonicalized target batch
    alpha: np.ndarray       # (Bs,)
    z_d: np.ndarray         # (Bs, d), treated as constants


def make_distill_plan(z_source: np.ndarray, z_target: np.ndarray,
                      stream: RngStream) -> DistillPlan | None:
    """Pair each source feature with a random target feature and mix them.

    Target rows are ordered canonically (lexicographic) before drawing, so the
    pairing depends only on the stream state, not on caller-side row order.
    Returns None when the target batch is empty.
    """
    n_s = z_source.shape[0]
    if z_target.shape[0] == 0 or n_s == 0:
        return None
    order = np.lexsort(z_target.T[::-1])
    canonical = z_target[order]
    picks = np.empty(n_s, dtype=np.int64)
    alphas = np.empty(n_s, dtype=np.float64)
    for i in range(n_s):
        picks[i] = stream.next_below(canonical.shape[0])
        alphas[i] = stream.uniform()
    # alpha * z_s + (1 - alpha) * z_t, written so coincident pairs mix exactly
    z_t = canonical[picks]
    z_d = z_t + alphas[:, None] * (z_source - z_t)
    return DistillPlan(target_pos=picks, alpha=alphas, z_d=z_d)


def distill_from_plan(z_source: np.ndarray, plan: DistillPlan) -> tuple[float, np.ndarray]:
    """Mean squared distance to the frozen mixed targets, gradient on z_source only."""
    diff = z_source - plan.z_d
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grad = 2.0 * diff / z_source.shape[0]
    return loss, grad


def distill_loss(z_source: np.ndarray, z_target: np.ndarray,
                 stream: RngStream) -> tuple[float, np.ndarray]:
    """Latent mixup distillation over one batch pairing.

    An empty target batch skips the term: loss 0 with a zero gradient.
    """
    z_source = np.asarray(z_source, dtype=np.float64)
    plan = make_distill_plan(z_source, np.asarray(z_target, dtype=np.float64), stream)
    if plan is None:
        return 0.0, np.zeros_like(z_source)
    return distill_from_plan(z_source, plan)


@dataclass
class StepBatch:
    """Inputs of one optimization step.

    ``x_target`` is the full unlabeled slice (used by distillation);
    ``accepted_pos`` selects the rows that carry accepted pseudo labels.
    """

    x_source: np.ndarray
    y_source: np.ndarray
    x_target: np.ndarray | None = None
    accepted_pos: np.ndarray | None = None
    y_pseudo: np.ndarray | None = None


class _ForwardCache:
    """One batch through adapter, head, and anchor similarities."""

    def __init__(self, state: ModelState, x: np.ndarray):
        self.x = x
        self.u = x @ state.adapter_w.T + state.adapter_b
        self.norms = np.linalg.norm(self.u, axis=1)
        if np.any(self.norms == 0.0):
            from .errors import NumericError
            raise NumericError("adapter produced a zero vector before normalization")
        self.z = self.u / self.norms[:, None]
        self.logits = self.z @ state.head_w.T + state.head_b
        lse = np.logaddexp(self.logits[:, 0], self.logits[:, 1])
        self.ce_all = lse[:, None] - self.logits  # cross-entropy if that class were true
        self.probs = np.exp(self.logits - lse[:, None])
        a_r = state.anchor_real / np.linalg.norm(state.anchor_real)
        a_f = state.anchor_fake / np.linalg.norm(state.anchor_fake)
        self.a_hat = np.stack([a_r, a_f])  # (2, d)
        self.sims = self.z @ self.a_hat.T  # (B, 2): columns follow label order (real, fake)
        self.d_logits = np.zeros_like(self.logits)
        self.d_sims = np.zeros_like(self.sims)
        self.d_z = np.zeros_like(self.z)


def _backward(state: ModelState, cache: _ForwardCache, grads: dict) -> None:
    """Accumulate parameter gradients from one cache's seeded derivatives."""
    d_z = cache.d_z
    if np.any(cache.d_logits):
        grads["head_w"] += cache.d_logits.T @ cache.z
        grads["head_b"] += cache.d_logits.sum(axis=0)
        d_z = d_z + cache.d_logits @ state.head_w
    if np.any(cache.d_sims):
        d_z = d_z + cache.d_sims @ cache.a_hat
        d_a_hat = cache.d_sims.T @ cache.z  # (2, d)
        for row, (name, raw) in enumerate((("anchor_real", state.anchor_real),
                                           ("anchor_fake", state.anchor_fake))):
            a_hat = cache.a_hat[row]
            da = d_a_hat[row]
            # gradient through a_hat = a / |a|: project onto the sphere tangent
            grads[name] += (da - np.dot(da, a_hat) * a_hat) / np.linalg.norm(raw)
    if np.any(d_z):
        inner = np.sum(d_z * cache.z, axis=1, keepdims=True)
        d_u = (d_z - inner * cache.z) / cache.norms[:, None]
        grads["adapter_w"] += d_u.T @ cache.x
        grads["adapter_b"] += d_u.sum(axis=0)


def _ce_term(cache: _ForwardCache, labels: np.ndarray, sample_weights: np.ndarray,
             coef: float) -> float:
    """Weighted-mean cross-entropy; seeds d_logits scaled by coef."""
    n = labels.shape[0]
    ce = cache.ce_all[np.arange(n), labels]
    value = float(np.mean(sample_weights * ce))
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), labels] = 1.0
    cache.d_logits += (coef / n) * sample_weights[:, None] * (cache.probs - onehot)
    return value


def _align_term(cache: _ForwardCache, labels: np.ndarray, tau: float, coef: float) -> float:
    n = labels.shape[0]
    s_cor = cache.sims[np.arange(n), labels]
    s_inc = cache.sims[np.arange(n), 1 - labels]
    x = (s_inc - s_cor) / tau
    value = float(np.mean(np.logaddexp(0.0, x)))
    g = _sigmoid(x) / tau
    cache.d_sims[np.arange(n), labels] += (coef / n) * (-g)
    cache.d_sims[np.arange(n), 1 - labels] += (coef / n) * g
    return value


def _contrast_term(cache: _ForwardCache, labels: np.ndarray, coef: float) -> float:
    n = labels.shape[0]
    s_cor = cache.sims[np.arange(n), labels]
    s_opp = cache.sims[np.arange(n), 1 - labels]
    value = float(np.mean(s_opp - s_cor))
    cache.d_sims[np.arange(n), labels] += -(coef / n)
    cache.d_sims[np.arange(n), 1 - labels] += coef / n
    return value


def grad_all(state: ModelState, batch: StepBatch, weights: dict,
             real_weight: float = 1.0, distill_stream: RngStream | None = None,
             distill_plan: DistillPlan | None = None,
             want_grads: bool = True) -> tuple[LossBreakdown, dict | None]:
    """Evaluate every active loss term and backpropagate through all parameters.

    ``weights`` maps term names to coefficients; absent terms are skipped
    entirely. When no term is active the gradient is None (no step to take).
    The distillation pairing comes from ``distill_plan`` if given (used by the
    finite-difference tests), otherwise it is drawn from ``distill_stream``.
    """
    bd = LossBreakdown(weights={k: float(v) for k, v in weights.items()})
    if not weights:
        return bd, None
    grads = {name: np.zeros_like(p) for name, p in state.params().items()} if want_grads else None

    src = _ForwardCache(state, batch.x_source)
    tgt = None
    needs_target = any(k in weights for k in ("cls_target", "align_target", "con_target", "distill"))
    if needs_target and batch.x_target is not None and batch.x_target.shape[0] > 0:
        tgt = _ForwardCache(state, batch.x_target)

    total = 0.0
    counts: dict[str, int] = {}

    if "cls_source" in weights:
        w = weights["cls_source"]
        sw = np.where(batch.y_source == 0, real_weight, 1.0)
        bd.cls_source = _ce_term(src, batch.y_source, sw, w)
        counts["cls_source"] = batch.y_source.shape[0]
        total += w * bd.cls_source
    if "align_source" in weights:
        w = weights["align_source"]
        bd.align_source = _align_term(src, batch.y_source, state.tau, w)
        counts["align_source"] = batch.y_source.shape[0]
        total += w * bd.align_source

    acc = batch.accepted_pos if batch.accepted_pos is not None else np.array([], dtype=np.int64)
    have_accepted = tgt is not None and acc.size > 0
    for name in ("cls_target", "align_target", "con_target"):
        if name not in weights:
            continue
        w = weights[name]
        if not have_accepted:
            setattr(bd, name, 0.0)
            counts[name] = 0
            continue
        sub = _SubsetCache(tgt, acc)
        y = batch.y_pseudo
        if name == "cls_target":
            value = _ce_term(sub, y, np.ones(acc.size), w)
        elif name == "align_target":
            value = _align_term(sub, y, state.tau, w)
        else:
            value = _contrast_term(sub, y, w)
        sub.flush()
        setattr(bd, name, value)
        counts[name] = int(acc.size)
        total += w * value

    if "distill" in weights:
        w = weights["distill"]
        if tgt is None:
            bd.distill = 0.0
            counts["distill"] = 0
        else:
            plan = distill_plan
            if plan is None:
                plan = make_distill_plan(src.z, tgt.z, distill_stream)
            if plan is None:
                bd.distill = 0.0
                counts["distill"] = 0
            else:
                value, d_z_src = distill_from_plan(src.z, plan)
                bd.distill = value
                counts["distill"] = int(plan.alpha.size)
                total += w * value
                src.d_z += w * d_z_src

    bd.total = total
    bd.counts = counts
    if want_grads:
        _backward(state, src, grads)
        if tgt is not None:
            _backward(state, tgt, grads)
    return bd, grads


class _SubsetCache:
    """View of a cache restricted to accepted rows; writes back seed gradients."""

    def __init__(self, parent: _ForwardCache, rows: np.ndarray):
        self.parent = parent
        self.rows = rows
        self.ce_all = parent.ce_all[rows]
        self.probs = parent.probs[rows]
        self.sims = parent.sims[rows]
        self.d_logits = np.zeros((rows.size, 2))
        self.d_sims = np.zeros((rows.size, 2))

    def flush(self) -> None:
        np.add.at(self.parent.d_logits, self.rows, self.d_logits)
        np.add.at(self.parent.d_sims, self.rows, self.d_sims)


def pseudo_composite(state: ModelState, x_accepted: np.ndarray,
                     y_pseudo: np.ndarray) -> LossBreakdown:
    """Unweighted sum of the three target terms over accepted pseudo-labeled rows."""
    if x_accepted.shape[0] == 0:
        bd = LossBreakdown(cls_target=0.0, align_target=0.0, con_target=0.0, total=0.0,
                           counts={"cls_target": 0, "align_target": 0, "con_target": 0},
                           weights={"cls_target": 1.0, "align_target": 1.0, "con_target": 1.0})
        return bd
    batch = StepBatch(x_source=x_accepted, y_source=y_pseudo, x_target=x_accepted,
                      accepted_pos=np.arange(x_accepted.shape[0]), y_pseudo=y_pseudo)
    weights = {"cls_target": 1.0, "align_target": 1.0, "con_target": 1.0}
    bd, _ = grad_all(state, batch, weights, want_grads=False)
    return bd

"""Reference single-head spherical epipolar attention with analytic gradients.

softmax((q k^T / sqrt(d)) (.) M) v is evaluated in two flavours: the printed
multiplicative form, where masked logits become 0 and still receive weight, and the
additive form, where masked logits become -inf and receive none.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from pano_epipolar.core.epipolar import EpipolarMaskTensor
from pano_epipolar.core.errors import AllMaskedError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)


class MaskSemantics(str, Enum):
    MULTIPLICATIVE_LITERAL = "multiplicative_literal"
    ADDITIVE_NEG_INF = "additive_neg_inf"


@dataclass(frozen=True, eq=False)
class AttnTensors:
    q: np.ndarray  # (h*w, C), one query frame
    k: np.ndarray  # (N*h*w, C)
    v: np.ndarray  # (N*h*w, C)

    def __post_init__(self):
        for name in ("q", "k", "v"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.ndim != 2:
                raise ShapeMismatchError(f"{name} must be a matrix, got shape {value.shape}")
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(f"{name} has non-finite entries")
            object.__setattr__(self, name, value)
        if self.q.shape[1] != self.k.shape[1]:
            raise ShapeMismatchError(f"q and k widths differ: {self.q.shape[1]} vs {self.k.shape[1]}")
        if self.k.shape[0] != self.v.shape[0]:
            raise ShapeMismatchError(f"k and v row counts differ: {self.k.shape[0]} vs {self.v.shape[0]}")

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]

    def replace(self, **tensors) -> "AttnTensors":
        return AttnTensors(tensors.get("q", self.q), tensors.get("k", self.k), tensors.get("v", self.v))


def dense_mask(mask: EpipolarMaskTensor | np.ndarray, n_queries: int, n_keys: int) -> np.ndarray:
    """(h*w, N*h*w) boolean view of a mask tensor or a plain array."""
    if isinstance(mask, EpipolarMaskTensor):
        dense = mask.to_dense().reshape(mask.n_pixels, -1)
    else:
        dense = np.asarray(mask, dtype=bool).reshape(n_queries, -1)
    if dense.shape != (n_queries, n_keys):
        raise ShapeMismatchError(f"mask shape {dense.shape} does not match attention shape {(n_queries, n_keys)}")
    return dense


def attention_weights(t: AttnTensors, mask, mode: MaskSemantics = MaskSemantics.ADDITIVE_NEG_INF) -> np.ndarray:
    m = dense_mask(mask, t.q.shape[0], t.k.shape[0])
    logits = t.q @ t.k.T / np.sqrt(t.head_dim)
    if mode is MaskSemantics.MULTIPLICATIVE_LITERAL:
        scores = logits * m
    else:
        empty = ~m.any(axis=1)
        if empty.any():
            raise AllMaskedError(f"{int(empty.sum())} query rows have every key masked")
        scores = np.where(m, logits, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=1, keepdims=True)


def spheric_epi_attn(t: AttnTensors, mask, mode: MaskSemantics = MaskSemantics.ADDITIVE_NEG_INF) -> np.ndarray:
    return attention_weights(t, mask, mode) @ t.v


def attention_gradients(t: AttnTensors, mask, mode: MaskSemantics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(spheric_epi_attn(...)) with respect to q, k and v."""
    m = dense_mask(mask, t.q.shape[0], t.k.shape[0])
    weights = attention_weights(t, m, mode)
    upstream = np.ones((t.q.shape[0], t.v.shape[1]))
    grad_weights = upstream @ t.v.T
    grad_v = weights.T @ upstream
    grad_scores = weights * (grad_weights - np.sum(grad_weights * weights, axis=1, keepdims=True))
    # masked scores are constant (0 or -inf) in both modes
    grad_logits = grad_scores * m
    scale = 1.0 / np.sqrt(t.head_dim)
    grads = (grad_logits @ t.k * scale, grad_logits.T @ t.q * scale, grad_v)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteError("analytic attention gradient is not finite")
    return grads


def attn_grad_check(t: AttnTensors, mask, mode: MaskSemantics, eps_fd: float = 1e-6,
                    probes: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error of one entry is |a - f| / max(|a|, |f|, 1). With ``probes``
    set, only that many deterministic entries per tensor are differenced.
    """
    m = dense_mask(mask, t.q.shape[0], t.k.shape[0])
    analytic = dict(zip(("q", "k", "v"), attention_gradients(t, m, mode)))
    rng = np.random.default_rng(seed)

    def loss(candidate: AttnTensors) -> float:
        return float(np.sum(spheric_epi_attn(candidate, m, mode)))

    worst = 0.0
    for name, grad in analytic.items():
        base = getattr(t, name)
        indices = np.arange(base.size)
        if probes is not None and probes < base.size:
            indices = np.sort(rng.choice(base.size, size=probes, replace=False))
        for flat in indices:
            idx = np.unravel_index(flat, base.shape)
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps_fd
            minus[idx] -= eps_fd
            numeric = (loss(t.replace(**{name: plus})) - loss(t.replace(**{name: minus}))) / (2.0 * eps_fd)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"finite difference for {name}{idx} is not finite")
            a = grad[idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1.0))
    logger.debug("gradient check (%s): max relative error %.3e", mode.value, worst)
    return worst

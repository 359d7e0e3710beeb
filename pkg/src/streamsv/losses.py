"""Classification and metric-learning objectives.

Every function returns the loss value together with analytic gradients for
each differentiable input, so the trainer can chain them through the encoder
stacks without an autograd engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StreamSVError

# Standard init for the learnable similarity scale/offset of the metric head.
ANGULAR_W_INIT = 10.0
ANGULAR_B_INIT = -5.0
ANGULAR_W_MIN = 1e-6


class LossError(StreamSVError):
    pass


class LabelOutOfRange(LossError):
    pass


class ZeroNormRow(LossError):
    pass


class DegenerateBatch(LossError):
    pass


@dataclass
class LossOutput:
    """Scalar loss and the gradient w.r.t. the primary loss input."""

    value: float
    grad: np.ndarray


@dataclass
class MetricLossOutput(LossOutput):
    """Adds gradients for the learnable similarity scale w and offset b."""

    grad_w: float = 0.0
    grad_b: float = 0.0


@dataclass
class ClassLossOutput(LossOutput):
    """Adds the gradient w.r.t. the class-weight matrix."""

    grad_class_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class CombinedLossOutput:
    """Sum of the classification and metric terms with all partial gradients."""

    value: float
    grad_logits: np.ndarray
    grad_embeddings: np.ndarray
    grad_w: float
    grad_b: float


@dataclass
class MetricBatch:
    """Embeddings laid out (speaker j, utterance m, dim): N_speakers x M_utts x D."""

    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 3:
            raise DegenerateBatch(
                f"metric batch must be (N, M, D), got shape {self.embeddings.shape}"
            )
        if self.embeddings.shape[1] < 2:
            raise DegenerateBatch(
                f"metric batch needs M >= 2 utterances per speaker, got {self.embeddings.shape[1]}"
            )
        if not np.all(np.isfinite(self.embeddings)):
            raise DegenerateBatch("metric batch contains non-finite embeddings")

    @property
    def n_speakers(self) -> int:
        return self.embeddings.shape[0]

    @property
    def m_utts(self) -> int:
        return self.embeddings.shape[1]


def _check_labels(labels: np.ndarray, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise LabelOutOfRange(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    return labels


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits: np.ndarray, labels) -> LossOutput:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise LossError(f"logits must be (N, C), got shape {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    value = float(np.mean(log_z - shifted[np.arange(n), labels]))
    probs = _softmax(logits)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return LossOutput(value=value, grad=grad / n)


def _normalize_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0.0):
        raise ZeroNormRow(f"{what} has a zero-norm row")
    return x / norms[..., None], norms


def _unnormalize_grad(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Chain d/dx through x_hat = x / ||x||: project out the radial component."""
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - radial * unit) / norms[..., None]


def am_softmax(
    embeddings: np.ndarray,
    class_weights: np.ndarray,
    labels,
    margin: float = 0.2,
    scale: float = 30.0,
) -> ClassLossOutput:
    """Additive-margin softmax: CE over s*(cos - m) for the target class."""
    if margin < 0.0 or scale <= 0.0:
        raise LossError(f"need margin >= 0 and scale > 0, got m={margin} s={scale}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    n, c = embeddings.shape[0], class_weights.shape[0]
    labels = _check_labels(labels, n, c)
    e_hat, e_norms = _normalize_rows(embeddings, "embeddings")
    w_hat, w_norms = _normalize_rows(class_weights, "class_weights")

    cos = e_hat @ w_hat.T
    logits = scale * cos
    logits[np.arange(n), labels] -= scale * margin
    ce = softmax_ce(logits, labels)

    grad_cos = scale * ce.grad
    grad_e = _unnormalize_grad(grad_cos @ w_hat, e_hat, e_norms)
    grad_w = _unnormalize_grad(grad_cos.T @ e_hat, w_hat, w_norms)
    return ClassLossOutput(value=ce.value, grad=grad_e, grad_class_weights=grad_w)


def aam_softmax(
    embeddings: np.ndarray,
    class_weights: np.ndarray,
    labels,
    margin: float = 0.2,
    scale: float = 30.0,
) -> ClassLossOutput:
    """Additive angular margin: target logit s*cos(theta + m), clamped at pi."""
    if margin < 0.0 or scale <= 0.0:
        raise LossError(f"need margin >= 0 and scale > 0, got m={margin} s={scale}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    n, c = embeddings.shape[0], class_weights.shape[0]
    labels = _check_labels(labels, n, c)
    e_hat, e_norms = _normalize_rows(embeddings, "embeddings")
    w_hat, w_norms = _normalize_rows(class_weights, "class_weights")

    cos = e_hat @ w_hat.T
    rows = np.arange(n)
    cos_y = np.clip(cos[rows, labels], -1.0, 1.0)
    theta = np.arccos(cos_y)
    clamped = theta + margin > np.pi
    shifted = np.where(clamped, -1.0, np.cos(theta + margin))

    logits = scale * cos
    logits[rows, labels] = scale * shifted
    ce = softmax_ce(logits, labels)

    grad_cos = scale * ce.grad
    # d cos(theta+m)/d cos(theta) = sin(theta+m)/sin(theta); 0 once clamped.
    sin_theta = np.sin(theta)
    factor = np.where(
        clamped, 0.0, np.sin(theta + margin) / np.maximum(sin_theta, 1e-12)
    )
    grad_cos[rows, labels] *= factor
    grad_e = _unnormalize_grad(grad_cos @ w_hat, e_hat, e_norms)
    grad_w = _unnormalize_grad(grad_cos.T @ e_hat, w_hat, w_norms)
    return ClassLossOutput(value=ce.value, grad=grad_e, grad_class_weights=grad_w)


def angular_prototypical(batch: MetricBatch, w: float, b: float) -> MetricLossOutput:
    """Query-vs-prototype cross-entropy over scaled cosine similarities.

    Utterance M of each speaker is the query; the mean of utterances 1..M-1
    is the prototype. S[j, k] = w * cos(query_j, proto_k) + b, and each
    query should select its own speaker's prototype.
    """
    if w <= 0.0:
        raise LossError(f"similarity scale w must be > 0, got {w}")
    emb = batch.embeddings
    n, m, _ = emb.shape
    query = emb[:, m - 1, :]
    protos = emb[:, : m - 1, :].mean(axis=1)
    if np.any(np.linalg.norm(protos, axis=1) == 0.0):
        raise DegenerateBatch("zero-norm prototype")
    if np.any(np.linalg.norm(query, axis=1) == 0.0):
        raise DegenerateBatch("zero-norm query embedding")
    q_hat, q_norms = _normalize_rows(query, "queries")
    p_hat, p_norms = _normalize_rows(protos, "prototypes")

    cos = q_hat @ p_hat.T
    ce = softmax_ce(w * cos + b, np.arange(n))

    grad_w = float(np.sum(ce.grad * cos))
    grad_b = float(np.sum(ce.grad))
    grad_cos = w * ce.grad
    grad_q = _unnormalize_grad(grad_cos @ p_hat, q_hat, q_norms)
    grad_p = _unnormalize_grad(grad_cos.T @ q_hat, p_hat, p_norms)

    grad = np.zeros_like(emb)
    grad[:, m - 1, :] = grad_q
    grad[:, : m - 1, :] = grad_p[:, None, :] / (m - 1)
    return MetricLossOutput(value=ce.value, grad=grad, grad_w=grad_w, grad_b=grad_b)


def combined_loss(
    logits: np.ndarray, labels, batch: MetricBatch, w: float, b: float
) -> CombinedLossOutput:
    """Unit-weight sum of softmax cross-entropy and angular prototypical."""
    ce = softmax_ce(logits, labels)
    ap = angular_prototypical(batch, w, b)
    return CombinedLossOutput(
        value=ce.value + ap.value,
        grad_logits=ce.grad,
        grad_embeddings=ap.grad,
        grad_w=ap.grad_w,
        grad_b=ap.grad_b,
    )

"""
Training objective: pixel cross-entropy with an ignore label plus the VQ loss.
"""

import logging
from typing import Optional, Union

import numpy as np

from .errors import DataError, NumericalError
from .quantizer import QuantizationResult
from .schemas import LossTerms
from .tensor import Tensor

logger = logging.getLogger(__name__)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """
    Mean over non-ignored pixels of -log softmax(logits)[label].

    Args:
        logits: (N, C, H, W) class scores
        labels: (N, H, W) or, for N == 1, (H, W) integer label map
        ignore_index: Label value excluded from the mean

    Returns:
        Scalar tensor; 0 with zero gradient when every pixel is ignored
    """
    labels = np.asarray(labels)
    N, C, H, W = logits.shape
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (N, H, W):
        raise DataError(f"labels {labels.shape} do not match logits {logits.shape}")

    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= C))
    if bad.any():
        n, y, x = np.argwhere(bad)[0]
        raise DataError(f"label {labels[n, y, x]} at (sample {n}, row {y}, col {x}) outside [0, {C})")

    count = int(valid.sum())
    if count == 0:
        logger.warning("All %d pixels carry the ignore label; cross-entropy set to 0", labels.size)
        return Tensor.from_op(np.zeros((), dtype=logits.dtype), (logits,), lambda g: None)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_probs, safe[:, None], axis=1)[:, 0]
    loss = -float(np.sum(picked[valid])) / count

    def _backward(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None]
        logits.accumulate(grad * (np.asarray(g) / count))

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), _backward)


def total_loss(
    ce: Union[float, Tensor],
    qr: Optional[QuantizationResult],
    beta: float,
) -> LossTerms:
    """L = ce + codebook_loss + beta * commitment_loss; qr None means no quantiser."""
    ce_value = ce.item() if isinstance(ce, Tensor) else float(ce)
    vq_value = 0.0 if qr is None else qr.codebook_loss + beta * qr.commitment_loss
    terms = LossTerms(ce=ce_value, vq=vq_value, total=ce_value + vq_value)
    if not np.isfinite(terms.total):
        raise NumericalError(f"non-finite loss: ce={ce_value}, vq={vq_value}")
    return terms

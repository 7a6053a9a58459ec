"""
Vector-quantisation bottleneck.

Each feature vector is replaced by its nearest codebook row. The codebook loss
pulls rows toward the (frozen) encoder output, the commitment loss pulls the
encoder output toward the (frozen) row, and the decoder gradient is copied
straight through the non-differentiable assignment.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .config import VQConfig
from .errors import ConfigurationError, InternalInvariantError, NumericalError
from .layers import Module
from .schemas import CodeUsageStats
from .tensor import Tensor

logger = logging.getLogger(__name__)

# upper bound on elements of the (positions x K x d) difference block
_CHUNK_ELEMENTS = 1 << 22


@dataclass
class Codebook:
    """K x d learnable code vectors."""
    vectors: Tensor

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass
class QuantizationResult:
    indices: np.ndarray      # (..., H, W) ints in [0, K)
    quantized: np.ndarray    # (..., H, W, d), rows of the codebook
    codebook_loss: float
    commitment_loss: float

    def vq_loss(self, beta: float) -> float:
        return self.codebook_loss + beta * self.commitment_loss


def init_codebook(cfg: VQConfig, dtype=np.float64) -> Codebook:
    """Uniform entries in [-1/K, 1/K], reproducible from cfg.seed."""
    if cfg.K < 1 or cfg.d < 1:
        raise ConfigurationError(f"codebook needs K >= 1 and d >= 1, got K={cfg.K}, d={cfg.d}")
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / cfg.K
    vectors = rng.uniform(-bound, bound, size=(cfg.K, cfg.d)).astype(dtype)
    return Codebook(Tensor(vectors, requires_grad=True, name="codebook"))


def _assign(flat: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the nearest row for every vector in `flat`; ties go to the lowest index."""
    K, d = vectors.shape
    chunk = max(1, _CHUNK_ELEMENTS // (K * d))
    out = np.empty(flat.shape[0], dtype=np.int64)
    for start in range(0, flat.shape[0], chunk):
        block = flat[start:start + chunk]
        diff = block[:, None, :] - vectors[None, :, :]
        out[start:start + chunk] = np.argmin(np.einsum("mkd,mkd->mk", diff, diff), axis=1)
    return out


def nearest_code(x: np.ndarray, cb: Codebook) -> int:
    x = np.asarray(x, dtype=cb.vectors.dtype)
    if x.shape != (cb.d,):
        raise ConfigurationError(f"vector of shape {x.shape} does not match code dimension {cb.d}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("cannot quantise a non-finite vector")
    return int(_assign(x[None, :], cb.vectors.data)[0])


def quantize_field(X: np.ndarray, cb: Codebook, cfg: VQConfig) -> QuantizationResult:
    """
    Quantise every spatial position of a channels-last field.

    Args:
        X: Field of shape (H, W, d) or (N, H, W, d)
        cb: Codebook
        cfg: VQ settings

    Returns:
        QuantizationResult; both losses are the mean over positions of the
        squared distance to the assigned row
    """
    X = np.asarray(X)
    if X.shape[-1] != cb.d or cfg.d != cb.d:
        raise ConfigurationError(f"field channel dim {X.shape[-1]} does not match codebook {cb.K}x{cb.d}")
    if not np.all(np.isfinite(X)):
        raise NumericalError("quantize_field got non-finite features")
    flat = X.reshape(-1, cb.d)
    idx = _assign(flat, cb.vectors.data)
    quantized = cb.vectors.data[idx]
    positions = max(1, flat.shape[0])
    sq = float(np.sum((flat - quantized) ** 2)) / positions
    return QuantizationResult(
        indices=idx.reshape(X.shape[:-1]),
        quantized=quantized.reshape(X.shape),
        codebook_loss=sq,
        commitment_loss=sq,
    )


def vq_backward(
    grad_wrt_zq: np.ndarray,
    X: np.ndarray,
    Zq: np.ndarray,
    cb: Codebook,
    cfg: VQConfig,
    indices: Optional[np.ndarray] = None,
    loss_grad: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Route gradients through the bottleneck with the assignment held fixed.

    Args:
        grad_wrt_zq: Downstream gradient at the quantised field
        X: Encoder output (same layout as Zq, channels last)
        Zq: Quantised field
        cb: Codebook
        cfg: VQ settings (beta)
        indices: Assignment used for Zq; recomputed from X when omitted
        loss_grad: Upstream gradient of the VQ loss scalar

    Returns:
        (grad_wrt_X, grad_wrt_codebook). grad_wrt_X is the copied decoder
        gradient plus the commitment term only; the codebook gradient comes
        from the codebook term only and touches selected rows only.
    """
    flat_x = X.reshape(-1, cb.d)
    flat_q = Zq.reshape(-1, cb.d)
    if indices is None:
        indices = _assign(flat_x, cb.vectors.data)
    idx = np.asarray(indices).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= cb.K):
        raise InternalInvariantError(f"code index out of range [0, {cb.K}): min {idx.min()}, max {idx.max()}")
    positions = max(1, flat_x.shape[0])
    residual = flat_x - flat_q
    grad_x = grad_wrt_zq.reshape(-1, cb.d) + loss_grad * cfg.beta * 2.0 * residual / positions
    grad_cb = np.zeros_like(cb.vectors.data)
    np.add.at(grad_cb, idx, -loss_grad * 2.0 * residual / positions)
    return grad_x.reshape(X.shape), grad_cb


def usage_stats(indices: np.ndarray, K: int) -> CodeUsageStats:
    idx = np.asarray(indices).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise InternalInvariantError(f"code index out of range [0, {K})")
    histogram = np.bincount(idx, minlength=K)
    total = histogram.sum()
    if total == 0:
        return CodeUsageStats(histogram=histogram.tolist(), usage_fraction=0.0, perplexity=1.0)
    p = histogram[histogram > 0] / total
    perplexity = float(np.exp(-np.sum(p * np.log(p))))
    return CodeUsageStats(
        histogram=histogram.tolist(),
        usage_fraction=float(np.count_nonzero(histogram)) / K,
        perplexity=perplexity,
    )


class VectorQuantizer(Module):
    """
    Bottleneck layer over NCHW features.

    Returns the straight-through quantised tensor, the scalar VQ loss and the
    QuantizationResult of the batch.
    """

    def __init__(self, cfg: VQConfig, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.codebook = init_codebook(cfg, dtype).vectors

    @property
    def book(self) -> Codebook:
        return Codebook(self.codebook)

    def forward(self, z: Tensor) -> Tuple[Tensor, Tensor, QuantizationResult]:
        if z.ndim != 4 or z.shape[1] != self.cfg.d:
            raise ConfigurationError(f"quantiser expects (N, {self.cfg.d}, H, W) features, got {z.shape}")
        field = np.ascontiguousarray(z.data.transpose(0, 2, 3, 1))
        book = self.book
        qr = quantize_field(field, book, self.cfg)

        # straight-through: decoder gradient is copied onto the encoder output
        zq = Tensor.from_op(
            np.ascontiguousarray(qr.quantized.transpose(0, 3, 1, 2)), (z,), lambda g: z.accumulate(g)
        )

        def _loss_backward(g):
            grad_x, grad_cb = vq_backward(
                np.zeros_like(field), field, qr.quantized, book, self.cfg,
                indices=qr.indices, loss_grad=float(np.sum(g)),
            )
            z.accumulate(grad_x.transpose(0, 3, 1, 2))
            self.codebook.accumulate(grad_cb)

        loss = Tensor.from_op(
            np.asarray(qr.vq_loss(self.cfg.beta), dtype=z.dtype), (z, self.codebook), _loss_backward
        )
        return zq, loss, qr

"""
In-process checks runnable without pytest: operator gradients, quantiser
oracle, VQ gradient routing, patch round trip and metric oracle.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import ops
from .blocks import fold, unfold
from .config import VQConfig
from .losses import cross_entropy
from .metrics import ConfusionMatrix, accumulate_confusion, iou_report
from .quantizer import Codebook, nearest_code, quantize_field, usage_stats, vq_backward
from .tensor import Tensor, grad_check

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _param(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    return (y * Tensor(w)).sum()


def check_operator_gradients(rng: np.random.Generator) -> str:
    x = _param(rng, 2, 4, 6, 6)
    k = _param(rng, 6, 2, 3, 3)
    w = rng.standard_normal((2, 6, 3, 3))
    errors = {
        "conv2d": grad_check(lambda t: _weighted(ops.conv2d(t, k, stride=2, padding=1, groups=2), w), x),
        "conv2d kernel": grad_check(lambda t: _weighted(ops.conv2d(x, t, stride=2, padding=1, groups=2), w), k),
    }
    kt = _param(rng, 4, 3, 2, 2)
    wt = rng.standard_normal((2, 3, 12, 12))
    errors["conv2d_transpose"] = grad_check(lambda t: _weighted(ops.conv2d_transpose(t, kt, 2), wt), x)

    tokens = _param(rng, 2, 3, 5)
    gamma, beta = _param(rng, 5), _param(rng, 5)
    wl = rng.standard_normal((2, 3, 5))
    errors["softmax"] = grad_check(lambda t: _weighted(ops.softmax(t, axis=-1), wl), tokens)
    errors["layer_norm"] = grad_check(lambda t: _weighted(ops.layer_norm(t, gamma, beta), wl), tokens)

    g4, b4 = _param(rng, 4), _param(rng, 4)
    wb = rng.standard_normal(x.shape)
    errors["batch_norm"] = grad_check(
        lambda t: _weighted(ops.batch_norm(t, g4, b4, np.zeros(4), np.ones(4), True), wb), x
    )
    errors["silu"] = grad_check(lambda t: _weighted(ops.silu(t), wb), x)

    logits = _param(rng, 1, 3, 4, 4)
    labels = rng.integers(0, 3, size=(4, 4))
    labels[0, 0] = 255
    errors["cross_entropy"] = grad_check(lambda t: cross_entropy(t, labels, 255), logits)

    worst = max(errors, key=errors.get)
    if errors[worst] >= GRAD_TOLERANCE:
        raise AssertionError(f"{worst} gradient error {errors[worst]:.2e}")
    return f"{len(errors)} ops, worst {worst} {errors[worst]:.1e}"


def check_quantizer_oracle(rng: np.random.Generator, instances: int = 1000) -> str:
    for n in range(instances):
        K, d = int(rng.integers(1, 257)), int(rng.integers(1, 65))
        cb = Codebook(Tensor(rng.standard_normal((K, d))))
        x = rng.standard_normal(d)
        brute = min(range(K), key=lambda k: (float(np.sum((x - cb.vectors.data[k]) ** 2)), k))
        got = nearest_code(x, cb)
        if got != brute:
            raise AssertionError(f"instance {n}: nearest_code {got} != exhaustive {brute}")
    return f"{instances} instances"


def check_vq_routing(rng: np.random.Generator) -> str:
    d, K = 3, 5
    cfg = VQConfig(beta=0.25, K=K, d=d)
    cb = Codebook(Tensor(rng.standard_normal((K, d))))
    X = rng.standard_normal((2, 2, d))
    qr = quantize_field(X, cb, cfg)
    downstream = rng.standard_normal(X.shape)
    grad_x, grad_cb = vq_backward(downstream, X, qr.quantized, cb, cfg, qr.indices)
    expected_x = downstream + cfg.beta * 2.0 * (X - qr.quantized) / 4
    if np.max(np.abs(grad_x - expected_x)) > 1e-10:
        raise AssertionError("encoder gradient is not downstream + beta * d(commitment)/dX")
    unused = np.setdiff1d(np.arange(K), qr.indices)
    if np.any(grad_cb[unused] != 0.0):
        raise AssertionError("unselected codebook rows received gradient")

    # codebook term only, assignment frozen
    idx = qr.indices.reshape(-1)
    flat = X.reshape(-1, d)
    e = Tensor(cb.vectors.data.copy(), requires_grad=True)
    err = grad_check(lambda t: ((Tensor(flat) - _gather(t, idx)) * (Tensor(flat) - _gather(t, idx))).sum() * (1.0 / 4), e)
    numeric_ok = np.allclose(e.grad if e.grad is not None else 0.0, grad_cb, atol=1e-8)
    if err >= GRAD_TOLERANCE or not numeric_ok:
        raise AssertionError(f"codebook gradient mismatch ({err:.2e})")
    return f"{len(unused)} unused rows stay at zero gradient"


def _gather(table: Tensor, idx: np.ndarray) -> Tensor:
    onehot = np.zeros((idx.size, table.shape[0]))
    onehot[np.arange(idx.size), idx] = 1.0
    return Tensor(onehot) @ table


def check_fold_roundtrip(rng: np.random.Generator, shapes: int = 100) -> str:
    for _ in range(shapes):
        pw, ph = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        B, C = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        H, W = ph * int(rng.integers(1, 5)), pw * int(rng.integers(1, 5))
        x = rng.standard_normal((B, C, H, W))
        back = fold(unfold(Tensor(x), pw, ph)).data
        if not np.array_equal(back, x):
            raise AssertionError(f"fold(unfold(x)) != x for shape {x.shape}, patch {pw}x{ph}")
    return f"{shapes} shapes"


def _nested_loop_miou(pred: np.ndarray, gt: np.ndarray, C: int) -> float:
    counts = np.zeros((C, C))
    for g, p in zip(gt.reshape(-1), pred.reshape(-1)):
        counts[g, p] += 1
    ious = []
    for c in range(C):
        union = counts[c, :].sum() + counts[:, c].sum() - counts[c, c]
        if union > 0:
            ious.append(counts[c, c] / union)
    return float(np.mean(ious))


def check_metric_oracle(rng: np.random.Generator, pairs: int = 50) -> str:
    for _ in range(pairs):
        C = int(rng.integers(2, 6))
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        pred, gt = rng.integers(0, C, size=shape), rng.integers(0, C, size=shape)
        _, miou = iou_report(accumulate_confusion(pred, gt, 255, ConfusionMatrix(C)))
        if abs(miou - _nested_loop_miou(pred, gt, C)) >= 1e-12:
            raise AssertionError(f"mIoU disagrees with nested-loop oracle on a {C}-class {shape} pair")
    uniform = usage_stats(np.arange(19), 19).perplexity
    collapsed = usage_stats(np.zeros(50, dtype=np.int64), 19).perplexity
    if not (np.isclose(uniform, 19.0, rtol=0, atol=1e-12) and collapsed == 1.0):
        raise AssertionError(f"perplexity boundaries wrong: uniform {uniform}, collapsed {collapsed}")
    return f"{pairs} pairs, perplexity boundaries exact"


CHECKS: List[Callable[[np.random.Generator], str]] = [
    check_operator_gradients,
    check_quantizer_oracle,
    check_vq_routing,
    check_fold_roundtrip,
    check_metric_oracle,
]


def run_selftest(seed: int = 0) -> List[CheckResult]:
    results: List[CheckResult] = []
    for check in CHECKS:
        name = check.__name__.replace("check_", "")
        start = time.perf_counter()
        try:
            detail = check(np.random.default_rng(seed))
            passed = True
        except AssertionError as e:
            detail, passed = str(e), False
        results.append(CheckResult(name, passed, detail, time.perf_counter() - start))
        logger.info("selftest %s: %s (%s)", name, "ok" if passed else "FAILED", detail)
    return results

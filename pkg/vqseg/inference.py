"""
Sliding-window inference: tile, run the model per window, average overlapping logits.
"""

import logging
from typing import Callable, List, Tuple, Union

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

WindowSize = Union[int, Tuple[int, int]]


def window_starts(length: int, window: int, stride: int) -> List[int]:
    """Start offsets covering [0, length); the last window is pushed back to end at length."""
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def _logits_of(model: Callable, x: np.ndarray) -> np.ndarray:
    out = model(Tensor(x))
    out = getattr(out, "logits", out)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def sliding_window_infer(
    model: Callable,
    image: Union[np.ndarray, Tensor],
    window: WindowSize,
    stride: WindowSize,
) -> np.ndarray:
    """
    Fused logits for a batch of images.

    Args:
        model: Segmentation model (or any callable mapping an (N, 3, h, w)
            tensor to logits)
        image: (N, 3, H, W) images
        window: Window size, int or (h, w)
        stride: Window stride, int or (h, w); must not exceed the window

    Returns:
        (N, C, H, W) logits; each pixel is the mean over the windows that
        cover it. Images smaller than the window are edge-padded first.
    """
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    if x.ndim != 4:
        raise ConfigurationError(f"expected (N, 3, H, W) images, got {x.shape}")
    wh, ww = (window, window) if isinstance(window, int) else tuple(window)
    sh, sw = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if sh <= 0 or sw <= 0:
        raise ConfigurationError(f"window stride must be positive, got {(sh, sw)}")
    if wh <= 0 or ww <= 0:
        raise ConfigurationError(f"window size must be positive, got {(wh, ww)}")
    if sh > wh or sw > ww:
        raise ConfigurationError(f"stride {(sh, sw)} larger than window {(wh, ww)} would leave gaps")

    N, _, H, W = x.shape
    pad_h, pad_w = max(0, wh - H), max(0, ww - W)
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    Hp, Wp = x.shape[2:]

    total = None
    coverage = np.zeros((Hp, Wp), dtype=np.int64)
    rows, cols = window_starts(Hp, wh, sh), window_starts(Wp, ww, sw)
    with no_grad():
        for y0 in rows:
            for x0 in cols:
                logits = _logits_of(model, np.ascontiguousarray(x[:, :, y0:y0 + wh, x0:x0 + ww]))
                if total is None:
                    total = np.zeros((N, logits.shape[1], Hp, Wp), dtype=np.float64)
                total[:, :, y0:y0 + wh, x0:x0 + ww] += logits
                coverage[y0:y0 + wh, x0:x0 + ww] += 1
    logger.debug("Sliding window %dx%d over %dx%d: %d windows", wh, ww, Hp, Wp, len(rows) * len(cols))
    fused = total / coverage
    return fused[:, :, :H, :W].astype(logits.dtype)

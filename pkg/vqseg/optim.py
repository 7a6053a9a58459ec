"""
AdamW with decoupled weight decay and the polynomial learning-rate schedule.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .config import TrainConfig
from .errors import ConfigurationError, NumericalError
from .tensor import ParamStore

logger = logging.getLogger(__name__)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - iteration / max_iters) ** poly_power."""
    if not 0 <= iteration <= cfg.max_iters:
        raise ConfigurationError(f"iteration {iteration} outside 0..{cfg.max_iters}")
    if iteration == cfg.max_iters:
        return 0.0
    return cfg.lr0 * (1.0 - iteration / cfg.max_iters) ** cfg.poly_power


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """
    One AdamW update, in place on the param arrays.

    Parameters whose gradient is None are left untouched (no moment update,
    no decay), and their bias correction counts only the steps they took part in.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        t = state.counts.get(name, 0) + 1
        state.counts[name] = t
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= (lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)).astype(p.dtype)
    return state


class AdamW:
    """adamw_step over a ParamStore, reading each tensor's .grad."""

    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.store = store
        self.weight_decay = cfg.weight_decay
        self.betas = tuple(cfg.betas)
        self.eps = cfg.eps
        self.state = AdamState()

    def step(self, lr: float) -> None:
        params = {name: t.data for name, t in self.store.items()}
        grads = {name: t.grad for name, t in self.store.items()}
        adamw_step(params, grads, self.state, lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view of the optimiser state, for checkpoints."""
        arrays: Dict[str, np.ndarray] = {"step": np.asarray([self.state.step], dtype=np.int64)}
        for name, m in self.state.m.items():
            arrays[f"m.{name}"] = m
            arrays[f"v.{name}"] = self.state.v[name]
            arrays[f"t.{name}"] = np.asarray([self.state.counts[name]], dtype=np.int64)
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        state = AdamState(step=int(arrays["step"][0]) if "step" in arrays else 0)
        for key, value in arrays.items():
            kind, _, name = key.partition(".")
            if kind == "m":
                state.m[name] = np.array(value, copy=True)
            elif kind == "v":
                state.v[name] = np.array(value, copy=True)
            elif kind == "t":
                state.counts[name] = int(value[0])
        unknown = set(state.m) - set(self.store)
        if unknown:
            raise ConfigurationError(f"optimiser state for unknown parameters: {sorted(unknown)}")
        self.state = state

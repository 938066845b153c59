"""Adam with bias correction over named parameter dictionaries."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from errors import DimensionError, NumericError
from numeric.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, Tensor], AdamState]:
    """
    One Adam update. Returns new parameter tensors and a new state; the inputs
    are left untouched. A parameter without an entry in `grads` is treated as
    having a zero gradient.
    """
    checked: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        g = np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise DimensionError(f"Adam state for {name!r} has shape {state.m[name].shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}", {"step": state.t + 1})
        checked[name] = g

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t

    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = checked[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=p.dtype)
            v = np.zeros(p.shape, dtype=p.dtype)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = Tensor(p.data - update, requires_grad=p.requires_grad, name=name)
        new_m[name] = m
        new_v[name] = v

    return new_params, AdamState(
        lr=state.lr, beta1=b1, beta2=b2, eps=state.eps, t=t, m=new_m, v=new_v
    )
